"""The seven base membership classifiers used by the stacking attack.

Every estimator maps an attack input (target class probabilities followed by
the one-hot task label) to a membership probability in ``[0, 1]``.

Default hyperparameters:

====  =================================================================
LR    logistic loss, full-batch GD, 500 iterations, lr 0.1, L2 1e-3
DT    CART/Gini, max depth 5, min leaf 2
RF    100 bootstrap trees, floor(sqrt(f)) features per split, depth 6
GB    100 depth-3 trees on logistic gradients, shrinkage 0.1
KNN   k = 5, Euclidean, score = member fraction among neighbours
SVM   linear hinge, full-batch subgradient, 500 epochs, lr 0.01, L2 1e-3,
      Platt-scaled on training decision values
NN    16 ReLU units, sigmoid output, 300 epochs SGD (batch 32), lr 0.05
====  =================================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable

import numpy as np

from .trees import BoostedTrees, Tree, build_classification_tree, sigmoid


class EstimatorKind(str, Enum):
    NN = "NN"
    RF = "RF"
    DT = "DT"
    GB = "GB"
    KNN = "KNN"
    SVM = "SVM"
    LR = "LR"


# meta-feature order
KIND_ORDER = (EstimatorKind.NN, EstimatorKind.RF, EstimatorKind.DT, EstimatorKind.GB,
              EstimatorKind.KNN, EstimatorKind.SVM, EstimatorKind.LR)

# fixed offsets from a master seed, one per kind
SEED_OFFSETS = {kind: i for i, kind in enumerate(KIND_ORDER)}

HYPERPARAMETERS: dict[str, dict[str, Any]] = {
    "LR": {"iterations": 500, "learning_rate": 0.1, "l2": 1e-3},
    "DT": {"max_depth": 5, "min_leaf": 2},
    "RF": {"n_trees": 100, "max_depth": 6, "min_leaf": 1, "max_features": "sqrt"},
    "GB": {"n_rounds": 100, "max_depth": 3, "shrinkage": 0.1, "reg_lambda": 1.0},
    "KNN": {"k": 5},
    "SVM": {"epochs": 500, "learning_rate": 0.01, "l2": 1e-3, "platt_iterations": 100},
    "NN": {"hidden": 16, "epochs": 300, "learning_rate": 0.05, "batch_size": 32},
}


class EstimatorError(ValueError):
    pass


# ---------------------------------------------------------------------------
# per-kind fit/score


def _fit_lr(X, y, rng, iterations=500, learning_rate=0.1, l2=1e-3):
    n, f = X.shape
    w, b = np.zeros(f), 0.0
    for _ in range(iterations):
        r = sigmoid(X @ w + b) - y
        w = w - learning_rate * (X.T @ r / n + l2 * w)
        b = b - learning_rate * r.mean()
    return {"w": w, "b": b}


def _score_lr(s, X):
    return sigmoid(X @ s["w"] + s["b"])


def _fit_dt(X, y, rng, max_depth=5, min_leaf=2):
    return {"tree": build_classification_tree(X, y, max_depth, min_leaf)}


def _score_dt(s, X):
    return s["tree"].predict(X)


def random_forest(X, y, rng, n_trees=100, max_depth=6, min_leaf=1, max_features="sqrt"):
    n, f = X.shape
    if max_features == "sqrt":
        max_features = max(1, int(math.isqrt(f)))
    trees, boots = [], []
    for _ in range(n_trees):
        boot = rng.integers(0, n, size=n)
        trees.append(build_classification_tree(X[boot], y[boot], max_depth, min_leaf,
                                               max_features, rng))
        boots.append(boot)
    return {"trees": trees, "bootstraps": np.array(boots)}


def _score_rf(s, X):
    return np.mean([t.predict(X) for t in s["trees"]], axis=0)


def _fit_gb(X, y, rng, n_rounds=100, max_depth=3, shrinkage=0.1, reg_lambda=1.0):
    return {"model": BoostedTrees.fit(X, y, n_rounds, max_depth, shrinkage, reg_lambda)}


def _score_gb(s, X):
    return s["model"].predict_proba(X)


def _fit_knn(X, y, rng, k=5):
    return {"X": X.copy(), "y": y.copy(), "k": min(k, len(y))}


def _score_knn(s, X):
    train, labels, k = s["X"], s["y"], s["k"]
    d2 = (np.sum(X ** 2, axis=1)[:, None] - 2 * X @ train.T + np.sum(train ** 2, axis=1)[None, :])
    d2 = np.maximum(d2, 0.0)
    # stable sort: equal distances keep training-set order
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return labels[nearest].mean(axis=1)


def _platt(f, y, iterations=100):
    """Fit ``P(y=1 | f) = sigmoid(a f + b)`` by Newton's method on Platt's smoothed targets."""
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    t = np.where(y > 0, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))
    a, b = 0.0, math.log((n_pos + 1) / (n_neg + 1))
    for _ in range(iterations):
        p = sigmoid(a * f + b)
        r = p - t
        w = p * (1 - p) + 1e-12
        g = np.array([np.dot(r, f), r.sum()])
        H = np.array([[np.dot(w * f, f), np.dot(w, f)], [np.dot(w, f), w.sum()]]) + 1e-9 * np.eye(2)
        step = np.linalg.solve(H, g)
        a, b = a - step[0], b - step[1]
        if np.max(np.abs(step)) < 1e-10:
            break
    return float(a), float(b)


def _fit_svm(X, y, rng, epochs=500, learning_rate=0.01, l2=1e-3, platt_iterations=100):
    n, f = X.shape
    s = 2 * y - 1
    w, b = np.zeros(f), 0.0
    for _ in range(epochs):
        active = s * (X @ w + b) < 1
        gw = l2 * w - (X[active].T @ s[active]) / n
        gb = -s[active].sum() / n
        w, b = w - learning_rate * gw, b - learning_rate * gb
    a, c = _platt(X @ w + b, y, platt_iterations)
    return {"w": w, "b": b, "platt_a": a, "platt_b": c}


def _score_svm(s, X):
    return sigmoid(s["platt_a"] * (X @ s["w"] + s["b"]) + s["platt_b"])


def _fit_nn(X, y, rng, hidden=16, epochs=300, learning_rate=0.05, batch_size=32):
    n, f = X.shape
    W1 = rng.standard_normal((f, hidden)) * math.sqrt(2.0 / f)
    b1 = np.zeros(hidden)
    W2 = rng.standard_normal(hidden) * math.sqrt(1.0 / hidden)
    b2 = 0.0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = X[idx], y[idx]
            pre = xb @ W1 + b1
            h = np.maximum(pre, 0.0)
            r = (sigmoid(h @ W2 + b2) - yb) / len(idx)
            dh = np.outer(r, W2) * (pre > 0)
            W2 = W2 - learning_rate * (h.T @ r)
            b2 = b2 - learning_rate * r.sum()
            W1 = W1 - learning_rate * (xb.T @ dh)
            b1 = b1 - learning_rate * dh.sum(axis=0)
    return {"W1": W1, "b1": b1, "W2": W2, "b2": float(b2)}


def _score_nn(s, X):
    h = np.maximum(X @ s["W1"] + s["b1"], 0.0)
    return sigmoid(h @ s["W2"] + s["b2"])


_REGISTRY: dict[EstimatorKind, tuple[Callable, Callable]] = {
    EstimatorKind.LR: (_fit_lr, _score_lr),
    EstimatorKind.DT: (_fit_dt, _score_dt),
    EstimatorKind.RF: (random_forest, _score_rf),
    EstimatorKind.GB: (_fit_gb, _score_gb),
    EstimatorKind.KNN: (_fit_knn, _score_knn),
    EstimatorKind.SVM: (_fit_svm, _score_svm),
    EstimatorKind.NN: (_fit_nn, _score_nn),
}


# ---------------------------------------------------------------------------
# public interface


@dataclass(frozen=True, eq=False)
class FittedEstimator:
    kind: EstimatorKind
    state: dict
    seed: int
    n_inputs: int

    def score_many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_inputs:
            raise EstimatorError(f"{self.kind.value}: expected inputs of length {self.n_inputs}, "
                                 f"got {X.shape[1]}")
        out = np.asarray(_REGISTRY[self.kind][1](self.state, X), dtype=np.float64)
        out = np.clip(out, 0.0, 1.0)
        if np.isnan(out).any():
            raise EstimatorError(f"{self.kind.value}: produced NaN scores")
        return out

    def score(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise EstimatorError("score takes a single input vector; use score_many for batches")
        return float(self.score_many(x[None, :])[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "seed": self.seed, "n_inputs": self.n_inputs,
                "state": _encode(self.state)}

    @classmethod
    def from_dict(cls, d: dict) -> "FittedEstimator":
        return cls(EstimatorKind(d["kind"]), _decode(d["state"]), int(d["seed"]), int(d["n_inputs"]))


def fit(kind, inputs, labels, seed: int = 0, **overrides) -> FittedEstimator:
    """Fit one base estimator on attack inputs with binary membership labels."""
    kind = EstimatorKind(kind)
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise EstimatorError("inputs and labels differ in length")
    if not np.all((y == 0) | (y == 1)):
        raise EstimatorError("labels must be 0 or 1")
    if y.size == 0 or y.min() == y.max():
        raise EstimatorError(f"{kind.value}: both classes are required to fit, got a single class")
    if not np.all(np.isfinite(X)):
        raise EstimatorError("inputs must be finite")
    hyper = {**HYPERPARAMETERS[kind.value], **overrides}
    rng = np.random.default_rng(seed)
    state = _REGISTRY[kind][0](X, y, rng, **hyper)
    return FittedEstimator(kind, state, seed, X.shape[1])


def score(est: FittedEstimator, x) -> float:
    return est.score(x)


def fit_all(inputs, labels, seed: int = 0) -> dict[EstimatorKind, FittedEstimator]:
    """Fit all seven kinds with seeds ``seed + SEED_OFFSETS[kind]``."""
    return {kind: fit(kind, inputs, labels, seed + SEED_OFFSETS[kind]) for kind in KIND_ORDER}


def _encode(obj):
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, Tree):
        return {"__tree__": obj.to_dict()}
    if isinstance(obj, BoostedTrees):
        return {"__boosted__": obj.to_dict()}
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        if "__tree__" in obj:
            return Tree.from_dict(obj["__tree__"])
        if "__boosted__" in obj:
            return BoostedTrees.from_dict(obj["__boosted__"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj
