"""Scaled-down target classifiers, plain SGD and DP-SGD training, black-box queries.

Two architectures are supported: multinomial logistic regression (the
default) and a one-hidden-layer ReLU MLP. Both are trained with mini-batch
SGD on cross-entropy plus L2 weight decay. DP-SGD clips every per-sample
gradient to ``clip_norm`` and adds ``N(0, (noise_multiplier * clip_norm)^2)``
noise to the clipped sum before dividing by the batch size.

Randomness is keyed by ``(seed, epoch)`` rather than drawn from one running
stream, so resuming training at epoch ``e`` (as FedAvg rounds do) replays
exactly the batches and noise a single long run would have used.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, PredictionMatrix, Record, write_text_atomic

LOSS_FLOOR = 1e-12
ARCHITECTURES = ("logistic", "mlp")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        msg = f"training diverged at epoch {epoch}: loss is not finite"
        super().__init__(msg + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.003
    weight_decay: float = 1e-4
    batch_divisor: int = 15
    test_fraction: float = 0.3
    seed: int = 0
    architecture: str = "logistic"
    hidden_width: int = 32

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.batch_divisor < 1:
            raise ValueError("batch_divisor must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    def batch_size(self, n: int) -> int:
        return max(1, math.ceil(n / self.batch_divisor))

    def batches_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.batch_size(n))


@dataclass(frozen=True)
class PrivacyConfig:
    """One DP tier. ``noise_multiplier=None`` means "calibrate from epsilon"."""

    epsilon: float = math.inf
    delta: float = 1e-5
    clip_norm: float = 2.0
    noise_multiplier: Optional[float] = None
    steps: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        nm = self.noise_multiplier
        if math.isinf(self.epsilon):
            if nm is None:
                object.__setattr__(self, "noise_multiplier", 0.0)
            elif nm != 0:
                raise ValueError("epsilon = inf requires noise_multiplier = 0")
        elif nm is not None and nm <= 0:
            raise ValueError("a finite epsilon requires noise_multiplier > 0")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ValueError("noise_multiplier must be >= 0")

    @property
    def is_private(self) -> bool:
        return not math.isinf(self.epsilon)

    def resolved(self, steps: int) -> "PrivacyConfig":
        """Fill in ``steps`` and, if missing, the noise multiplier calibrated for them."""
        if self.noise_multiplier is not None:
            return replace(self, steps=steps)
        from .accountant import calibrate_sigma

        sigma = calibrate_sigma(self.epsilon, steps, self.delta)
        return replace(self, noise_multiplier=sigma, steps=steps)


TIERS = {
    "nodp": PrivacyConfig(epsilon=math.inf),
    "lowdp": PrivacyConfig(epsilon=200.0),
    "highdp": PrivacyConfig(epsilon=10.0),
}


@dataclass(frozen=True, eq=False)
class TargetModel:
    architecture: str
    params: tuple[np.ndarray, ...]
    n_classes: int
    n_features: int
    privacy: Optional[PrivacyConfig] = None
    history: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        frozen = []
        for p in self.params:
            a = np.array(p, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "params", tuple(frozen))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TargetModel):
            return NotImplemented
        return (
            self.architecture == other.architecture
            and self.n_classes == other.n_classes
            and self.n_features == other.n_features
            and len(self.params) == len(other.params)
            and all(np.array_equal(a, b) for a, b in zip(self.params, other.params))
        )

    @property
    def hidden_width(self) -> Optional[int]:
        return self.params[0].shape[1] if self.architecture == "mlp" else None


# ---------------------------------------------------------------------------
# forward / backward


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *keys])


def init_params(architecture: str, n_features: int, n_classes: int,
                hidden_width: int = 32, seed: int = 0) -> tuple[np.ndarray, ...]:
    if architecture == "logistic":
        return (np.zeros((n_features, n_classes)), np.zeros(n_classes))
    if architecture == "mlp":
        rng = _rng(seed, 0x1A17)
        w1 = rng.standard_normal((n_features, hidden_width)) * math.sqrt(2.0 / n_features)
        w2 = rng.standard_normal((hidden_width, n_classes)) * math.sqrt(2.0 / hidden_width)
        return (w1, np.zeros(hidden_width), w2, np.zeros(n_classes))
    raise ValueError(f"unknown architecture {architecture!r}")


def logits(architecture: str, params: Sequence[np.ndarray], X: np.ndarray) -> np.ndarray:
    if architecture == "logistic":
        W, b = params
        return X @ W + b
    W1, b1, W2, b2 = params
    return np.maximum(X @ W1 + b1, 0.0) @ W2 + b2


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def per_sample_gradients(architecture: str, params: Sequence[np.ndarray], X: np.ndarray,
                         y: np.ndarray) -> list[np.ndarray]:
    """Gradients of each sample's cross-entropy; every array has a leading batch axis."""
    n = X.shape[0]
    if architecture == "logistic":
        W, b = params
        delta = softmax(X @ W + b)
        delta[np.arange(n), y] -= 1.0
        return [np.einsum("ni,nk->nik", X, delta), delta]
    W1, b1, W2, b2 = params
    pre = X @ W1 + b1
    h = np.maximum(pre, 0.0)
    delta = softmax(h @ W2 + b2)
    delta[np.arange(n), y] -= 1.0
    dh = (delta @ W2.T) * (pre > 0)
    return [np.einsum("ni,nj->nij", X, dh), dh, np.einsum("nj,nk->njk", h, delta), delta]


def objective(architecture: str, params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray,
              weight_decay: float = 0.0) -> float:
    """Mean cross-entropy plus ``weight_decay / 2 * ||theta||^2``."""
    z = logits(architecture, params, X)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(y)), y].mean()
    return float(ce + 0.5 * weight_decay * sum(float(np.sum(p * p)) for p in params))


def gradient(architecture: str, params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray,
             weight_decay: float = 0.0) -> list[np.ndarray]:
    grads = per_sample_gradients(architecture, params, X, y)
    return [g.sum(axis=0) / len(y) + weight_decay * p for g, p in zip(grads, params)]


def clip_per_sample(grads: list[np.ndarray], clip_norm: float) -> tuple[list[np.ndarray], np.ndarray]:
    """Rescale each sample's joint gradient by ``min(1, clip_norm / ||g_i||)``.

    Returns the clipped gradients and the pre-clip norms.
    """
    n = grads[0].shape[0]
    sq = sum(np.sum(g.reshape(n, -1) ** 2, axis=1) for g in grads)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.minimum(1.0, np.where(norms > 0, clip_norm / norms, 1.0))
    clipped = [g * factor.reshape((n,) + (1,) * (g.ndim - 1)) for g in grads]
    return clipped, norms


# ---------------------------------------------------------------------------
# training


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray, int]:
    if isinstance(data, Dataset):
        return data.features, data.labels, data.n_classes
    X, y = data[0], data[1]
    y = np.asarray(y, dtype=np.int64)
    k = data[2] if len(data) > 2 else int(y.max()) + 1
    return np.asarray(X, dtype=np.float64), y, k


def run_sgd(architecture: str, params: Sequence[np.ndarray], X: np.ndarray, y: np.ndarray,
            cfg: TrainConfig, priv: Optional[PrivacyConfig] = None, start_epoch: int = 0,
            n_epochs: Optional[int] = None, seed: Optional[int] = None) -> tuple[list[np.ndarray], list[float]]:
    """Run SGD epochs ``start_epoch .. start_epoch + n_epochs - 1`` from ``params``.

    With ``priv`` set, per-sample gradients are clipped and noised (DP-SGD);
    otherwise the same batch gradient is used unclipped. Returns the final
    parameters and the full-train objective after each epoch.
    """
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    seed = cfg.seed if seed is None else seed
    n_epochs = cfg.epochs if n_epochs is None else n_epochs
    bs = cfg.batch_size(n)
    lr, wd = cfg.learning_rate, cfg.weight_decay
    params = [np.array(p, dtype=np.float64, copy=True) for p in params]
    sigma = 0.0
    if priv is not None:
        if priv.noise_multiplier is None:
            raise ValueError("noise_multiplier is unresolved; call PrivacyConfig.resolved() first")
        sigma = priv.noise_multiplier
    history = []
    for epoch in range(start_epoch, start_epoch + n_epochs):
        order = _rng(seed, epoch).permutation(n)
        noise_rng = _rng(seed, epoch, 1)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            grads = per_sample_gradients(architecture, params, X[idx], y[idx])
            if priv is not None:
                grads, _ = clip_per_sample(grads, priv.clip_norm)
            summed = [g.sum(axis=0) for g in grads]
            if sigma > 0:
                std = sigma * priv.clip_norm
                summed = [s + noise_rng.normal(0.0, std, size=s.shape) for s in summed]
            for p, s in zip(params, summed):
                p -= lr * (s / len(idx) + wd * p)
        loss = objective(architecture, params, X, y, wd)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch)
        history.append(loss)
    return params, history


def _fit(data, cfg: TrainConfig, priv: Optional[PrivacyConfig],
         init: Optional[Sequence[np.ndarray]]) -> TargetModel:
    X, y, k = _as_arrays(data)
    if X.shape[0] == 0:
        raise ValueError("dataset is empty")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    d = X.shape[1]
    if init is None:
        init = init_params(cfg.architecture, d, k, cfg.hidden_width, cfg.seed)
    params, history = run_sgd(cfg.architecture, init, X, y, cfg, priv)
    return TargetModel(cfg.architecture, tuple(params), k, d, priv, tuple(history))


def train_plain(data, cfg: TrainConfig = TrainConfig(),
                init: Optional[Sequence[np.ndarray]] = None) -> TargetModel:
    """Non-private mini-batch SGD; batch size is ``ceil(n / batch_divisor)``."""
    return _fit(data, cfg, None, init)


def train_dp_sgd(data, cfg: TrainConfig = TrainConfig(), priv: PrivacyConfig = TIERS["lowdp"],
                 init: Optional[Sequence[np.ndarray]] = None) -> TargetModel:
    """DP-SGD; an unresolved noise multiplier is calibrated for ``epochs * batches`` steps."""
    n = len(data) if isinstance(data, Dataset) else len(data[1])
    priv = priv.resolved(cfg.epochs * cfg.batches_per_epoch(n))
    return _fit(data, cfg, priv, init)


def train_for_tier(data, cfg: TrainConfig, priv: PrivacyConfig) -> TargetModel:
    if priv.is_private:
        return train_dp_sgd(data, cfg, priv)
    return train_plain(data, cfg)


# ---------------------------------------------------------------------------
# queries


def predict_proba(model: TargetModel, records) -> PredictionMatrix:
    """Black-box query: softmax class probabilities for each record."""
    if isinstance(records, Dataset):
        ids, X = records.ids, records.features
    elif isinstance(records, np.ndarray):
        X = np.atleast_2d(records)
        ids = tuple(str(i) for i in range(X.shape[0]))
    else:
        records = list(records)
        if records and isinstance(records[0], Record):
            ids = tuple(r.id for r in records)
            X = np.array([r.features for r in records], dtype=np.float64)
        else:
            X = np.atleast_2d(np.asarray(records, dtype=np.float64))
            ids = tuple(str(i) for i in range(X.shape[0]))
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"feature dimension mismatch: model expects {model.n_features}, "
                         f"got {X.shape[-1] if X.ndim else 0}")
    return PredictionMatrix(ids, softmax(logits(model.architecture, model.params, X)))


def cross_entropy_loss(probs, label: int) -> float:
    """``-ln(max(probs[label], 1e-12))``."""
    return -math.log(max(float(probs[int(label)]), LOSS_FLOOR))


def cross_entropy_losses(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(len(labels)), labels]
    return -np.log(np.maximum(picked, LOSS_FLOOR))


def accuracy(model: TargetModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    pred = predict_proba(model, data).probs.argmax(axis=1)
    return float(np.mean(pred == data.labels))


def split_train_test(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split; the test part has ``round(test_fraction * n)`` records (at least one each side)."""
    n = len(data)
    if n < 2:
        raise ValueError("need at least two records to split")
    n_test = min(n - 1, max(1, int(math.floor(test_fraction * n + 0.5))))
    order = _rng(seed, 0x5917).permutation(n)
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: TargetModel) -> dict:
    return {
        "architecture": model.architecture,
        "n_classes": model.n_classes,
        "n_features": model.n_features,
        "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in model.params],
    }


def model_from_dict(d: dict) -> TargetModel:
    arch = d["architecture"]
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    params = tuple(np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in d["params"])
    expected = 2 if arch == "logistic" else 4
    if len(params) != expected:
        raise ValueError(f"{arch} model needs {expected} parameter arrays, got {len(params)}")
    if params[0].shape[0] != d["n_features"] or params[-1].shape[0] != d["n_classes"]:
        raise ValueError("parameter shapes disagree with n_features/n_classes")
    return TargetModel(arch, params, int(d["n_classes"]), int(d["n_features"]))


def save_model(model: TargetModel, path: str | os.PathLike) -> Path:
    path = Path(path)
    write_text_atomic(path, json.dumps(model_to_dict(model)) + "\n")
    return path


def load_model(path: str | os.PathLike) -> TargetModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
