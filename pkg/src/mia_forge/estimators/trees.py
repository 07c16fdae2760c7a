"""Flat-array CART trees and second-order gradient boosting on the logistic loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

# split scores closer than this are treated as tied
_TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Tree:
    """Binary tree stored as parallel arrays; ``feature == -1`` marks a leaf.

    A sample goes left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name, dtype in (("feature", np.int64), ("threshold", np.float64), ("left", np.int64),
                            ("right", np.int64), ("value", np.float64)):
            a = np.array(getattr(self, name), dtype=dtype, copy=True).reshape(-1)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tree):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("feature", "threshold", "left", "right", "value"))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.nonzero(active)[0]
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"])


class _Builder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def add(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float, left: int, right: int) -> None:
        self.feature[node] = feature
        self.threshold[node] = threshold
        self.left[node] = left
        self.right[node] = right

    def tree(self) -> Tree:
        return Tree(self.feature, self.threshold, self.left, self.right, self.value)


def _pick(scores: np.ndarray, valid: np.ndarray) -> Optional[tuple[int, int]]:
    """Lowest score; near-ties go to the lowest feature column, then lowest threshold."""
    if not valid.any():
        return None
    s = np.where(valid, scores, np.inf)
    best = s.min()
    # column-major order: feature outer, threshold position inner
    hit = np.nonzero((s <= best + _TIE_TOL).T.reshape(-1))[0][0]
    n_pos = scores.shape[0]
    return int(hit % n_pos), int(hit // n_pos)


def _threshold(lo: float, hi: float) -> float:
    mid = 0.5 * (lo + hi)
    return lo if mid >= hi else mid


def _sorted_columns(X: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    cols = X[:, feats]
    order = np.argsort(cols, axis=0, kind="stable")
    return order, np.take_along_axis(cols, order, axis=0)


def build_classification_tree(X: np.ndarray, y: np.ndarray, max_depth: int = 5,
                              min_leaf: int = 1, max_features: Optional[int] = None,
                              rng: Optional[np.random.Generator] = None) -> Tree:
    """CART on binary labels with Gini impurity; leaves store the fraction of ones.

    With ``max_features`` set, each node considers a random subset of that many
    features drawn from ``rng``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n_feat = X.shape[1]
    b = _Builder()

    def grow(idx: np.ndarray, depth: int) -> int:
        ys = y[idx]
        m = len(idx)
        node = b.add(ys.mean())
        pos = ys.sum()
        if depth >= max_depth or m < 2 * min_leaf or pos == 0 or pos == m:
            return node
        if max_features is not None and max_features < n_feat:
            feats = np.sort(rng.choice(n_feat, size=max_features, replace=False))
        else:
            feats = np.arange(n_feat)
        order, xs = _sorted_columns(X[idx], feats)
        cum = np.cumsum(ys[order], axis=0)[:-1]
        n_left = np.arange(1, m)[:, None].astype(np.float64)
        n_right = m - n_left
        p_left = cum / n_left
        p_right = (pos - cum) / n_right
        # weighted child impurity, binary gini = 2p(1-p)
        score = (n_left * 2 * p_left * (1 - p_left) + n_right * 2 * p_right * (1 - p_right)) / m
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        parent = 2 * (pos / m) * (1 - pos / m)
        valid &= score < parent - _TIE_TOL
        hit = _pick(score, valid)
        if hit is None:
            return node
        i, j = hit
        f = int(feats[j])
        thr = _threshold(xs[i, j], xs[i + 1, j])
        go_left = X[idx, f] <= thr
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        b.split(node, f, thr, left, right)
        return node

    if len(y) == 0:
        raise ValueError("cannot grow a tree on zero samples")
    grow(np.arange(len(y)), 0)
    return b.tree()


def build_regression_tree(X: np.ndarray, grad: np.ndarray, hess: np.ndarray, max_depth: int = 3,
                          reg_lambda: float = 1.0, min_child_weight: float = 1e-6,
                          min_leaf: int = 1) -> Tree:
    """Second-order boosting tree: gain ``G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)``.

    Leaves store the Newton step ``-G / (H + lambda)``.
    """
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    h = np.asarray(hess, dtype=np.float64)
    b = _Builder()
    feats = np.arange(X.shape[1])

    def grow(idx: np.ndarray, depth: int) -> int:
        G, H = g[idx].sum(), h[idx].sum()
        node = b.add(-G / (H + reg_lambda))
        m = len(idx)
        if depth >= max_depth or m < 2 * min_leaf:
            return node
        order, xs = _sorted_columns(X[idx], feats)
        GL = np.cumsum(g[idx][order], axis=0)[:-1]
        HL = np.cumsum(h[idx][order], axis=0)[:-1]
        GR, HR = G - GL, H - HL
        gain = GL ** 2 / (HL + reg_lambda) + GR ** 2 / (HR + reg_lambda) - G ** 2 / (H + reg_lambda)
        n_left = np.arange(1, m)[:, None]
        valid = ((xs[:-1] < xs[1:]) & (HL >= min_child_weight) & (HR >= min_child_weight)
                 & (n_left >= min_leaf) & (m - n_left >= min_leaf) & (gain > _TIE_TOL))
        hit = _pick(-gain, valid)
        if hit is None:
            return node
        i, j = hit
        f = int(feats[j])
        thr = _threshold(xs[i, j], xs[i + 1, j])
        go_left = X[idx, f] <= thr
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        b.split(node, f, thr, left, right)
        return node

    if len(g) == 0:
        raise ValueError("cannot grow a tree on zero samples")
    grow(np.arange(len(g)), 0)
    return b.tree()


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True, eq=False)
class BoostedTrees:
    """Additive logistic model: ``margin(x) = base_margin + sum_t shrinkage_t * tree_t(x)``.

    Instances are immutable; :meth:`continue_fit` returns a new ensemble that
    shares the existing trees.
    """

    base_margin: float
    trees: tuple[Tree, ...] = ()
    shrinkages: tuple[float, ...] = ()
    max_depth: int = 3
    reg_lambda: float = 1.0
    min_child_weight: float = 1e-6

    def __eq__(self, other) -> bool:
        if not isinstance(other, BoostedTrees):
            return NotImplemented
        return (self.base_margin == other.base_margin and self.shrinkages == other.shrinkages
                and self.trees == other.trees)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, n_rounds: int = 100, max_depth: int = 3,
            shrinkage: float = 0.1, reg_lambda: float = 1.0,
            min_child_weight: float = 1e-6) -> "BoostedTrees":
        y = np.asarray(y, dtype=np.float64)
        rate = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        start = cls(float(np.log(rate / (1 - rate))), max_depth=max_depth, reg_lambda=reg_lambda,
                    min_child_weight=min_child_weight)
        return start.continue_fit(X, y, n_rounds, shrinkage)

    def continue_fit(self, X: np.ndarray, y: np.ndarray, n_rounds: int,
                     shrinkage: float) -> "BoostedTrees":
        """Append ``n_rounds`` trees fitted to the logistic gradients at the current margins."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        margin = self.margin(X)
        trees, rates = list(self.trees), list(self.shrinkages)
        for _ in range(n_rounds):
            p = sigmoid(margin)
            tree = build_regression_tree(X, p - y, p * (1 - p), self.max_depth, self.reg_lambda,
                                         self.min_child_weight)
            margin = margin + shrinkage * tree.predict(X)
            trees.append(tree)
            rates.append(float(shrinkage))
        return BoostedTrees(self.base_margin, tuple(trees), tuple(rates), self.max_depth,
                            self.reg_lambda, self.min_child_weight)

    def margin(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(X.shape[0], self.base_margin)
        for tree, rate in zip(self.trees, self.shrinkages):
            out = out + rate * tree.predict(X)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.margin(X))

    def to_dict(self) -> dict:
        return {
            "base_margin": self.base_margin,
            "max_depth": self.max_depth,
            "reg_lambda": self.reg_lambda,
            "min_child_weight": self.min_child_weight,
            "shrinkages": list(self.shrinkages),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedTrees":
        return cls(float(d["base_margin"]), tuple(Tree.from_dict(t) for t in d["trees"]),
                   tuple(float(s) for s in d["shrinkages"]), int(d["max_depth"]),
                   float(d["reg_lambda"]), float(d.get("min_child_weight", 1e-6)))
