"""Attack metrics: challenge accuracy, step-function ROC, TPR at a fixed FPR, folds, z-tests."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Mapping, Optional, Sequence

import jsonschema
import numpy as np

from .baselines import normal_sf
from .data import format_float, write_text_atomic


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# challenge accuracy


def challenge_accuracy(decisions, ground_truth) -> float:
    """Exact-match rate of assignments (client index or ``None``) against the truth.

    Both arguments may be mappings ``record_id -> assignment`` or sequences of
    objects with ``record_id`` and ``assignment``/``member_of`` attributes.
    """
    pred = _as_map(decisions, "assignment")
    truth = _as_map(ground_truth, "member_of")
    if set(pred) != set(truth):
        extra = sorted(set(pred) - set(truth))
        missing = sorted(set(truth) - set(pred))
        raise EvaluationError(f"decision ids do not match ground truth "
                              f"(missing: {missing[:5]}, unexpected: {extra[:5]})")
    if not truth:
        raise EvaluationError("no records to evaluate")
    return sum(pred[r] == truth[r] for r in truth) / len(truth)


def _as_map(items, attr: str) -> dict:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for it in items:
        rid = it.record_id
        if rid in out:
            raise EvaluationError(f"duplicate record id {rid}")
        out[rid] = getattr(it, attr)
    return out


def random_floor(ground_truth, n_clients: int, colluding_client: Optional[int] = None) -> float:
    """Expected accuracy of uniform guessing over the labels still open to the attacker.

    The colluding client's challenge members are known and count as correct;
    every other record is guessed uniformly over the other clients plus
    "non-member".
    """
    truth = _as_map(ground_truth, "member_of")
    n = len(truth)
    leaked = sum(1 for m in truth.values() if colluding_client is not None and m == colluding_client)
    labels = n_clients if colluding_client is not None else n_clients + 1
    return (leaked + (n - leaked) / labels) / n


# ---------------------------------------------------------------------------
# ROC


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    tpr: float
    fpr: float


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise EvaluationError("scores and labels differ in length")
    if not y.any() or y.all():
        raise EvaluationError("need at least one positive and one negative")
    if np.isnan(s).any():
        raise EvaluationError("scores contain NaN")
    return s, y


def roc_points(scores, labels) -> list[RocPoint]:
    """Step ROC: one point per distinct score (predict member when ``score >= threshold``).

    The first point has threshold ``+inf`` (nothing flagged).
    """
    s, y = _check_binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every run of equal scores: ties are admitted all together
    last = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    pts = [RocPoint(math.inf, 0.0, 0.0)]
    pts += [RocPoint(float(s[i]), tp[i] / n_pos, fp[i] / n_neg) for i in last]
    return pts


def tpr_at_fpr(scores, labels, fpr_budget: float) -> float:
    """Largest TPR over thresholds whose FPR is at most ``fpr_budget`` (no interpolation)."""
    pts = roc_points(scores, labels)
    return max(p.tpr for p in pts if p.fpr <= fpr_budget + 1e-12)


def smallest_nonzero_fpr(scores, labels) -> float:
    return min(p.fpr for p in roc_points(scores, labels) if p.fpr > 0)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    s, y = _check_binary(scores, labels)
    pos, neg = s[y], s[~y]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def roc_to_csv(points: Sequence[RocPoint]) -> str:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{format_float(p.threshold)},{format_float(p.fpr)},{format_float(p.tpr)}" for p in points]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[int, ...]
    stratified: bool = True
    seed: int = 0

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        f = np.asarray(self.folds)
        return np.nonzero(f != fold)[0], np.nonzero(f == fold)[0]


def make_fold_plan(labels, k: int = 5, seed: int = 0, stratified: bool = True) -> FoldPlan:
    """Seeded fold assignment; records are dealt round-robin class by class."""
    y = np.asarray(labels).reshape(-1)
    n = len(y)
    if not 2 <= k <= n:
        raise EvaluationError(f"k must lie in [2, {n}], got {k}")
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    groups = [np.nonzero(y == v)[0] for v in np.unique(y)] if stratified else [np.arange(n)]
    slot = 0
    for idx in groups:
        for i in rng.permutation(idx):
            folds[i] = slot % k
            slot += 1
    return FoldPlan(k, tuple(int(f) for f in folds), stratified, seed)


def oof_scores(fit_score: Callable[[np.ndarray, np.ndarray], Callable[[np.ndarray], np.ndarray]],
               X, y, plan: FoldPlan) -> np.ndarray:
    """Out-of-fold scores: each record is scored by a model trained without its fold.

    ``fit_score(X_train, y_train)`` must return a scorer ``X -> scores``.
    """
    X = np.asarray(X)
    y = np.asarray(y).reshape(-1)
    if len(plan.folds) != len(y):
        raise EvaluationError("fold plan does not cover the records")
    out = np.full(len(y), np.nan)
    for fold in range(plan.k):
        tr, te = plan.train_test(fold)
        if len(te) == 0:
            continue
        if len(np.unique(y[tr])) < 2:
            raise EvaluationError(f"fold {fold}: training split has a single class; use a smaller k")
        scorer = fit_score(X[tr], y[tr])
        out[te] = np.asarray(scorer(X[te]), dtype=np.float64).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# two-proportion z-test


def two_proportion_z(p1: float, p2: float, n1: int, n2: int) -> tuple[float, float]:
    """Pooled two-proportion z statistic and two-sided p-value.

    Proportions are snapped to the nearest achievable count ``round(p * n)``.
    """
    if n1 <= 0 or n2 <= 0:
        raise EvaluationError("sample sizes must be positive")
    for p in (p1, p2):
        if not 0 <= p <= 1:
            raise EvaluationError("proportions must lie in [0, 1]")
    x1 = math.floor(p1 * n1 + 0.5)
    x2 = math.floor(p2 * n2 + 0.5)
    if abs(x1 - p1 * n1) > 0.51 or abs(x2 - p2 * n2) > 0.51:
        raise EvaluationError("proportions are not consistent with integer counts")
    pooled = (x1 + x2) / (n1 + n2)
    if pooled in (0.0, 1.0):
        raise EvaluationError("pooled proportion is 0 or 1; the z statistic is undefined")
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (x1 / n1 - x2 / n2) / se
    return z, 2 * normal_sf(abs(z))


# ---------------------------------------------------------------------------
# report


class ReportSchemaError(ValueError):
    pass


def report_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("report_schema.json").read_text())


def validate_report(report: Mapping) -> None:
    """Raise :class:`ReportSchemaError` naming the offending field."""
    validator = jsonschema.Draft202012Validator(report_schema())
    errors = sorted(validator.iter_errors(report), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ReportSchemaError(f"{where}: {err.message}")


def report_to_json(report: Mapping) -> str:
    """Canonical serialisation: sorted keys, fixed indentation, no NaN."""
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(report: Mapping, path) -> None:
    """Validate, then write atomically."""
    validate_report(report)
    write_text_atomic(path, report_to_json(report))
