"""Stacking membership-inference attack.

Pipeline, per target client ``c``:

1. fit the seven base estimators on ``relevant_c`` (label 1, noisy) versus
   ``external_c`` (label 0);
2. turn every queried record into an 8-dimensional meta-feature vector: the
   seven membership scores plus the target's cross-entropy loss;
3. train one boosted-tree meta-model on the colluding client's leaked truth;
4. adapt it to each other client by continuing boosting on that client's
   external records, all labelled non-member;
5. assign every challenge record with the two-condition rule in
   :func:`decide_scores`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from ._parallel import ordered_map
from .data import AttackPools, Dataset, PredictionMatrix, ScenarioBundle
from .estimators import KIND_ORDER, BoostedTrees, FittedEstimator, fit_all
from .estimators.models import HYPERPARAMETERS
from .targets import TargetModel, cross_entropy_loss, cross_entropy_losses, predict_proba

META_FIELDS = ("p_nn", "p_rf", "p_dt", "p_gb", "p_knn", "p_svm", "p_lr", "l_ce")

Target = Union[TargetModel, PredictionMatrix]


class AttackStageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class MetaTrainingError(ValueError):
    pass


@dataclass(frozen=True)
class MetaFeatureVector:
    p_nn: float
    p_rf: float
    p_dt: float
    p_gb: float
    p_knn: float
    p_svm: float
    p_lr: float
    l_ce: float

    def __post_init__(self):
        for name in META_FIELDS:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"meta-feature {name} is not finite")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in META_FIELDS])

    @classmethod
    def from_array(cls, a) -> "MetaFeatureVector":
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape[0] != len(META_FIELDS):
            raise ValueError(f"meta-feature vectors have {len(META_FIELDS)} entries, got {a.shape[0]}")
        return cls(*(float(v) for v in a))

    def __len__(self) -> int:
        return len(META_FIELDS)


@dataclass(frozen=True)
class MetaHyper:
    n_rounds: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    adapt_rounds: int = 20
    adapt_shrinkage: float = 0.05


@dataclass(frozen=True)
class DecisionRuleConfig:
    percentile: float = 55.0
    lam: float = 1.5

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must lie in (0, 100)")
        if not self.lam >= 1:
            raise ValueError("lambda must be >= 1")


@dataclass(frozen=True, eq=False)
class MetaModel:
    ensemble: BoostedTrees
    client: Optional[int] = None
    adapted_rounds: int = 0

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(META_FIELDS):
            raise ValueError(f"meta-model expects {len(META_FIELDS)} features, got {X.shape[1]}")
        return self.ensemble.predict_proba(X)

    @property
    def n_trees(self) -> int:
        return self.ensemble.n_trees


@dataclass(frozen=True)
class AttackDecision:
    record_id: str
    clients: tuple[int, ...]
    probabilities: tuple[float, ...]
    assignment: Optional[int]
    column_ok: bool
    row_ok: bool

    @property
    def is_member(self) -> bool:
        return self.assignment is not None


# ---------------------------------------------------------------------------
# features


def attack_inputs(probs: np.ndarray, labels: np.ndarray, n_classes: Optional[int] = None) -> np.ndarray:
    """Target probabilities concatenated with the one-hot task label."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    k = probs.shape[1] if n_classes is None else n_classes
    return np.hstack([probs, np.eye(k)[labels]])


def query(target: Target, ds: Dataset) -> np.ndarray:
    if isinstance(target, TargetModel):
        return predict_proba(target, ds).probs
    if isinstance(target, PredictionMatrix):
        return target.rows_for(ds.ids)
    raise TypeError(f"unsupported target type {type(target).__name__}")


def meta_feature_matrix(probs: np.ndarray, labels: np.ndarray,
                        estimators: Mapping) -> np.ndarray:
    """Rows of ``[p_NN, p_RF, p_DT, p_GB, p_KNN, p_SVM, p_LR, L_CE]``."""
    X = attack_inputs(probs, labels)
    cols = [estimators[kind].score_many(X) for kind in KIND_ORDER]
    cols.append(cross_entropy_losses(probs, labels))
    return np.column_stack(cols)


def extract_meta_features(target, estimators: Mapping, record, task_label: int) -> MetaFeatureVector:
    """Meta-features of one record.

    ``target`` is a :class:`TargetModel`, a :class:`PredictionMatrix` (then
    ``record`` is a record id or has an ``id``), or any callable returning the
    probability vector for ``record``.
    """
    if isinstance(target, TargetModel):
        feats = getattr(record, "features", record)
        probs = predict_proba(target, np.asarray(feats, dtype=np.float64)[None, :]).probs[0]
    elif isinstance(target, PredictionMatrix):
        rid = getattr(record, "id", record)
        probs = target.rows_for([rid])[0]
    else:
        probs = np.asarray(target(record), dtype=np.float64)
    x = attack_inputs(probs[None, :], [task_label])
    scores = [float(estimators[kind].score_many(x)[0]) for kind in KIND_ORDER]
    return MetaFeatureVector(*scores, cross_entropy_loss(probs, task_label))


# ---------------------------------------------------------------------------
# meta-model


def build_meta_dataset(pools: AttackPools | ScenarioBundle, colluding_client: int,
                       features: Mapping[str, np.ndarray | MetaFeatureVector]
                       ) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Labelled meta-training set from the colluding client's leaked truth.

    ``features`` maps record ids (under the colluding client's target) to
    meta-feature vectors. Labels: 1 for the colluding client's known members
    among its relevant and challenge records; 0 for its other relevant and
    challenge records and for all of its external records.
    """
    if isinstance(pools, ScenarioBundle):
        pools = pools.attacker_view()
    if pools.colluding_client != colluding_client:
        raise MetaTrainingError(
            f"pools leak truth for client {pools.colluding_client}, not {colluding_client}")
    if not pools.leaked_members:
        raise MetaTrainingError(
            f"no known members for colluding client {colluding_client}; meta-training impossible")
    c = colluding_client
    ids = list(pools.relevant[c].ids) + list(pools.challenge.ids) + list(pools.external[c].ids)
    missing = [r for r in ids if r not in features]
    if missing:
        raise MetaTrainingError(f"meta-features missing for ids: {', '.join(missing[:10])}"
                                + (" ..." if len(missing) > 10 else ""))
    y = np.array([1 if r in pools.leaked_members else 0 for r in ids], dtype=np.int64)
    X = np.array([np.asarray(features[r].as_array() if isinstance(features[r], MetaFeatureVector)
                             else features[r], dtype=np.float64) for r in ids])
    return X, y, ids


def fit_meta(X_meta, y, hyper: MetaHyper = MetaHyper()) -> MetaModel:
    X = np.atleast_2d(np.asarray(X_meta, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[1] != len(META_FIELDS):
        raise MetaTrainingError(f"meta-features must have {len(META_FIELDS)} columns")
    if y.size == 0 or y.min() == y.max():
        raise MetaTrainingError("meta-training needs both members and non-members")
    ens = BoostedTrees.fit(X, y, hyper.n_rounds, hyper.max_depth, hyper.shrinkage, hyper.reg_lambda,
                           hyper.min_child_weight)
    return MetaModel(ens)


def adapt_to_client(base: MetaModel, external_features, rounds: int = 20,
                    shrinkage: float = 0.05, client: Optional[int] = None) -> MetaModel:
    """Continue boosting on a client's external records, all labelled non-member.

    Returns a new model; ``base`` is left untouched.
    """
    X = np.array([f.as_array() if isinstance(f, MetaFeatureVector) else np.asarray(f, dtype=np.float64)
                  for f in external_features])
    if X.size == 0:
        raise MetaTrainingError("adaptation needs at least one external record")
    ens = base.ensemble.continue_fit(X, np.zeros(len(X)), rounds, shrinkage)
    return MetaModel(ens, client, base.adapted_rounds + rounds)


# ---------------------------------------------------------------------------
# decision rule


def percentile(values, p: float) -> float:
    """Linear-interpolation percentile at rank ``p / 100 * (n - 1)`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("percentile of an empty sequence")
    rank = p / 100.0 * (v.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (rank - lo) * (v[hi] - v[lo]))


def decide_scores(record_ids: Sequence[str], scores: np.ndarray, clients: Sequence[int],
                  rule: DecisionRuleConfig = DecisionRuleConfig()
                  ) -> tuple[list[AttackDecision], dict[int, float]]:
    """Apply the column/row rule to an ``(n_records, n_clients)`` score matrix.

    Column: ``P(X, c) > thr_c`` with ``thr_c`` the rule percentile of column
    ``c``. Row: ``P(X, c) > lam * mean_c' P(X, c')``. A record goes to
    ``argmax_c P(X, c)`` (lowest index on ties) only when both hold for it.
    """
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    clients = list(clients)
    if len(clients) < 2:
        raise ValueError("the decision rule needs at least two target clients")
    if S.shape != (len(record_ids), len(clients)):
        raise ValueError(f"score matrix shape {S.shape} does not match "
                         f"{len(record_ids)} records x {len(clients)} clients")
    thresholds = {c: percentile(S[:, j], rule.percentile) for j, c in enumerate(clients)}
    thr = np.array([thresholds[c] for c in clients])
    best = np.argmax(S, axis=1)  # first maximum = lowest client index
    top = S[np.arange(len(S)), best]
    column = top > thr[best]
    # exactly rounded row means, so boundary cases do not depend on summation order
    means = np.array([math.fsum(r) for r in S.tolist()]) / S.shape[1]
    row = top > rule.lam * means
    out = []
    for i, rid in enumerate(record_ids):
        ok = bool(column[i] and row[i])
        out.append(AttackDecision(rid, tuple(clients), tuple(float(v) for v in S[i]),
                                  clients[best[i]] if ok else None,
                                  bool(column[i]), bool(row[i])))
    return out, thresholds


def decide(challenge_features: Mapping[int, Mapping[str, MetaFeatureVector | np.ndarray]],
           adapted: Mapping[int, MetaModel], rule: DecisionRuleConfig = DecisionRuleConfig()
           ) -> tuple[list[AttackDecision], dict[int, float]]:
    """Score every challenge record under each client's adapted model, then apply the rule."""
    clients = sorted(adapted)
    if set(challenge_features) != set(clients):
        raise ValueError("challenge features and adapted models cover different clients")
    ids = list(challenge_features[clients[0]])
    cols = []
    for c in clients:
        feats = challenge_features[c]
        if list(feats) != ids:
            raise ValueError(f"client {c} scored a different set of challenge records")
        X = np.array([f.as_array() if isinstance(f, MetaFeatureVector) else f for f in feats.values()])
        cols.append(adapted[c].predict_proba(X))
    return decide_scores(ids, np.column_stack(cols), clients, rule)


# ---------------------------------------------------------------------------
# end to end


@dataclass
class ClientView:
    client: int
    estimators: dict
    relevant: np.ndarray
    external: np.ndarray
    challenge: np.ndarray
    challenge_probs: np.ndarray
    external_probs: np.ndarray
    relevant_probs: np.ndarray


@dataclass
class AttackResult:
    decisions: list[AttackDecision]
    thresholds: dict[int, float]
    provenance: dict
    meta_model: MetaModel
    adapted: dict[int, MetaModel]
    meta_X: np.ndarray
    meta_y: np.ndarray
    meta_ids: list[str]
    views: dict[int, ClientView] = field(repr=False, default_factory=dict)

    def assignments(self) -> dict[str, Optional[int]]:
        return {d.record_id: d.assignment for d in self.decisions}


def client_view(pools: AttackPools, client: int, target: Target, seed: int) -> ClientView:
    rel, ext, chal = pools.relevant[client], pools.external[client], pools.challenge
    try:
        p_rel, p_ext, p_chal = query(target, rel), query(target, ext), query(target, chal)
    except KeyError as exc:
        raise AttackStageError("query", KeyError(f"client {client}: {exc.args[0]}")) from exc
    try:
        X = np.vstack([attack_inputs(p_rel, rel.labels, rel.n_classes),
                       attack_inputs(p_ext, ext.labels, ext.n_classes)])
        y = np.concatenate([np.ones(len(rel)), np.zeros(len(ext))])
        estimators = fit_all(X, y, seed)
    except Exception as exc:
        raise AttackStageError("estimators", exc) from exc
    try:
        return ClientView(
            client, estimators,
            meta_feature_matrix(p_rel, rel.labels, estimators),
            meta_feature_matrix(p_ext, ext.labels, estimators),
            meta_feature_matrix(p_chal, chal.labels, estimators),
            p_chal, p_ext, p_rel,
        )
    except Exception as exc:
        raise AttackStageError("features", exc) from exc


def client_seed(seed: int, client: int) -> int:
    return seed + 100 * client


def run_attack(pools: AttackPools | ScenarioBundle, targets: Mapping[int, Target],
               rule: DecisionRuleConfig = DecisionRuleConfig(), hyper: MetaHyper = MetaHyper(),
               seed: int = 0) -> AttackResult:
    """Full pipeline; the colluding client's known challenge members are assigned directly."""
    if isinstance(pools, ScenarioBundle):
        pools = pools.attacker_view()
    col = pools.colluding_client
    needed = list(range(pools.n_clients))
    missing = [c for c in needed if c not in targets]
    if missing:
        raise AttackStageError("query", KeyError(f"no target for clients {missing}"))

    views = ordered_map(lambda c: client_view(pools, c, targets[c], client_seed(seed, c)), needed)
    views = {v.client: v for v in views}

    cv = views[col]
    feats = {}
    for ds, M in ((pools.relevant[col], cv.relevant), (pools.challenge, cv.challenge),
                  (pools.external[col], cv.external)):
        feats.update(zip(ds.ids, M))
    try:
        meta_X, meta_y, meta_ids = build_meta_dataset(pools, col, feats)
        meta = fit_meta(meta_X, meta_y, hyper)
    except Exception as exc:
        raise AttackStageError("meta", exc) from exc

    target_clients = pools.target_clients
    try:
        adapted = {c: adapt_to_client(meta, views[c].external, hyper.adapt_rounds,
                                      hyper.adapt_shrinkage, client=c) for c in target_clients}
    except Exception as exc:
        raise AttackStageError("adapt", exc) from exc

    chal_ids = pools.challenge.ids
    infer = [i for i, r in enumerate(chal_ids) if r not in pools.leaked_members]
    try:
        scores = np.column_stack([adapted[c].predict_proba(views[c].challenge[infer])
                                  for c in target_clients])
        inferred, thresholds = decide_scores([chal_ids[i] for i in infer], scores,
                                             target_clients, rule)
    except Exception as exc:
        raise AttackStageError("decide", exc) from exc

    by_id = {d.record_id: d for d in inferred}
    decisions = []
    for r in chal_ids:
        if r in by_id:
            decisions.append(by_id[r])
        else:
            decisions.append(AttackDecision(r, tuple(target_clients),
                                            tuple(math.nan for _ in target_clients), col, True, True))

    provenance = {
        "seed": seed,
        "client_seeds": {str(c): client_seed(seed, c) for c in needed},
        "colluding_client": col,
        "target_clients": target_clients,
        "rule": asdict(rule),
        "meta": asdict(hyper),
        "estimators": {k.value: HYPERPARAMETERS[k.value] for k in KIND_ORDER},
        "thresholds": {str(c): thresholds[c] for c in target_clients},
        "meta_training": {"records": int(len(meta_y)), "members": int(meta_y.sum())},
        "leaked_challenge_members": len(chal_ids) - len(infer),
    }
    return AttackResult(decisions, thresholds, provenance, meta, adapted, meta_X, meta_y,
                        meta_ids, views)
