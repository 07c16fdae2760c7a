"""End-to-end runs: scenario, per-tier targets, attacks, metrics, FL curves and the report.

Every stage draws its seed from the master seed plus a fixed offset, so one
integer pins down every output byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import __version__
from .accountant import epsilon_for
from .baselines import (ExternalProfile, GaussianLossModel, assign_by_score, lira_scores,
                        loss_threshold, profile_heuristic)
from .data import (AttackPools, Dataset, LabeledMembership, PredictionMatrix, ScenarioBundle,
                   ScenarioConfig, ScenarioConfigError, export_dataset, export_prediction_matrix,
                   format_float, generate_scenario, load_dataset, load_memberships,
                   load_prediction_matrix, memberships_to_csv, write_text_atomic)
from .evaluation import (EvaluationError, challenge_accuracy, emit_report, make_fold_plan,
                         oof_scores, random_floor, roc_auc, roc_points, roc_to_csv, tpr_at_fpr,
                         two_proportion_z)
from .fl import FlConfig, export_curves, federate
from .stacking import (AttackResult, DecisionRuleConfig, MetaHyper, fit_meta, query, run_attack)
from .targets import TIERS, PrivacyConfig, TargetModel, TrainConfig, accuracy, train_for_tier

SEED_OFFSETS = {"scenario": 1, "targets": 2, "attack": 3, "fl": 4, "folds": 5}
ATTACKS = ("stacking", "profile", "lira", "loss_threshold")
# attacks with a continuous membership score on the colluding client
SCORED_ATTACKS = ("stacking", "lira", "loss_threshold")
PRESETS = {
    "default": ScenarioConfig(),
    # wide inputs make the non-private targets memorise their training sets
    "overfit": ScenarioConfig(n_features=512, class_separation=4.0),
}


class ConfigError(ValueError):
    pass


def stage_seed(master: int, stage: str) -> int:
    return master + SEED_OFFSETS[stage]


def client_label(c: int) -> str:
    """Client names in output files are 1-based: index 0 is ``c1``."""
    return f"c{c + 1}"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tiers: tuple[str, ...] = ("nodp", "lowdp", "highdp")
    rule: DecisionRuleConfig = field(default_factory=DecisionRuleConfig)
    folds: int = 5
    fl_epochs: tuple[int, ...] = (1, 5, 20)
    fl_rounds: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tiers", tuple(self.tiers))
        object.__setattr__(self, "fl_epochs", tuple(int(e) for e in self.fl_epochs))
        if not self.tiers:
            raise ConfigError("tiers: at least one tier is required")
        unknown = [t for t in self.tiers if t not in TIERS]
        if unknown:
            raise ConfigError(f"tiers: unknown tier {unknown[0]!r} (choose from {', '.join(TIERS)})")
        if len(set(self.tiers)) != len(self.tiers):
            raise ConfigError("tiers: duplicates are not allowed")
        if self.folds < 2:
            raise ConfigError("folds: must be >= 2")
        if self.fl_rounds < 1:
            raise ConfigError("fl_rounds: must be >= 1")
        if any(e < 1 for e in self.fl_epochs):
            raise ConfigError("fl_epochs: every entry must be >= 1")

    @property
    def seeds(self) -> dict[str, int]:
        return {"master": self.seed, **{k: stage_seed(self.seed, k) for k in SEED_OFFSETS}}

    def scenario_config(self) -> ScenarioConfig:
        """The scenario with its seed derived from the master seed."""
        return replace(self.scenario, seed=stage_seed(self.seed, "scenario"))

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "train": asdict(self.train),
            "tiers": list(self.tiers),
            "rule": {"percentile": self.rule.percentile, "lambda": self.rule.lam},
            "folds": self.folds,
            "fl_epochs": list(self.fl_epochs),
            "fl_rounds": self.fl_rounds,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {"scenario", "preset", "train", "tiers", "rule", "folds", "fl_epochs",
                 "fl_rounds", "seed"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        kw = {}
        base = PRESETS["default"]
        if "preset" in d:
            if d["preset"] not in PRESETS:
                raise ConfigError(f"preset: unknown preset {d['preset']!r}")
            base = PRESETS[d["preset"]]
        try:
            kw["scenario"] = ScenarioConfig.from_dict({**base.to_dict(), **d.get("scenario", {})})
        except ScenarioConfigError as exc:
            raise ConfigError(f"scenario.{exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"scenario: {exc}") from exc
        if "train" in d:
            bad = sorted(set(d["train"]) - set(TrainConfig.__dataclass_fields__))
            if bad:
                raise ConfigError(f"train.{bad[0]}: unknown field")
            try:
                kw["train"] = TrainConfig(**d["train"])
            except ValueError as exc:
                raise ConfigError(f"train: {exc}") from exc
        if "rule" in d:
            bad = sorted(set(d["rule"]) - {"percentile", "lambda"})
            if bad:
                raise ConfigError(f"rule.{bad[0]}: unknown field")
            try:
                kw["rule"] = DecisionRuleConfig(float(d["rule"].get("percentile", 55.0)),
                                                float(d["rule"].get("lambda", 1.5)))
            except ValueError as exc:
                raise ConfigError(f"rule: {exc}") from exc
        for k in ("tiers", "fl_epochs"):
            if k in d:
                if not isinstance(d[k], (list, tuple)):
                    raise ConfigError(f"{k}: must be a list")
                kw[k] = tuple(d[k])
        for k in ("folds", "fl_rounds", "seed"):
            if k in d:
                if isinstance(d[k], bool) or not isinstance(d[k], int):
                    raise ConfigError(f"{k}: must be an integer")
                kw[k] = d[k]
        return cls(**kw)


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# scenario files


def write_scenario(bundle: ScenarioBundle, out: Path) -> dict[str, list[int]]:
    """Attacker-visible pools under ``pools/``, hidden truth under ``hidden/``."""
    out = Path(out)
    pools = bundle.attacker_view()
    C = bundle.n_clients
    for c in range(C):
        export_dataset(pools.relevant[c], out / "pools" / f"relevant_{client_label(c)}.csv")
        export_dataset(pools.external[c], out / "pools" / f"external_{client_label(c)}.csv")
        export_dataset(bundle.train[c], out / "hidden" / f"train_{client_label(c)}.csv")
    export_dataset(pools.challenge, out / "pools" / "challenge.csv")
    col = bundle.colluding_client
    known = [LabeledMembership(r, col if r in pools.leaked_members else None)
             for r in bundle.relevant[col].ids]
    known += [LabeledMembership(r, col) for r in pools.challenge.ids if r in pools.leaked_members]
    write_text_atomic(out / "pools" / "leaked_memberships.csv", memberships_to_csv(known))
    write_text_atomic(out / "hidden" / "ground_truth.csv", memberships_to_csv(bundle.ground_truth))
    manifest = {"n_clients": C, "n_classes": bundle.config.n_classes,
                "n_features": bundle.config.n_features, "colluding_client": col}
    write_text_atomic(out / "pools" / "manifest.json", _dumps(manifest))
    return {
        "train": [len(d) for d in bundle.train],
        "relevant": [len(d) for d in bundle.relevant],
        "external": [len(d) for d in bundle.external],
        "challenge": [len(bundle.challenge)],
    }


def load_pools(pools_dir) -> AttackPools:
    """Read the attacker-visible files written by :func:`write_scenario`."""
    pools_dir = Path(pools_dir)

    def need(name: str) -> Path:
        p = pools_dir / name
        if not p.is_file():
            raise FileNotFoundError(f"missing pool file: {p}")
        return p

    manifest = json.loads(need("manifest.json").read_text())
    C, K = int(manifest["n_clients"]), int(manifest["n_classes"])

    def read(name: str) -> Dataset:
        return load_dataset(need(name), n_classes=K)[0].without_membership()

    rel = tuple(read(f"relevant_{client_label(c)}.csv") for c in range(C))
    ext = tuple(read(f"external_{client_label(c)}.csv") for c in range(C))
    chal = read("challenge.csv")
    col = int(manifest["colluding_client"])
    leaked = frozenset(m.record_id for m in load_memberships(need("leaked_memberships.csv"))
                       if m.member_of == col)
    return AttackPools(rel, ext, chal, col, leaked)


def predictions_for(pools: AttackPools, targets: Mapping[int, TargetModel]) -> dict[int, PredictionMatrix]:
    """Each client's target queried on its own relevant and external pools plus the challenge pool."""
    out = {}
    for c in range(pools.n_clients):
        ds = Dataset.concat([pools.relevant[c], pools.external[c], pools.challenge])
        out[c] = PredictionMatrix(ds.ids, query(targets[c], ds))
    return out


def load_predictions(pred_dir, n_clients: int) -> dict[int, PredictionMatrix]:
    out = {}
    for c in range(n_clients):
        p = Path(pred_dir) / f"client_{client_label(c)}.csv"
        if not p.is_file():
            raise FileNotFoundError(f"missing prediction file: {p}")
        out[c] = load_prediction_matrix(p)
    return out


# ---------------------------------------------------------------------------
# attacks


@dataclass
class BaselineOutcome:
    name: str
    assignments: dict[str, Optional[int]]
    scores: np.ndarray
    flags: np.ndarray


def baseline_outcomes(pools: AttackPools, result: AttackResult) -> dict[str, BaselineOutcome]:
    """Profile heuristic, OUT-only LiRA and the loss threshold on the challenge pool.

    Like stacking, they only decide records whose membership did not leak.
    """
    clients = pools.target_clients
    ids = pools.challenge.ids
    infer = [i for i, r in enumerate(ids) if r not in pools.leaked_members]
    views = result.views
    ch_loss = {c: views[c].challenge[infer, 7] for c in clients}
    ch_conf = {c: views[c].challenge_probs[infer].max(axis=1) for c in clients}

    profiles = {c: ExternalProfile.fit(views[c].external[:, 7], views[c].external_probs) for c in clients}
    prof = profile_heuristic(profiles, {c: list(zip(ch_loss[c], ch_conf[c])) for c in clients})
    conf = np.column_stack([ch_conf[c] for c in clients])
    prof_flags = np.column_stack([(ch_loss[c] < profiles[c].mean_loss) & (ch_conf[c] > profiles[c].mean_confidence)
                                  for c in clients])

    lira = np.column_stack([lira_scores(GaussianLossModel.fit(views[c].external[:, 7]), ch_loss[c])
                            for c in clients])
    lira_flags = lira > 0.5

    taus = {c: float(views[c].external[:, 7].mean()) for c in clients}
    margin = np.column_stack([taus[c] - ch_loss[c] for c in clients])
    loss_flags = np.column_stack([loss_threshold(ch_loss[c], taus[c]) for c in clients])

    def full(assign: Sequence[Optional[int]]) -> dict[str, Optional[int]]:
        out = {r: pools.colluding_client for r in ids if r in pools.leaked_members}
        out.update({ids[i]: a for i, a in zip(infer, assign)})
        return {r: out[r] for r in ids}

    return {
        "profile": BaselineOutcome("profile", full(prof), conf, prof_flags),
        "lira": BaselineOutcome("lira", full(assign_by_score(lira, lira_flags, clients)), lira, lira_flags),
        "loss_threshold": BaselineOutcome("loss_threshold", full(assign_by_score(margin, loss_flags, clients)),
                                          margin, loss_flags),
    }


def colluding_scores(result: AttackResult, pools: AttackPools, k: int, seed: int,
                     hyper: MetaHyper = MetaHyper()) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Membership scores on the colluding client's labelled records.

    Stacking scores are out-of-fold meta-model probabilities; LiRA and the
    loss threshold need no training on these labels.
    """
    X, y = result.meta_X, result.meta_y
    plan = make_fold_plan(y, k, seed)
    stack = oof_scores(lambda a, b: fit_meta(a, b, hyper).predict_proba, X, y, plan)
    out_model = GaussianLossModel.fit(result.views[pools.colluding_client].external[:, 7])
    return {
        "stacking": stack,
        "lira": lira_scores(out_model, X[:, 7]),
        "loss_threshold": -X[:, 7],
    }, y


# ---------------------------------------------------------------------------
# decisions files


def decisions_to_csv(ids: Sequence[str], clients: Sequence[int], scores: np.ndarray,
                     assignments: Mapping[str, Optional[int]], column_ok, row_ok) -> str:
    head = ["record_id"] + [f"p_{client_label(c)}" for c in clients] + ["assignment", "column_ok", "row_ok"]
    lines = [",".join(head)]
    for i, r in enumerate(ids):
        a = assignments[r]
        cells = [r] + ["" if math.isnan(v) else format_float(v) for v in scores[i]]
        cells += ["" if a is None else str(a + 1), str(bool(column_ok[i])).lower(), str(bool(row_ok[i])).lower()]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def stacking_decisions_csv(result: AttackResult, clients: Sequence[int]) -> str:
    ids = [d.record_id for d in result.decisions]
    scores = np.array([d.probabilities for d in result.decisions])
    return decisions_to_csv(ids, clients, scores, result.assignments(),
                            [d.column_ok for d in result.decisions], [d.row_ok for d in result.decisions])


def baseline_decisions_csv(pools: AttackPools, outcome: BaselineOutcome) -> str:
    ids = pools.challenge.ids
    infer = [i for i, r in enumerate(ids) if r not in pools.leaked_members]
    n, m = len(ids), outcome.scores.shape[1]
    scores = np.full((n, m), np.nan)
    scores[infer] = outcome.scores
    flagged = np.ones(n, dtype=bool)
    flagged[infer] = outcome.flags.any(axis=1)
    return decisions_to_csv(ids, pools.target_clients, scores, outcome.assignments, flagged, flagged)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _num(x: float) -> Optional[float]:
    return None if x is None or not math.isfinite(x) else float(x)


# ---------------------------------------------------------------------------
# one tier


@dataclass
class TierOutcome:
    tier: str
    privacy: Optional[PrivacyConfig]
    targets: dict[int, TargetModel]
    predictions: dict[int, PredictionMatrix]
    attack: AttackResult
    baselines: dict[str, BaselineOutcome]
    accuracies: dict[str, float]
    colluding: dict[str, np.ndarray]
    colluding_labels: np.ndarray


def train_targets(bundle: ScenarioBundle, tier: str, train: TrainConfig, seed: int) -> dict[int, TargetModel]:
    return {c: train_for_tier(bundle.train[c], replace(train, seed=seed * 100 + c), TIERS[tier])
            for c in range(bundle.n_clients)}


def run_tier(bundle: ScenarioBundle, tier: str, cfg: RunConfig,
             hyper: MetaHyper = MetaHyper()) -> TierOutcome:
    seeds = cfg.seeds
    pools = bundle.attacker_view()
    targets = train_targets(bundle, tier, cfg.train, seeds["targets"])
    preds = predictions_for(pools, targets)
    result = run_attack(pools, preds, cfg.rule, hyper, seeds["attack"])
    baselines = baseline_outcomes(pools, result)
    truth = bundle.challenge_truth()
    acc = {"stacking": challenge_accuracy(result.assignments(), truth)}
    acc.update({k: challenge_accuracy(b.assignments, truth) for k, b in baselines.items()})
    scores, y = colluding_scores(result, pools, cfg.folds, seeds["folds"], hyper)
    return TierOutcome(tier, targets[0].privacy, targets, preds, result, baselines, acc, scores, y)


def tier_summary(outcome: TierOutcome, bundle: ScenarioBundle, files: dict) -> dict:
    n = len(bundle.challenge)
    priv = outcome.privacy
    privacy = {
        "epsilon": None if priv is None or not priv.is_private else priv.epsilon,
        "delta": TIERS[outcome.tier].delta,
        "clip_norm": TIERS[outcome.tier].clip_norm,
        "noise_multiplier": 0.0 if priv is None else float(priv.noise_multiplier or 0.0),
        "steps": None if priv is None else priv.steps,
        "epsilon_spent": None,
    }
    if priv is not None and priv.is_private:
        privacy["epsilon_spent"] = epsilon_for(priv.noise_multiplier, priv.steps, priv.delta)

    y = outcome.colluding_labels
    rows = []
    for name in SCORED_ATTACKS:
        s = outcome.colluding[name]
        rows.append({"attack": name, "tpr_at_1pct": tpr_at_fpr(s, y, 0.01),
                     "tpr_at_3pct": tpr_at_fpr(s, y, 0.03), "auc": roc_auc(s, y)})
    z_tests = [z_test_entry("stacking", b, outcome.accuracies["stacking"], outcome.accuracies[b], n, n)
               for b in ATTACKS[1:]]
    clients = outcome.attack.provenance["target_clients"]
    return {
        "privacy": privacy,
        "target_external_accuracy": float(np.mean([accuracy(outcome.targets[c], bundle.external[c])
                                                   for c in outcome.targets])),
        "attacks": [{"attack": a, "challenge_accuracy": outcome.accuracies[a]} for a in ATTACKS],
        "thresholds": {client_label(c): outcome.attack.thresholds[c] for c in clients},
        "tpr": {
            "client": client_label(bundle.colluding_client),
            "n_in": int(y.sum()),
            "n_out": int(len(y) - y.sum()),
            "fpr_step": 1.0 / int(len(y) - y.sum()),
            "rows": rows,
        },
        "z_tests": z_tests,
        "files": files,
    }


def z_test_entry(a: str, b: str, p1: float, p2: float, n1: int, n2: int) -> dict:
    entry = {"a": a, "b": b, "p1": p1, "p2": p2, "n1": n1, "n2": n2, "z": None, "p_value": None}
    try:
        z, p = two_proportion_z(p1, p2, n1, n2)
        entry["z"], entry["p_value"] = z, p
    except EvaluationError:
        pass
    return entry


# ---------------------------------------------------------------------------
# whole run


def run_fl(bundle: ScenarioBundle, cfg: RunConfig, tier: str, epochs: int):
    fl_cfg = FlConfig(clients=bundle.n_clients, rounds=cfg.fl_rounds, local_epochs=epochs,
                      tier=TIERS[tier], seed=cfg.seeds["fl"], train=cfg.train)
    return federate(bundle, fl_cfg)


def run_all(cfg: RunConfig, out, hyper: MetaHyper = MetaHyper(), log=None) -> dict:
    """Run every stage, write all artefacts under ``out`` and return the report.

    The report is written last, so an interrupted run never leaves one behind.
    """
    out = Path(out)
    log = log or (lambda msg: None)
    bundle = generate_scenario(cfg.scenario_config())
    sizes = write_scenario(bundle, out)
    log(f"scenario: {sizes}")
    pools = bundle.attacker_view()
    clients = pools.target_clients

    tiers = {}
    accs = {}
    for tier in cfg.tiers:
        outcome = run_tier(bundle, tier, cfg, hyper)
        accs[tier] = outcome.accuracies["stacking"]
        base = Path(tier)
        files = {"predictions": [], "decisions": {}, "roc": {}, "provenance": str(base / "provenance.json")}
        for c, pm in outcome.predictions.items():
            rel = base / "predictions" / f"client_{client_label(c)}.csv"
            export_prediction_matrix(pm, out / rel)
            files["predictions"].append(str(rel))
        rel = base / "stacking_decisions.csv"
        write_text_atomic(out / rel, stacking_decisions_csv(outcome.attack, clients))
        files["decisions"]["stacking"] = str(rel)
        for name, b in outcome.baselines.items():
            rel = base / f"{name}_decisions.csv"
            write_text_atomic(out / rel, baseline_decisions_csv(pools, b))
            files["decisions"][name] = str(rel)
        for name in SCORED_ATTACKS:
            rel = base / f"roc_{name}.csv"
            write_text_atomic(out / rel, roc_to_csv(roc_points(outcome.colluding[name], outcome.colluding_labels)))
            files["roc"][name] = str(rel)
        prov = dict(outcome.attack.provenance)
        prov["tier"] = tier
        prov["rule"] = {"percentile": cfg.rule.percentile, "lambda": cfg.rule.lam}
        write_text_atomic(out / files["provenance"], _dumps(prov))
        tiers[tier] = tier_summary(outcome, bundle, files)
        log(f"{tier}: " + ", ".join(f"{k}={v:.3f}" for k, v in outcome.accuracies.items()))

    tier_z = []
    order = list(cfg.tiers)
    n = len(bundle.challenge)
    for a, b in zip(order, order[1:]):
        tier_z.append(z_test_entry(f"stacking:{a}", f"stacking:{b}", accs[a], accs[b], n, n))

    runs = []
    for tier in cfg.tiers:
        for e in cfg.fl_epochs:
            fed = run_fl(bundle, cfg, tier, e)
            rel = Path("curves") / f"fl_{tier}_e{e}.csv"
            export_curves(fed.logs, out / rel, tier, bundle.config.n_classes)
            runs.append({
                "tier": tier, "local_epochs": e, "final_accuracy": fed.logs[-1].accuracy,
                "random_floor": 1.0 / bundle.config.n_classes,
                "noise_multiplier": 0.0 if fed.privacy is None else fed.privacy.noise_multiplier,
                "steps": None if fed.privacy is None else fed.privacy.steps,
                "curve": str(rel),
            })
            log(f"fl {tier} E={e}: final accuracy {fed.logs[-1].accuracy:.3f}")

    report = {
        "format": "mia-forge-report/1",
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": cfg.seeds,
        "scenario": {
            "n_clients": bundle.n_clients,
            "colluding_client": client_label(bundle.colluding_client),
            "challenge_size": n,
            "random_floor": random_floor(bundle.challenge_truth(), bundle.n_clients, bundle.colluding_client),
            "pool_sizes": sizes,
        },
        "tier_order": order,
        "tiers": tiers,
        "tier_z_tests": tier_z,
        "fl": {"rounds": cfg.fl_rounds, "clients": bundle.n_clients, "runs": runs},
    }
    emit_report(report, out / "report.json")
    return report


def attack_external(pools_dir, predictions_dir, rule: DecisionRuleConfig = DecisionRuleConfig(),
                    seed: int = 0, out=None, hyper: MetaHyper = MetaHyper()) -> AttackResult:
    """Stacking attack on pre-exported prediction matrices; no target training happens here."""
    pools = load_pools(pools_dir)
    preds = load_predictions(predictions_dir, pools.n_clients)
    result = run_attack(pools, preds, rule, hyper, seed)
    if out is not None:
        out = Path(out)
        write_text_atomic(out / "stacking_decisions.csv", stacking_decisions_csv(result, pools.target_clients))
        prov = dict(result.provenance)
        prov["rule"] = {"percentile": rule.percentile, "lambda": rule.lam}
        write_text_atomic(out / "provenance.json", _dumps(prov))
    return result
