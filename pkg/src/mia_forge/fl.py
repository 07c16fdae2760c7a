"""Federated averaging with optional local DP-SGD."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ._parallel import ordered_map
from .data import Dataset, ScenarioBundle, format_float, round_half_up, write_text_atomic
from .targets import (TIERS, PrivacyConfig, TargetModel, TrainConfig, TrainingDivergedError,
                      accuracy, init_params, run_sgd)


class FederatedTrainingError(RuntimeError):
    def __init__(self, round_index: int, client: int, cause: BaseException):
        self.round_index = round_index
        self.client = client
        self.cause = cause
        super().__init__(f"round {round_index}, client {client}: {cause}")


@dataclass(frozen=True)
class FlConfig:
    clients: int = 4
    rounds: int = 50
    local_epochs: int = 5
    tier: PrivacyConfig = TIERS["nodp"]
    train_fraction: float = 0.8
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class RoundLog:
    round: int
    accuracy: float
    mean_loss: float


@dataclass
class FederatedRun:
    logs: list[RoundLog]
    model: TargetModel
    partitions: list[Dataset]
    holdout: Dataset
    privacy: Optional[PrivacyConfig]


def partition(population: Dataset, clients: int, train_fraction: float,
              seed: int) -> tuple[list[Dataset], Dataset]:
    """Shuffle, hold out ``1 - train_fraction`` globally, split the rest IID into equal parts."""
    order = np.random.default_rng(seed).permutation(len(population))
    n_train = round_half_up(train_fraction * len(population))
    if n_train < clients or n_train == len(population):
        raise ValueError(f"cannot split {len(population)} records into {clients} clients plus a holdout")
    parts = [population.subset(p) for p in np.array_split(order[:n_train], clients)]
    return parts, population.subset(order[n_train:])


def weighted_average(params: Sequence[Sequence[np.ndarray]], weights: Sequence[float]) -> list[np.ndarray]:
    """Per-tensor weighted mean; weights are normalised to sum to one."""
    w = np.asarray(weights, dtype=np.float64)
    if len(params) != len(w) or len(w) == 0:
        raise ValueError("need one weight per client parameter set")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    out = []
    for tensors in zip(*params):
        acc = w[0] * tensors[0]
        for wi, t in zip(w[1:], tensors[1:]):
            acc = acc + wi * t
        out.append(acc)
    return out


def federate(data: Union[ScenarioBundle, Sequence[Dataset]], cfg: FlConfig = FlConfig(),
             holdout: Optional[Dataset] = None) -> FederatedRun:
    """Run FedAvg and keep the final global model.

    A :class:`ScenarioBundle` contributes the union of its clients' training
    sets (the auxiliary pools belong to the attacker), split into a global
    holdout and ``cfg.clients`` IID partitions. A sequence of datasets is
    used as the client partitions directly; without an explicit ``holdout`` the
    union of the partitions is evaluated.
    """
    if isinstance(data, ScenarioBundle):
        pooled = Dataset.concat([d.without_membership() for d in data.train])
        parts, held = partition(pooled, cfg.clients, cfg.train_fraction, cfg.seed)
    else:
        parts = list(data)
        if not parts:
            raise ValueError("need at least one client dataset")
        held = Dataset.concat(parts)
    if holdout is not None:
        held = holdout
    tc = cfg.train
    k, d = parts[0].n_classes, parts[0].n_features

    priv = None
    if cfg.tier.is_private:
        # each client composes every local step over all rounds
        steps = cfg.rounds * cfg.local_epochs * max(tc.batches_per_epoch(len(p)) for p in parts)
        priv = cfg.tier.resolved(steps)

    global_params = init_params(tc.architecture, d, k, tc.hidden_width, cfg.seed)
    weights = [len(p) for p in parts]
    logs = []
    for r in range(cfg.rounds):
        def local(c: int):
            try:
                return run_sgd(tc.architecture, global_params, parts[c].features, parts[c].labels, tc,
                               priv, start_epoch=r * cfg.local_epochs, n_epochs=cfg.local_epochs,
                               seed=cfg.seed + c)
            except TrainingDivergedError as exc:
                raise FederatedTrainingError(r, c, exc) from exc

        results = ordered_map(local, range(len(parts)))
        global_params = weighted_average([p for p, _ in results], weights)
        model = TargetModel(tc.architecture, tuple(global_params), k, d, priv)
        mean_loss = float(np.mean([h[-1] for _, h in results]))
        logs.append(RoundLog(r + 1, accuracy(model, held), mean_loss))
    return FederatedRun(logs, model, parts, held, priv)


def run_federated(data: Union[ScenarioBundle, Sequence[Dataset]], cfg: FlConfig = FlConfig(),
                  holdout: Optional[Dataset] = None) -> list[RoundLog]:
    return federate(data, cfg, holdout).logs


def random_floor(n_classes: int) -> float:
    return 1.0 / n_classes


def curves_to_csv(logs: Sequence[RoundLog], tier: str, n_classes: int) -> str:
    if not logs:
        raise ValueError("no round logs to export")
    lines = [f"# tier={tier},random_floor={format_float(random_floor(n_classes))}",
             "round,accuracy,mean_loss"]
    lines += [f"{g.round},{format_float(g.accuracy)},{format_float(g.mean_loss)}" for g in logs]
    return "\n".join(lines) + "\n"


def export_curves(logs: Sequence[RoundLog], path, tier: str = "nodp", n_classes: int = 4) -> Path:
    path = Path(path)
    write_text_atomic(path, curves_to_csv(logs, tier, n_classes))
    return path


def load_curves(path) -> tuple[dict, list[RoundLog]]:
    """Inverse of :func:`export_curves`: ``(metadata, logs)``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing metadata row")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split(","))
    meta["random_floor"] = float(meta["random_floor"])
    if lines[1] != "round,accuracy,mean_loss":
        raise ValueError(f"{path}: unexpected header {lines[1]!r}")
    logs = []
    for line in lines[2:]:
        r, a, l = line.split(",")
        logs.append(RoundLog(int(r), float(a), float(l)))
    return meta, logs
