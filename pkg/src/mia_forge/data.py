"""Datasets, synthetic federated scenarios, and CSV/JSON ingestion.

A scenario mirrors the auditing setup of a federated genomics challenge:
``C`` clients each hold a private training set, the attacker receives a
*relevant* pool (a noisy mix of members and non-members) and an *external*
pool (guaranteed non-members) per client, plus one shared *challenge* pool
whose membership must be inferred. One client (the colluding one) leaks its
full ground truth.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

FLOAT_FMT = ".17g"


class DataFormatError(ValueError):
    """Raised when an input file does not match its documented schema."""


class ScenarioConfigError(ValueError):
    """Raised for an invalid :class:`ScenarioConfig`; the message names the field."""


def format_float(x: float) -> str:
    return format(float(x), FLOAT_FMT)


def round_half_up(x: float) -> int:
    # builtin round() is banker's rounding; counts must not depend on that
    return int(math.floor(x + 0.5))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Record:
    id: str
    features: np.ndarray
    task_label: int


@dataclass(frozen=True)
class LabeledMembership:
    record_id: str
    member_of: Optional[int] = None

    @property
    def is_member(self) -> bool:
        return self.member_of is not None


@dataclass(frozen=True, eq=False)
class Dataset:
    """An immutable, ordered collection of records.

    ``features`` is an ``(n, d)`` float array and ``labels`` the matching task
    labels in ``[0, n_classes)``. ``member_of`` is optional per-record
    membership (``None`` entries mean non-member).
    """

    ids: tuple[str, ...]
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 4
    member_of: Optional[tuple[Optional[int], ...]] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(self.ids), -1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        ids = tuple(str(i) for i in self.ids)
        if feats.shape[0] != len(ids) or labels.shape[0] != len(ids):
            raise ValueError(
                f"length mismatch: {len(ids)} ids, {feats.shape[0]} feature rows, "
                f"{labels.shape[0]} labels"
            )
        if len(set(ids)) != len(ids):
            raise ValueError("record ids must be unique")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"task labels must lie in [0, {self.n_classes})")
        if self.member_of is not None and len(self.member_of) != len(ids):
            raise ValueError("member_of must have one entry per record")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        if self.member_of is not None:
            object.__setattr__(self, "member_of", tuple(self.member_of))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Record]:
        for i, rid in enumerate(self.ids):
            yield Record(rid, self.features[i], int(self.labels[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.n_classes == other.n_classes
            and self.member_of == other.member_of
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def memberships(self) -> list[LabeledMembership]:
        if self.member_of is None:
            return []
        return [LabeledMembership(r, m) for r, m in zip(self.ids, self.member_of)]

    def subset(self, index: Sequence[int] | np.ndarray) -> "Dataset":
        index = [int(i) for i in index]
        mem = None if self.member_of is None else tuple(self.member_of[i] for i in index)
        return Dataset(
            tuple(self.ids[i] for i in index),
            self.features[index] if index else np.empty((0, self.n_features)),
            self.labels[index] if index else np.empty(0, dtype=np.int64),
            self.n_classes,
            mem,
        )

    def without_membership(self) -> "Dataset":
        return Dataset(self.ids, self.features, self.labels, self.n_classes)

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        keep_mem = all(p.member_of is not None for p in parts)
        return cls(
            tuple(i for p in parts for i in p.ids),
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].n_classes,
            tuple(m for p in parts for m in p.member_of) if keep_mem else None,
        )


@dataclass(frozen=True, eq=False)
class PredictionMatrix:
    """Class-probability rows returned by black-box queries, keyed by record id."""

    record_ids: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        ids = tuple(str(i) for i in self.record_ids)
        if probs.ndim != 2 or probs.shape[0] != len(ids):
            raise ValueError("probs must be an (n, K) array with one row per id")
        object.__setattr__(self, "record_ids", ids)
        object.__setattr__(self, "probs", _frozen(probs))

    def __len__(self) -> int:
        return len(self.record_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PredictionMatrix):
            return NotImplemented
        return self.record_ids == other.record_ids and np.array_equal(self.probs, other.probs)

    @property
    def n_classes(self) -> int:
        return int(self.probs.shape[1])

    def rows_for(self, ids: Sequence[str]) -> np.ndarray:
        """Probabilities for ``ids`` in the given order; raises ``KeyError`` listing any missing ids."""
        pos = {r: i for i, r in enumerate(self.record_ids)}
        missing = [r for r in ids if r not in pos]
        if missing:
            raise KeyError(f"prediction rows missing for ids: {', '.join(missing)}")
        return self.probs[[pos[r] for r in ids]]


# ---------------------------------------------------------------------------
# scenario generation


@dataclass(frozen=True)
class ScenarioConfig:
    """Shape of a synthetic scenario.

    Default pool sizes per client are relevant/external = 73/64, 95/83,
    59/52, 23/20 with 73 challenge records, at desk scale: 64 features and
    40 training records per client. The last client plays the colluding
    role, with 13 of its 23 relevant records being true members.
    """

    n_clients: int = 4
    n_classes: int = 4
    n_features: int = 64
    train_sizes: tuple[int, ...] = (40, 40, 40, 40)
    relevant_sizes: tuple[int, ...] = (73, 95, 59, 23)
    external_sizes: tuple[int, ...] = (64, 83, 52, 20)
    challenge_size: int = 73
    # challenge records that are true members, per client; the remainder are global non-members
    challenge_members: tuple[int, ...] = (18, 18, 18, 0)
    relevant_member_fractions: tuple[float, ...] = (0.2, 0.2, 0.2, 13 / 23)
    class_separation: float = 3.0
    seed: int = 0
    colluding_client: Optional[int] = None

    def __post_init__(self):
        C = self.n_clients
        if C < 1:
            raise ScenarioConfigError("n_clients: must be >= 1")
        if self.n_classes < 2:
            raise ScenarioConfigError("n_classes: must be >= 2")
        if self.n_features < 1:
            raise ScenarioConfigError("n_features: must be >= 1")
        for name in ("train_sizes", "relevant_sizes", "external_sizes",
                     "challenge_members", "relevant_member_fractions"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != C:
                raise ScenarioConfigError(f"{name}: expected {C} entries, got {len(value)}")
        for name in ("train_sizes", "relevant_sizes", "external_sizes"):
            if any(int(v) < 1 for v in getattr(self, name)):
                raise ScenarioConfigError(f"{name}: all counts must be >= 1")
        if self.challenge_size < 1:
            raise ScenarioConfigError("challenge_size: must be >= 1")
        if any(int(v) < 0 for v in self.challenge_members):
            raise ScenarioConfigError("challenge_members: counts must be >= 0")
        if sum(self.challenge_members) > self.challenge_size:
            raise ScenarioConfigError("challenge_members: more members than challenge records")
        for c, f in enumerate(self.relevant_member_fractions):
            if not 0.0 <= f <= 1.0:
                raise ScenarioConfigError(f"relevant_member_fractions[{c}]: must lie in [0, 1]")
            needed = round_half_up(f * self.relevant_sizes[c]) + self.challenge_members[c]
            if needed > self.train_sizes[c]:
                raise ScenarioConfigError(
                    f"relevant_member_fractions[{c}]: needs {needed} distinct members "
                    f"but client {c} trains on only {self.train_sizes[c]} records"
                )
        if self.class_separation < 0:
            raise ScenarioConfigError("class_separation: must be >= 0")
        collude = C - 1 if self.colluding_client is None else self.colluding_client
        if not 0 <= collude < C:
            raise ScenarioConfigError(f"colluding_client: must lie in [0, {C})")
        object.__setattr__(self, "colluding_client", collude)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ScenarioConfigError(f"{unknown[0]}: unknown scenario field")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


@dataclass(frozen=True, eq=False)
class AttackPools:
    """Everything the attacker is given: auxiliary pools plus one client's leaked truth."""

    relevant: tuple[Dataset, ...]
    external: tuple[Dataset, ...]
    challenge: Dataset
    colluding_client: int
    # ids of relevant/challenge records known to be members of the colluding client
    leaked_members: frozenset[str] = field(default_factory=frozenset)

    @property
    def n_clients(self) -> int:
        return len(self.relevant)

    @property
    def target_clients(self) -> list[int]:
        return [c for c in range(self.n_clients) if c != self.colluding_client]


@dataclass(frozen=True, eq=False)
class ScenarioBundle:
    config: ScenarioConfig
    class_means: np.ndarray
    train: tuple[Dataset, ...]
    relevant: tuple[Dataset, ...]
    external: tuple[Dataset, ...]
    challenge: Dataset
    ground_truth: tuple[LabeledMembership, ...]
    colluding_client: int

    @property
    def n_clients(self) -> int:
        return len(self.train)

    def relevant_truth(self, client: int) -> tuple[bool, ...]:
        return tuple(m is not None for m in self.relevant[client].member_of)

    def challenge_truth(self) -> dict[str, Optional[int]]:
        return {m.record_id: m.member_of for m in self.ground_truth}

    def attacker_view(self, leak: bool = True) -> AttackPools:
        """Pools as the attacker sees them, with membership columns stripped."""
        c = self.colluding_client
        leaked: set[str] = set()
        if leak:
            leaked.update(r for r, m in zip(self.relevant[c].ids, self.relevant[c].member_of)
                          if m is not None)
            leaked.update(m.record_id for m in self.ground_truth if m.member_of == c)
        return AttackPools(
            tuple(d.without_membership() for d in self.relevant),
            tuple(d.without_membership() for d in self.external),
            self.challenge.without_membership(),
            c,
            frozenset(leaked),
        )

    def population(self) -> Dataset:
        """Every distinct labelled record in the bundle (members counted once)."""
        parts = list(self.train)
        for d in self.relevant:
            keep = [i for i, m in enumerate(d.member_of) if m is None]
            parts.append(d.subset(keep))
        parts.extend(self.external)
        keep = [i for i, m in enumerate(self.challenge.member_of) if m is None]
        parts.append(self.challenge.subset(keep))
        return Dataset.concat([p.without_membership() for p in parts if len(p)])


def _draw(rng: np.random.Generator, means: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    k, d = means.shape
    labels = rng.integers(0, k, size=n)
    feats = means[labels] + rng.standard_normal((n, d))
    return feats, labels


def generate_scenario(cfg: ScenarioConfig) -> ScenarioBundle:
    """Draw a deterministic scenario from Gaussian class clusters.

    Class means are random unit directions scaled by ``class_separation``;
    every record adds isotropic unit-variance noise. Relevant pools of client
    ``c`` hold exactly ``round_half_up(fraction * size)`` of its training
    records, challenge members are drawn from the remaining training records,
    and every non-member is a fresh draw from the population.
    """
    rng = np.random.default_rng(cfg.seed)
    K, d, C = cfg.n_classes, cfg.n_features, cfg.n_clients
    dirs = rng.standard_normal((K, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = cfg.class_separation * dirs

    train, relevant, external = [], [], []
    chal_feats, chal_labels, chal_truth = [], [], []
    for c in range(C):
        n = cfg.train_sizes[c]
        X, y = _draw(rng, means, n)
        train.append(Dataset(tuple(f"c{c}_{i}" for i in range(n)), X, y, K, (c,) * n))

        n_rel = cfg.relevant_sizes[c]
        n_mem = round_half_up(cfg.relevant_member_fractions[c] * n_rel)
        order = rng.permutation(n)
        rel_idx, chal_idx = order[:n_mem], order[n_mem:n_mem + cfg.challenge_members[c]]
        Xn, yn = _draw(rng, means, n_rel - n_mem)
        feats = np.vstack([X[rel_idx], Xn])
        labels = np.concatenate([y[rel_idx], yn])
        mem = [c] * n_mem + [None] * (n_rel - n_mem)
        shuffle = rng.permutation(n_rel)
        relevant.append(Dataset(
            tuple(f"rel{c}_{j}" for j in range(n_rel)),
            feats[shuffle], labels[shuffle], K, tuple(mem[j] for j in shuffle),
        ))

        n_ext = cfg.external_sizes[c]
        Xe, ye = _draw(rng, means, n_ext)
        external.append(Dataset(tuple(f"ext{c}_{j}" for j in range(n_ext)), Xe, ye, K,
                                (None,) * n_ext))

        chal_feats.append(X[chal_idx])
        chal_labels.append(y[chal_idx])
        chal_truth.extend([c] * len(chal_idx))

    n_out = cfg.challenge_size - len(chal_truth)
    Xo, yo = _draw(rng, means, n_out)
    chal_feats.append(Xo)
    chal_labels.append(yo)
    chal_truth.extend([None] * n_out)
    feats = np.vstack(chal_feats)
    labels = np.concatenate(chal_labels)
    shuffle = rng.permutation(cfg.challenge_size)
    ids = tuple(f"chal{j}" for j in range(cfg.challenge_size))
    truth = tuple(chal_truth[j] for j in shuffle)
    challenge = Dataset(ids, feats[shuffle], labels[shuffle], K, truth)

    return ScenarioBundle(
        config=cfg,
        class_means=_frozen(means),
        train=tuple(train),
        relevant=tuple(relevant),
        external=tuple(external),
        challenge=challenge,
        ground_truth=tuple(LabeledMembership(r, m) for r, m in zip(ids, truth)),
        colluding_client=cfg.colluding_client,
    )


# ---------------------------------------------------------------------------
# file formats


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "json"):
        raise DataFormatError(f"{path}: unsupported format {fmt!r} (expected csv or json)")
    return fmt


def _check_header(header: Sequence[str], where: str) -> tuple[int, bool]:
    if not header or header[0] != "record_id":
        raise DataFormatError(f"{where}: first column must be 'record_id'")
    if "task_label" not in header:
        raise DataFormatError(f"{where}: missing required column 'task_label'")
    pos = header.index("task_label")
    feat_cols = list(header[1:pos])
    expected = [f"f{j}" for j in range(len(feat_cols))]
    if not feat_cols or feat_cols != expected:
        raise DataFormatError(f"{where}: feature columns must be f0..f{{d-1}} in order, got {feat_cols}")
    tail = list(header[pos + 1:])
    if tail not in ([], ["member_of"]):
        raise DataFormatError(f"{where}: unexpected trailing columns {tail}")
    return len(feat_cols), bool(tail)


def _parse_row(values: Sequence, d: int, has_member: bool, n_classes: int,
               where: str) -> tuple[str, list[float], int, Optional[int]]:
    rid = str(values[0])
    feats = []
    for j in range(d):
        cell = values[1 + j]
        try:
            x = float(cell)
        except (TypeError, ValueError):
            raise DataFormatError(f"{where}: non-numeric value {cell!r} in column f{j}") from None
        if not math.isfinite(x):
            raise DataFormatError(f"{where}: non-finite value in column f{j}")
        feats.append(x)
    cell = values[1 + d]
    try:
        if isinstance(cell, (bool, float)):
            raise ValueError
        label = int(cell)
    except (TypeError, ValueError):
        raise DataFormatError(f"{where}: task_label {cell!r} is not an integer") from None
    if not 0 <= label < n_classes:
        raise DataFormatError(f"{where}: task_label {label} out of range [0, {n_classes})")
    member = None
    if has_member:
        cell = values[2 + d]
        if cell not in ("", None):
            try:
                member = int(cell)
            except (TypeError, ValueError):
                raise DataFormatError(f"{where}: member_of {cell!r} is not a client index") from None
            if member < 0:
                raise DataFormatError(f"{where}: member_of {member} is negative")
    return rid, feats, label, member


def load_dataset(path: str | os.PathLike, fmt: Optional[str] = None,
                 n_classes: int = 4) -> tuple[Dataset, list[LabeledMembership]]:
    """Read a dataset file; returns the dataset and any membership labels it carries.

    Errors name the offending row (1-based, header excluded) and column.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    rows = []
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            d, has_member = _check_header(header or [], str(path))
            width = len(header)
            for rowno, values in enumerate(reader, start=1):
                if not values:
                    continue
                where = f"{path}: row {rowno}"
                if len(values) != width:
                    raise DataFormatError(f"{where}: expected {width} cells, got {len(values)}")
                rows.append(_parse_row(values, d, has_member, n_classes, where))
    else:
        with open(path) as fh:
            try:
                items = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(items, list):
            raise DataFormatError(f"{path}: expected a JSON array of records")
        if not items:
            raise DataFormatError(f"{path}: no records")
        header = list(items[0].keys()) if isinstance(items[0], dict) else []
        d, has_member = _check_header(header, str(path))
        for rowno, obj in enumerate(items, start=1):
            where = f"{path}: row {rowno}"
            if not isinstance(obj, dict) or list(obj.keys()) != header:
                raise DataFormatError(f"{where}: keys differ from the first record")
            rows.append(_parse_row([obj[k] for k in header], d, has_member, n_classes, where))
    if not rows:
        raise DataFormatError(f"{path}: no records")
    ids = [r[0] for r in rows]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise DataFormatError(f"{path}: duplicate record ids {dupes}")
    member = tuple(r[3] for r in rows) if has_member else None
    ds = Dataset(tuple(ids), np.array([r[1] for r in rows]), np.array([r[2] for r in rows]),
                 n_classes, member)
    return ds, ds.memberships()


def dataset_to_csv(ds: Dataset, include_membership: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    with_mem = include_membership and ds.member_of is not None
    header = ["record_id"] + [f"f{j}" for j in range(ds.n_features)] + ["task_label"]
    writer.writerow(header + (["member_of"] if with_mem else []))
    for i, rid in enumerate(ds.ids):
        row = [rid] + [format_float(x) for x in ds.features[i]] + [str(int(ds.labels[i]))]
        if with_mem:
            m = ds.member_of[i]
            row.append("" if m is None else str(m))
        writer.writerow(row)
    return buf.getvalue()


def dataset_to_json(ds: Dataset, include_membership: bool = True) -> str:
    with_mem = include_membership and ds.member_of is not None
    lines = []
    for i, rid in enumerate(ds.ids):
        parts = [f'"record_id": {json.dumps(rid)}']
        parts += [f'"f{j}": {format_float(x)}' for j, x in enumerate(ds.features[i])]
        parts.append(f'"task_label": {int(ds.labels[i])}')
        if with_mem:
            m = ds.member_of[i]
            parts.append(f'"member_of": {"null" if m is None else m}')
        lines.append("  {" + ", ".join(parts) + "}")
    return "[\n" + ",\n".join(lines) + "\n]\n"


def export_dataset(ds: Dataset, path: str | os.PathLike, fmt: Optional[str] = None,
                   include_membership: bool = True) -> Path:
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if not np.all(np.isfinite(ds.features)):
        raise DataFormatError("cannot export non-finite features")
    text = dataset_to_csv(ds, include_membership) if fmt == "csv" else dataset_to_json(ds, include_membership)
    write_text_atomic(path, text)
    return path


def memberships_to_csv(items: Iterable[LabeledMembership]) -> str:
    lines = ["record_id,member_of"]
    lines += [f"{m.record_id},{'' if m.member_of is None else m.member_of}" for m in items]
    return "\n".join(lines) + "\n"


def load_memberships(path: str | os.PathLike) -> list[LabeledMembership]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["record_id", "member_of"]:
            raise DataFormatError(f"{path}: header must be 'record_id,member_of'")
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}: row {rowno}: expected 2 cells")
            try:
                out.append(LabeledMembership(row[0], int(row[1]) if row[1] else None))
            except ValueError:
                raise DataFormatError(f"{path}: row {rowno}: member_of {row[1]!r} is not an integer") from None
    return out


def prediction_matrix_to_csv(pm: PredictionMatrix) -> str:
    lines = ["record_id," + ",".join(f"p{k}" for k in range(pm.n_classes))]
    for rid, row in zip(pm.record_ids, pm.probs):
        lines.append(rid + "," + ",".join(format_float(p) for p in row))
    return "\n".join(lines) + "\n"


def export_prediction_matrix(pm: PredictionMatrix, path: str | os.PathLike) -> Path:
    path = Path(path)
    write_text_atomic(path, prediction_matrix_to_csv(pm))
    return path


def load_prediction_matrix(path: str | os.PathLike) -> PredictionMatrix:
    """Read a prediction CSV (``record_id,p0,...,p{K-1}``).

    Rows with a negative entry or a sum outside ``1 +/- 1e-3`` are rejected;
    accepted rows are renormalised to sum to one unless they already do to
    within 1e-12, so exported matrices reload bit for bit.
    """
    ids, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "record_id" or len(header) < 3:
            raise DataFormatError(f"{path}: header must be record_id,p0,...,p{{K-1}}")
        expected = [f"p{k}" for k in range(len(header) - 1)]
        if header[1:] != expected:
            raise DataFormatError(f"{path}: probability columns must be {','.join(expected)}")
        for rowno, values in enumerate(reader, start=1):
            if not values:
                continue
            where = f"{path}: row {rowno}"
            if len(values) != len(header):
                raise DataFormatError(f"{where}: expected {len(header)} cells, got {len(values)}")
            try:
                p = np.array([float(v) for v in values[1:]])
            except ValueError:
                raise DataFormatError(f"{where}: non-numeric probability") from None
            if not np.all(np.isfinite(p)):
                raise DataFormatError(f"{where}: non-finite probability")
            if np.any(p < 0):
                raise DataFormatError(f"{where}: negative probability")
            s = p.sum()
            if not 1 - 1e-3 <= s <= 1 + 1e-3:
                raise DataFormatError(f"{where}: probabilities sum to {s:.6g}, not 1")
            ids.append(values[0])
            rows.append(p if abs(s - 1) <= 1e-12 else p / s)
    if not rows:
        raise DataFormatError(f"{path}: no prediction rows")
    if len(set(ids)) != len(ids):
        raise DataFormatError(f"{path}: duplicate record ids")
    return PredictionMatrix(tuple(ids), np.array(rows))


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary sibling file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
