"""Comparison attacks: external-profile heuristic, OUT-only LiRA, loss threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

SIGMA_FLOOR = 1e-9


@dataclass(frozen=True)
class ExternalProfile:
    mean_loss: float
    mean_confidence: float

    @classmethod
    def fit(cls, losses, probs) -> "ExternalProfile":
        losses = np.asarray(losses, dtype=np.float64).reshape(-1)
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if losses.size == 0:
            raise ValueError("an external profile needs at least one record")
        return cls(float(losses.mean()), float(probs.max(axis=1).mean()))


@dataclass(frozen=True)
class GaussianLossModel:
    """Non-member (OUT) loss distribution ``N(mu_out, sigma_out^2)``."""

    mu_out: float
    sigma_out: float

    def __post_init__(self):
        object.__setattr__(self, "sigma_out", max(float(self.sigma_out), SIGMA_FLOOR))

    @classmethod
    def fit(cls, external_losses) -> "GaussianLossModel":
        x = np.asarray(external_losses, dtype=np.float64).reshape(-1)
        if x.size == 0:
            raise ValueError("fitting the OUT distribution needs at least one external loss")
        sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
        return cls(float(x.mean()), sd)


def normal_cdf(z: float) -> float:
    """Standard normal CDF via ``erfc``, accurate to full relative precision in both tails."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_sf(z: float) -> float:
    """Upper tail ``1 - Phi(z)``, computed with ``erfc`` so it keeps precision for large ``z``."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def lira_score(model: GaussianLossModel, loss: float) -> float:
    """``1 - Phi((loss - mu_out) / sigma_out)``: high when the loss is unusually small for a non-member."""
    return normal_sf((float(loss) - model.mu_out) / model.sigma_out)


def lira_scores(model: GaussianLossModel, losses) -> np.ndarray:
    return np.array([lira_score(model, l) for l in np.asarray(losses, dtype=np.float64).reshape(-1)])


def loss_threshold(losses, tau: float) -> np.ndarray:
    """Member flag for each record: ``loss < tau``."""
    if math.isnan(tau):
        raise ValueError("tau must not be NaN")
    return np.asarray(losses, dtype=np.float64) < tau


def profile_heuristic(profiles: Mapping[int, ExternalProfile],
                      challenge: Mapping[int, Sequence[tuple[float, float]]]) -> list[Optional[int]]:
    """Assign each record to the most confident client whose profile it beats.

    ``challenge[c][i]`` is ``(loss, confidence)`` of record ``i`` under client
    ``c``'s model. Client ``c`` qualifies when ``loss < mean_loss_c`` and
    ``confidence > mean_confidence_c``; among qualifying clients the highest
    confidence wins (lowest index on ties). No qualifier means non-member.
    """
    clients = sorted(challenge)
    missing = [c for c in clients if c not in profiles]
    if missing:
        raise KeyError(f"missing external profile for clients {missing}")
    if not clients:
        return []
    n = len(challenge[clients[0]])
    if any(len(challenge[c]) != n for c in clients):
        raise ValueError("every client must score the same challenge records")
    out: list[Optional[int]] = []
    for i in range(n):
        best, best_conf = None, -math.inf
        for c in clients:
            loss, conf = challenge[c][i]
            prof = profiles[c]
            if loss < prof.mean_loss and conf > prof.mean_confidence and conf > best_conf:
                best, best_conf = c, conf
        out.append(best)
    return out


def assign_by_score(scores: np.ndarray, flags: np.ndarray, clients: Sequence[int]) -> list[Optional[int]]:
    """Highest-scoring flagged client per record (lowest index on ties), else non-member."""
    S = np.where(flags, scores, -np.inf)
    out: list[Optional[int]] = []
    for row in S:
        j = int(np.argmax(row))
        out.append(clients[j] if np.isfinite(row[j]) else None)
    return out
