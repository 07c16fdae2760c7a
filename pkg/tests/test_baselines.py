import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from mia_forge.baselines import (ExternalProfile, GaussianLossModel, assign_by_score, lira_score,
                                 lira_scores, loss_threshold, normal_cdf, normal_sf,
                                 profile_heuristic)

Z_TABLE = [float(z) for z in np.linspace(-6.0, 6.0, 20)]


@pytest.mark.parametrize("z", Z_TABLE)
def test_normal_cdf_against_high_precision(z):
    mpmath.mp.dps = 40
    want = float(mpmath.ncdf(z))
    assert normal_cdf(z) == pytest.approx(want, rel=1e-12, abs=1e-300)
    assert normal_sf(z) == pytest.approx(float(1 - mpmath.ncdf(z)), rel=1e-12, abs=1e-300)


def test_far_tail_keeps_precision():
    assert normal_sf(10.0) == pytest.approx(7.619853024160527e-24, rel=1e-12)


def test_out_model_fit_and_score():
    m = GaussianLossModel.fit([1.0, 2.0, 3.0])
    assert (m.mu_out, m.sigma_out) == (2.0, 1.0)
    assert lira_score(m, 2.0) == pytest.approx(0.5)
    assert lira_score(m, 1.0) == pytest.approx(normal_cdf(1.0))
    assert lira_score(m, 0.0) > lira_score(m, 1.0) > lira_score(m, 3.0)


def test_degenerate_out_distribution_is_floored():
    m = GaussianLossModel.fit([0.5])
    assert m.sigma_out == pytest.approx(1e-9)
    assert lira_score(m, 0.4) == 1.0
    with pytest.raises(ValueError):
        GaussianLossModel.fit([])


@given(st.lists(st.floats(0, 30), min_size=2, max_size=20))
def test_lira_scores_are_monotone_in_loss(losses):
    m = GaussianLossModel(1.0, 0.5)
    order = np.argsort(losses, kind="stable")
    s = lira_scores(m, losses)[order]
    assert (np.diff(s) <= 0).all()


def test_loss_threshold_is_strict():
    assert loss_threshold([0.1, 0.5, 0.9], 0.5).tolist() == [True, False, False]
    with pytest.raises(ValueError):
        loss_threshold([0.1], math.nan)


def test_profile_heuristic_picks_most_confident_qualifier():
    profiles = {0: ExternalProfile(1.0, 0.6), 1: ExternalProfile(1.0, 0.6), 2: ExternalProfile(0.2, 0.9)}
    challenge = {
        0: [(0.5, 0.7), (2.0, 0.9), (0.5, 0.8)],
        1: [(0.4, 0.8), (2.0, 0.9), (0.5, 0.8)],
        2: [(0.1, 0.95), (2.0, 0.9), (0.5, 0.8)],
    }
    assert profile_heuristic(profiles, challenge) == [2, None, 0]


def test_profile_from_pool():
    p = ExternalProfile.fit([0.5, 1.5], [[0.6, 0.4], [0.2, 0.8]])
    assert (p.mean_loss, p.mean_confidence) == (1.0, 0.7)


def test_profile_heuristic_needs_every_profile():
    with pytest.raises(KeyError, match="1"):
        profile_heuristic({0: ExternalProfile(1, 1)}, {0: [], 1: []})


def test_assign_by_score():
    scores = np.array([[0.2, 0.9, 0.9], [0.5, 0.1, 0.3]])
    flags = np.array([[True, True, True], [False, False, False]])
    assert assign_by_score(scores, flags, [0, 1, 2]) == [1, None]


def test_two_sigma_below_the_out_mean():
    m = GaussianLossModel(1.0, 0.25)
    assert lira_score(m, 0.5) == pytest.approx(0.97725, abs=1e-5)


def test_threshold_boundaries():
    losses = [0.0, 0.3, 5.0]
    assert loss_threshold(losses, math.inf).all()
    assert not loss_threshold(losses, 0.0).any()


def test_profile_examples():
    profiles = {c: ExternalProfile(1.0, 0.5) for c in range(3)}
    assert profile_heuristic(profiles, {0: [(0.1, 0.9)], 1: [(0.1, 0.7)], 2: [(0.1, 0.8)]}) == [0]
    assert profile_heuristic(profiles, {c: [(2.0, 0.9)] for c in range(3)}) == [None]
    assert profile_heuristic(profiles, {0: [(0.1, 0.6)], 1: [(0.1, 0.8)], 2: [(0.1, 0.8)]}) == [1]
