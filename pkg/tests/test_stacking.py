import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mia_forge.data import PredictionMatrix, ScenarioConfig, generate_scenario
from mia_forge.estimators import KIND_ORDER
from mia_forge.stacking import (AttackStageError, DecisionRuleConfig, MetaFeatureVector, MetaHyper,
                                MetaTrainingError, adapt_to_client, build_meta_dataset,
                                decide, decide_scores, extract_meta_features, fit_meta, percentile,
                                run_attack)
from mia_forge.targets import TrainConfig, train_plain


def oracle_percentile(values, p):
    v = sorted(values)
    rank = p / 100 * (len(v) - 1)
    lo = math.floor(rank)
    if lo + 1 >= len(v):
        return v[-1]
    return v[lo] + (rank - lo) * (v[lo + 1] - v[lo])


def oracle_decisions(S, p, lam):
    """Record-by-record evaluation of the two conditions."""
    n, m = len(S), len(S[0])
    thr = [oracle_percentile([S[i][j] for i in range(n)], p) for j in range(m)]
    out = []
    for row in S:
        best = 0
        for j in range(1, m):
            if row[j] > row[best]:
                best = j
        mean = math.fsum(row) / m
        out.append(best if row[best] > thr[best] and row[best] > lam * mean else None)
    return out


def ids(n):
    return [f"x{i}" for i in range(n)]


def separable_meta(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (n, 8))
    X[:, 7] = rng.uniform(0, 4, n)
    y = (X[:, 7] < 2.0).astype(int)
    return X, y


def test_hand_example_assigns_the_dominant_client():
    S = np.array([[0.9, 0.1, 0.1]] + [[0.1, 0.1, 0.1]] * 9)
    out, thr = decide_scores(ids(10), S, [0, 1, 2])
    assert out[0].assignment == 0 and out[0].column_ok and out[0].row_ok
    assert thr == {0: pytest.approx(0.1), 1: pytest.approx(0.1), 2: pytest.approx(0.1)}


def test_flat_row_is_a_non_member():
    S = np.array([[0.4, 0.4, 0.4], [0.1, 0.1, 0.1], [0.0, 0.0, 0.0]])
    out, _ = decide_scores(ids(3), S, [0, 1, 2])
    assert out[0].assignment is None and not out[0].row_ok


def test_ties_go_to_the_lowest_client():
    S = np.array([[0.9, 0.9, 0.0]] + [[0.0, 0.0, 0.0]] * 4)
    out, _ = decide_scores(ids(5), S, [0, 1, 2])
    assert out[0].assignment == 0


def test_client_labels_are_passed_through():
    S = np.array([[0.0, 0.9], [0.1, 0.0], [0.0, 0.0]])
    out, thr = decide_scores(ids(3), S, [1, 2], DecisionRuleConfig(50, 1.2))
    assert out[0].assignment == 2
    assert set(thr) == {1, 2}


def test_percentile_example():
    assert percentile([0.1 * i for i in range(1, 11)], 55) == pytest.approx(0.595, abs=1e-12)


def test_percentile_matches_numpy_linear():
    v = np.random.default_rng(0).normal(size=37)
    for p in (1, 25, 55, 99):
        assert percentile(v, p) == pytest.approx(np.percentile(v, p), abs=1e-12)


def test_random_matrices_match_the_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(2, 60))
        m = int(rng.integers(2, 5))
        S = rng.uniform(0, 1, (n, m))
        if trial % 4 == 0:
            S = np.round(S, 1)  # force ties
        p = float(rng.uniform(1, 99))
        lam = float(rng.uniform(1, 2.5))
        out, thr = decide_scores(ids(n), S, list(range(m)), DecisionRuleConfig(p, lam))
        assert [d.assignment for d in out] == oracle_decisions(S.tolist(), p, lam)
        for j in range(m):
            assert abs(thr[j] - oracle_percentile(S[:, j].tolist(), p)) <= 1e-12


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=100), st.floats(0.5, 99.5))
def test_percentile_property(values, p):
    assert abs(percentile(values, p) - oracle_percentile(values, p)) <= 1e-12 * max(1, max(map(abs, values)))


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 3.0), st.floats(0.0, 2.0))
def test_raising_lambda_never_adds_members(seed, lam, extra):
    S = np.random.default_rng(seed).uniform(0, 1, (30, 3))
    low, _ = decide_scores(ids(30), S, [0, 1, 2], DecisionRuleConfig(55, lam))
    high, _ = decide_scores(ids(30), S, [0, 1, 2], DecisionRuleConfig(55, lam + extra))
    for a, b in zip(low, high):
        if b.assignment is not None:
            assert a.assignment == b.assignment


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_scaling_all_scores_keeps_assignments(seed, k):
    S = np.random.default_rng(seed).uniform(0.01, 1, (25, 3))
    a, _ = decide_scores(ids(25), S, [0, 1, 2])
    b, _ = decide_scores(ids(25), S * k, [0, 1, 2])
    assert [d.assignment for d in a] == [d.assignment for d in b]


def test_rule_needs_two_clients():
    with pytest.raises(ValueError, match="two"):
        decide_scores(ids(3), np.zeros((3, 1)), [0])


def test_rule_config_validation():
    with pytest.raises(ValueError, match="percentile"):
        DecisionRuleConfig(percentile=100)
    with pytest.raises(ValueError, match="lambda"):
        DecisionRuleConfig(lam=0.5)


def test_meta_vector_shape():
    v = MetaFeatureVector.from_array(np.arange(8.0))
    assert len(v) == 8 and np.array_equal(v.as_array(), np.arange(8.0))
    with pytest.raises(ValueError):
        MetaFeatureVector.from_array(np.zeros(7))
    with pytest.raises(ValueError, match="l_ce"):
        MetaFeatureVector(*([0.5] * 7), math.nan)


class Constant:
    def __init__(self, value):
        self.value = value

    def score_many(self, X):
        return np.full(len(X), self.value)


def test_uniform_target_and_constant_estimators():
    ests = {kind: Constant(0.5) for kind in KIND_ORDER}
    pm = PredictionMatrix(("r",), np.full((1, 4), 0.25))
    v = extract_meta_features(pm, ests, "r", 2)
    assert np.allclose(v.as_array(), [0.5] * 7 + [math.log(4)])


@pytest.fixture(scope="module")
def bundle():
    return generate_scenario(ScenarioConfig(seed=3))


def test_meta_dataset_labels_the_leaked_members(bundle):
    pools = bundle.attacker_view()
    c = pools.colluding_client
    every = list(pools.relevant[c].ids) + list(pools.challenge.ids) + list(pools.external[c].ids)
    feats = {r: np.zeros(8) for r in every}
    X, y, meta_ids = build_meta_dataset(pools, c, feats)
    assert y.sum() == 13
    assert sorted(meta_ids) == sorted(every) and len(set(meta_ids)) == len(meta_ids)
    rel = set(pools.relevant[c].ids)
    assert sum(y[i] for i, r in enumerate(meta_ids) if r in rel) == 13


def test_meta_dataset_without_leaks_is_an_error(bundle):
    pools = dataclasses.replace(bundle.attacker_view(), leaked_members=frozenset())
    with pytest.raises(MetaTrainingError, match="no known members"):
        build_meta_dataset(pools, 3, {})


def test_meta_model_separates_a_separable_set():
    X, y = separable_meta()
    meta = fit_meta(X, y)
    assert np.mean((meta.predict_proba(X) >= 0.5) == y) >= 0.95
    again = fit_meta(X, y)
    assert again.ensemble == meta.ensemble


def test_empty_ensemble_predicts_the_base_rate():
    X, y = separable_meta()
    meta = fit_meta(X, y, MetaHyper(n_rounds=0))
    assert np.allclose(meta.predict_proba(X), y.mean())


def test_single_class_meta_training_is_rejected():
    with pytest.raises(MetaTrainingError):
        fit_meta(np.zeros((5, 8)), np.zeros(5))


def test_adaptation_is_non_destructive_and_lowers_external_scores():
    X, y = separable_meta()
    base = fit_meta(X, y)
    ext = np.random.default_rng(7).uniform(0, 1, (40, 8))
    before = base.predict_proba(X).copy()
    a = adapt_to_client(base, ext, client=0)
    b = adapt_to_client(base, ext[:20], client=1)
    assert np.array_equal(base.predict_proba(X), before)
    assert a.n_trees == base.n_trees + 20 and b.n_trees == base.n_trees + 20
    assert a.predict_proba(ext).mean() <= base.predict_proba(ext).mean()
    same = adapt_to_client(base, ext, rounds=0)
    assert np.array_equal(same.predict_proba(X), before)
    with pytest.raises(MetaTrainingError):
        adapt_to_client(base, [])


def test_decide_scores_every_client():
    X, y = separable_meta()
    base = fit_meta(X, y)
    adapted = {c: adapt_to_client(base, X[y == 0][:30], client=c) for c in (0, 1, 2)}
    feats = {c: {f"r{i}": X[i] for i in range(20)} for c in (0, 1, 2)}
    out, thr = decide(feats, adapted)
    assert len(out) == 20 and set(thr) == {0, 1, 2}


@pytest.fixture(scope="module")
def attack(bundle):
    pools = bundle.attacker_view()
    cfg = TrainConfig(epochs=30)
    targets = {c: train_plain(bundle.train[c], cfg) for c in range(4)}
    return pools, targets, run_attack(pools, targets, seed=5)


def test_end_to_end_provenance(attack):
    pools, _, result = attack
    prov = result.provenance
    assert prov["colluding_client"] == 3 and prov["target_clients"] == [0, 1, 2]
    assert all(math.isfinite(t) for t in prov["thresholds"].values())
    assert prov["rule"] == {"percentile": 55.0, "lam": 1.5}
    assert prov["meta_training"]["members"] == 13
    assert [d.record_id for d in result.decisions] == list(pools.challenge.ids)
    assert all(d.assignment in (None, 0, 1, 2, 3) for d in result.decisions)


def test_end_to_end_is_deterministic(attack):
    pools, targets, result = attack
    again = run_attack(pools, targets, seed=5)
    assert again.assignments() == result.assignments()


def test_missing_leaks_surface_as_a_meta_stage_error(attack):
    pools, targets, _ = attack
    bare = dataclasses.replace(pools, leaked_members=frozenset())
    with pytest.raises(AttackStageError) as err:
        run_attack(bare, targets)
    assert err.value.stage == "meta"


def test_missing_target_is_a_query_stage_error(attack):
    pools, targets, _ = attack
    with pytest.raises(AttackStageError) as err:
        run_attack(pools, {0: targets[0]})
    assert err.value.stage == "query"


def test_estimators_are_fitted_per_client(attack):
    _, _, result = attack
    assert set(result.views) == {0, 1, 2, 3}
    assert all(list(v.estimators) == list(KIND_ORDER) for v in result.views.values())
    assert result.views[0].estimators[KIND_ORDER[0]].seed != result.views[1].estimators[KIND_ORDER[0]].seed
