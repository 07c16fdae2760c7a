import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mia_forge.estimators import (KIND_ORDER, BoostedTrees, EstimatorError, EstimatorKind,
                                  FittedEstimator, build_classification_tree, fit, fit_all)
from mia_forge.evaluation import roc_auc


def attack_toy(n=120, k=4, seed=0, flip=0.0):
    """Members are queried with high confidence on a fixed task label, non-members with low."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(float)
    conf = np.where(y == 1, rng.uniform(0.8, 0.99, n), rng.uniform(0.3, 0.5, n))
    probs = np.empty((n, k))
    probs[:, 0] = conf
    probs[:, 1:] = ((1 - conf) / (k - 1))[:, None]
    onehot = np.zeros((n, k))
    onehot[:, 0] = 1.0
    X = np.hstack([probs, onehot])
    noisy = y.copy()
    if flip:
        idx = rng.choice(n, int(round(flip * n)), replace=False)
        noisy[idx] = 1 - noisy[idx]
    return X, y, noisy


@pytest.mark.parametrize("kind", KIND_ORDER)
def test_separable_training_accuracy(kind):
    X, y, _ = attack_toy()
    est = fit(kind, X, y, seed=3)
    acc = np.mean((est.score_many(X) >= 0.5) == y)
    assert acc >= 0.95


@pytest.mark.parametrize("kind", KIND_ORDER)
def test_label_noise_keeps_auc_above_chance(kind):
    X, y, noisy = attack_toy(200, seed=1, flip=0.4)
    Xt, yt, _ = attack_toy(200, seed=2)
    est = fit(kind, X, noisy, seed=5)
    assert roc_auc(est.score_many(Xt), yt) > 0.5


@pytest.mark.parametrize("kind", KIND_ORDER)
def test_scores_are_probabilities(kind):
    X, y, _ = attack_toy(60)
    est = fit(kind, X, y)
    Z = np.random.default_rng(9).normal(0, 5, (1000, X.shape[1]))
    s = est.score_many(Z)
    assert s.shape == (1000,)
    assert ((s >= 0) & (s <= 1)).all()


def test_symmetric_lr_scores_the_midpoint_at_one_half():
    X = np.array([[-1.0], [1.0]])
    est = fit("LR", X, [0, 1])
    assert est.score([0.0]) == pytest.approx(0.5, abs=1e-12)


def test_knn_with_one_neighbour_returns_own_label():
    X, y, _ = attack_toy(40)
    est = fit("KNN", X, y, k=1)
    assert np.array_equal(est.score_many(X), y)


def test_decision_tree_leaf_stores_member_fraction():
    X = np.zeros((4, 2))
    est = fit("DT", X, [1, 1, 1, 0])
    assert est.score([0.0, 0.0]) == pytest.approx(0.75)


def test_single_tree_forest_is_a_tree_on_its_bootstrap():
    X, y, _ = attack_toy(50, seed=4, flip=0.2)
    rf = fit("RF", X, y, seed=11, n_trees=1, max_features=None, max_depth=6, min_leaf=1)
    boot = np.random.default_rng(11).integers(0, 50, size=50)
    assert np.array_equal(rf.state["bootstraps"][0], boot)
    tree = build_classification_tree(X[boot], y[boot], max_depth=6, min_leaf=1)
    assert np.array_equal(rf.score_many(X), tree.predict(X))


def test_forest_is_deterministic_per_seed():
    X, y, _ = attack_toy(50, flip=0.2)
    a = fit("RF", X, y, seed=2).score_many(X)
    assert np.array_equal(a, fit("RF", X, y, seed=2).score_many(X))


def test_fit_all_uses_distinct_seeds_in_meta_order():
    X, y, _ = attack_toy(40)
    ests = fit_all(X, y, seed=10)
    assert list(ests) == list(KIND_ORDER)
    assert [e.seed for e in ests.values()] == list(range(10, 17))


@pytest.mark.parametrize("kind", KIND_ORDER)
def test_serialisation_round_trip(kind):
    X, y, _ = attack_toy(40)
    est = fit(kind, X, y)
    back = FittedEstimator.from_dict(json.loads(json.dumps(est.to_dict())))
    assert np.array_equal(back.score_many(X), est.score_many(X))


def test_errors():
    X, y, _ = attack_toy(20)
    with pytest.raises(EstimatorError, match="single class"):
        fit("LR", X, np.ones(20))
    with pytest.raises(EstimatorError, match="0 or 1"):
        fit("LR", X, np.full(20, 2.0))
    with pytest.raises(ValueError):
        fit("XGB", X, y)
    est = fit("LR", X, y)
    with pytest.raises(EstimatorError, match="length"):
        est.score_many(np.zeros((1, 3)))


def test_boosting_continues_without_touching_the_original():
    X, y, _ = attack_toy(60, flip=0.2)
    base = BoostedTrees.fit(X, y, n_rounds=10)
    more = base.continue_fit(X, np.zeros(60), 5, 0.05)
    assert base.n_trees == 10 and more.n_trees == 15
    assert more.trees[:10] == base.trees
    assert more.predict_proba(X).mean() < base.predict_proba(X).mean()
    assert BoostedTrees.from_dict(more.to_dict()) == more


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_tree_leaves_are_label_fractions(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 3, (30, 2)).astype(float)
    y = rng.integers(0, 2, 30).astype(float)
    tree = build_classification_tree(X, y, max_depth=3, min_leaf=1)
    leaves = tree.apply(X)
    pred = tree.predict(X)
    for leaf in np.unique(leaves):
        mask = leaves == leaf
        assert pred[mask][0] == pytest.approx(y[mask].mean())


def test_kind_names():
    assert [k.value for k in KIND_ORDER] == ["NN", "RF", "DT", "GB", "KNN", "SVM", "LR"]
    assert EstimatorKind("GB") is EstimatorKind.GB
