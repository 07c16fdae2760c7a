import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mia_forge.data import Dataset, ScenarioConfig, generate_scenario
from mia_forge.fl import (FlConfig, RoundLog, curves_to_csv, export_curves, federate, load_curves,
                          partition, random_floor, weighted_average)
from mia_forge.targets import TIERS, TrainConfig, train_dp_sgd, train_plain


def toy(n=48, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 3, n)
    X = rng.normal(0, 3, (3, 5))[y] + rng.normal(0, 1, (n, 5))
    return Dataset(tuple(f"t{i}" for i in range(n)), X, y, 3)


def test_weighted_mean_example():
    out = weighted_average([[np.array([1.0])], [np.array([3.0])]], [0, 4])
    assert out[0][0] == 3.0


def test_weights_follow_client_sizes():
    out = weighted_average([[np.array([0.0, 2.0])], [np.array([4.0, 2.0])]], [1, 3])
    assert np.allclose(out[0], [3.0, 2.0])


@given(st.integers(1, 6), st.integers(0, 1000))
def test_identical_clients_average_to_themselves(n, seed):
    p = [np.random.default_rng(seed).normal(size=(3, 2)), np.zeros(2)]
    out = weighted_average([p] * n, list(range(1, n + 1)))
    assert np.allclose(out[0], p[0]) and np.allclose(out[1], p[1])


def test_bad_weights_are_rejected():
    with pytest.raises(ValueError):
        weighted_average([[np.zeros(1)]], [0.0])
    with pytest.raises(ValueError):
        weighted_average([[np.zeros(1)]], [1.0, 2.0])


@pytest.mark.parametrize("arch", ["logistic", "mlp"])
def test_single_client_equals_centralised_training(arch):
    data = toy()
    rounds, epochs = 4, 3
    train = TrainConfig(epochs=rounds * epochs, architecture=arch, hidden_width=8, seed=9)
    fed = federate([data], FlConfig(clients=1, rounds=rounds, local_epochs=epochs, seed=9, train=train))
    central = train_plain(data, train)
    for a, b in zip(fed.model.params, central.params):
        assert np.array_equal(a, b)


def test_single_client_equals_centralised_dp_training():
    data = toy()
    rounds, epochs = 3, 2
    train = TrainConfig(epochs=rounds * epochs, seed=4)
    cfg = FlConfig(clients=1, rounds=rounds, local_epochs=epochs, seed=4, train=train,
                   tier=TIERS["highdp"])
    fed = federate([data], cfg)
    central = train_dp_sgd(data, train, TIERS["highdp"])
    assert fed.privacy == central.privacy
    for a, b in zip(fed.model.params, central.params):
        assert np.array_equal(a, b)


def test_partition_is_iid_disjoint_and_complete():
    data = toy(50)
    parts, held = partition(data, 4, 0.8, seed=1)
    assert [len(p) for p in parts] == [10, 10, 10, 10] and len(held) == 10
    all_ids = [i for p in parts for i in p.ids] + list(held.ids)
    assert sorted(all_ids) == sorted(data.ids)


def test_bundle_runs_use_the_clients_training_data():
    bundle = generate_scenario(ScenarioConfig())
    fed = federate(bundle, FlConfig(rounds=2, local_epochs=1))
    train_ids = {i for d in bundle.train for i in d.ids}
    used = {i for p in fed.partitions for i in p.ids} | set(fed.holdout.ids)
    assert used == train_ids
    assert len(fed.holdout) == 32
    assert [g.round for g in fed.logs] == [1, 2]


def test_fifty_round_curve_round_trip(tmp_path):
    data = toy(40)
    fed = federate([data], FlConfig(clients=1, rounds=50, local_epochs=1, train=TrainConfig(epochs=50)))
    assert len(fed.logs) == 50
    path = export_curves(fed.logs, tmp_path / "curves" / "fl_nodp_e1.csv", "nodp", 4)
    meta, logs = load_curves(path)
    assert meta == {"tier": "nodp", "random_floor": 0.25}
    assert logs == fed.logs


def test_curve_text_layout():
    text = curves_to_csv([RoundLog(1, 0.5, 1.25)], "highdp", 4)
    assert text.splitlines() == ["# tier=highdp,random_floor=0.25", "round,accuracy,mean_loss",
                                 "1,0.5,1.25"]
    assert random_floor(4) == 0.25


def test_config_validation():
    with pytest.raises(ValueError, match="rounds"):
        FlConfig(rounds=0)
    with pytest.raises(ValueError, match="local_epochs"):
        FlConfig(local_epochs=0)
    with pytest.raises(ValueError, match="clients"):
        dataclasses.replace(FlConfig(), clients=0)
