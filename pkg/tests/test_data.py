import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mia_forge.data import (DataFormatError, Dataset, LabeledMembership, PredictionMatrix,
                            ScenarioConfig, ScenarioConfigError, dataset_to_csv, export_dataset,
                            export_prediction_matrix, generate_scenario, load_dataset,
                            load_memberships, load_prediction_matrix, memberships_to_csv,
                            round_half_up)


@pytest.fixture(scope="module")
def bundle():
    return generate_scenario(ScenarioConfig())


def test_default_pool_sizes(bundle):
    assert [len(d) for d in bundle.relevant] == [73, 95, 59, 23]
    assert [len(d) for d in bundle.external] == [64, 83, 52, 20]
    assert len(bundle.challenge) == 73
    assert bundle.colluding_client == 3


def test_relevant_member_counts_are_exact(bundle):
    cfg = bundle.config
    for c in range(cfg.n_clients):
        want = round_half_up(cfg.relevant_member_fractions[c] * cfg.relevant_sizes[c])
        assert sum(bundle.relevant_truth(c)) == want
    assert sum(bundle.relevant_truth(3)) == 13


def test_external_pools_never_overlap_training_sets(bundle):
    train_rows = {row.tobytes() for d in bundle.train for row in d.features}
    train_ids = {i for d in bundle.train for i in d.ids}
    for ext in bundle.external:
        assert not train_ids & set(ext.ids)
        assert not any(row.tobytes() in train_rows for row in ext.features)
        assert all(m is None for m in ext.member_of)


def test_relevant_members_are_real_training_records(bundle):
    for c, rel in enumerate(bundle.relevant):
        train_rows = {row.tobytes() for row in bundle.train[c].features}
        for row, m in zip(rel.features, rel.member_of):
            assert (row.tobytes() in train_rows) == (m == c)


def test_challenge_has_one_label_per_record(bundle):
    truth = bundle.challenge_truth()
    assert set(truth) == set(bundle.challenge.ids)
    assert len(bundle.ground_truth) == len(bundle.challenge)
    counts = {c: sum(1 for m in truth.values() if m == c) for c in range(4)}
    assert counts == {0: 18, 1: 18, 2: 18, 3: 0}


def test_zero_member_fraction_gives_member_free_relevant_pools():
    b = generate_scenario(ScenarioConfig(relevant_member_fractions=(0, 0, 0, 0)))
    assert all(not any(b.relevant_truth(c)) for c in range(4))


def test_same_seed_gives_identical_bundles():
    a = generate_scenario(ScenarioConfig(seed=5))
    b = generate_scenario(ScenarioConfig(seed=5))
    for x, y in zip(a.train + a.relevant + a.external + (a.challenge,),
                    b.train + b.relevant + b.external + (b.challenge,)):
        assert dataset_to_csv(x) == dataset_to_csv(y)
    assert a.ground_truth == b.ground_truth


def test_infeasible_member_fraction_is_rejected():
    with pytest.raises(ScenarioConfigError, match="relevant_member_fractions"):
        ScenarioConfig(relevant_member_fractions=(0.9, 0.2, 0.2, 13 / 23))


def test_config_errors_name_the_field():
    with pytest.raises(ScenarioConfigError, match="relevant_sizes"):
        ScenarioConfig(relevant_sizes=(1, 2))
    with pytest.raises(ScenarioConfigError, match="unknown"):
        ScenarioConfig.from_dict({"n_clientz": 3})


def test_attacker_view_strips_membership_and_leaks_one_client(bundle):
    view = bundle.attacker_view()
    assert all(d.member_of is None for d in view.relevant + view.external)
    assert view.challenge.member_of is None
    rel = bundle.relevant[3]
    assert view.leaked_members == {r for r, m in zip(rel.ids, rel.member_of) if m == 3}
    assert view.target_clients == [0, 1, 2]


def test_three_row_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("record_id,f0,f1,task_label\na,0.5,1,0\nb,-1,2.25,3\nc,0,0,1\n")
    ds, mem = load_dataset(path)
    assert len(ds) == 3
    assert ds.ids == ("a", "b", "c")
    assert list(ds.labels) == [0, 3, 1]
    assert mem == []


def test_missing_label_column_is_named(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("record_id,f0,f1\na,0.5,1\n")
    with pytest.raises(DataFormatError, match="task_label"):
        load_dataset(path)


@pytest.mark.parametrize("row,msg", [
    ("a,x,0", "row 1"),
    ("a,0.5,9", "row 1"),
    ("a,0.5,-1", "row 1"),
])
def test_bad_rows_report_row_number(tmp_path, row, msg):
    path = tmp_path / "d.csv"
    path.write_text("record_id,f0,task_label\n" + row + "\n")
    with pytest.raises(DataFormatError, match=msg):
        load_dataset(path)


def test_memberships_travel_with_the_dataset(tmp_path, bundle):
    path = tmp_path / "rel.csv"
    export_dataset(bundle.relevant[3], path)
    ds, mem = load_dataset(path)
    assert ds == bundle.relevant[3]
    assert [m.member_of for m in mem] == list(bundle.relevant[3].member_of)


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_load_round_trip_is_exact(tmp_path, bundle, fmt):
    path = tmp_path / f"c.{fmt}"
    export_dataset(bundle.challenge, path)
    ds, _ = load_dataset(path)
    assert ds == bundle.challenge
    assert np.array_equal(ds.features, bundle.challenge.features)


def test_json_mirror_uses_csv_keys(tmp_path):
    ds = Dataset(("a",), np.array([[1.5, -2.0]]), np.array([2]), 4, (1,))
    path = tmp_path / "d.json"
    export_dataset(ds, path)
    item = json.loads(path.read_text())[0]
    assert set(item) == {"record_id", "f0", "f1", "task_label", "member_of"}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=False), min_size=3, max_size=3),
       st.integers(0, 3))
def test_round_trip_property(tmp_path_factory, values, label):
    ds = Dataset(("r",), np.array([values]), np.array([label]), 4)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    export_dataset(ds, path)
    back, _ = load_dataset(path)
    assert back == ds


def test_uniform_prediction_row(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("record_id,p0,p1,p2,p3\nr1,0.25,0.25,0.25,0.25\n")
    pm = load_prediction_matrix(path)
    assert np.array_equal(pm.probs[0], [0.25] * 4)


def test_prediction_row_summing_to_half_is_rejected(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("record_id,p0,p1\nr1,0.25,0.25\n")
    with pytest.raises(DataFormatError, match="sum"):
        load_prediction_matrix(path)


def test_negative_prediction_is_rejected(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("record_id,p0,p1\nr1,-0.1,1.1\n")
    with pytest.raises(DataFormatError, match="negative"):
        load_prediction_matrix(path)


def test_prediction_rows_within_tolerance_are_renormalised(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("record_id,p0,p1\nr1,0.5004,0.5\n")
    pm = load_prediction_matrix(path)
    assert abs(pm.probs[0].sum() - 1) < 1e-12


def test_73_row_prediction_file(tmp_path):
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=73)
    pm = PredictionMatrix(tuple(f"chal{i}" for i in range(73)), p)
    path = tmp_path / "p.csv"
    export_prediction_matrix(pm, path)
    back = load_prediction_matrix(path)
    assert back.probs.shape == (73, 4)
    assert back.record_ids == pm.record_ids
    assert np.array_equal(back.probs, p)


def test_missing_ids_are_listed():
    pm = PredictionMatrix(("a", "b"), np.full((2, 2), 0.5))
    with pytest.raises(KeyError, match="zz"):
        pm.rows_for(["a", "zz"])


def test_membership_file_round_trip(tmp_path):
    items = [LabeledMembership("a", 2), LabeledMembership("b", None)]
    path = tmp_path / "m.csv"
    path.write_text(memberships_to_csv(items))
    assert load_memberships(path) == items


def test_datasets_are_read_only(bundle):
    with pytest.raises(ValueError):
        bundle.challenge.features[0, 0] = 1.0
