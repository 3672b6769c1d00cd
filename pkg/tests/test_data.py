import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sharpopt.data import (CsvFormatError, CsvSchema, Dataset, batches, load_csv, make_blobs,
                           make_linreg, make_two_moons, save_csv)
from sharpopt.models import MlpSpec
from sharpopt.optimizers import TrainConfig, TrainerMode, train
from sharpopt.rng import Rng


def test_two_moons_noise_free_points_lie_on_half_circles():
    ds = make_two_moons(200, 0.0, 3)
    raw = ds.inputs * ds.meta["scale"] + ds.meta["shift"]
    upper = raw[ds.targets == 0]
    lower = raw[ds.targets == 1] - np.array([1.0, 0.5])
    np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(lower, axis=1), 1.0, atol=1e-12)
    assert np.all(upper[:, 1] >= -1e-12) and np.all(lower[:, 1] <= 1e-12)


def test_two_moons_standardized_and_balanced():
    ds = make_two_moons(501, 0.2, 0)
    np.testing.assert_allclose(ds.inputs.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(ds.inputs.std(axis=0), 1.0, atol=1e-12)
    assert abs(int(np.sum(ds.targets == 0)) - int(np.sum(ds.targets == 1))) <= 1


def test_two_moons_determinism_and_disjoint_splits():
    a, b = make_two_moons(100, 0.2, 4), make_two_moons(100, 0.2, 4)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    test = make_two_moons(100, 0.2, 4, "test", reference=a)
    assert not np.any(np.all(np.isclose(a.inputs[:, None], test.inputs[None]), axis=2))
    np.testing.assert_array_equal(test.meta["shift"], a.meta["shift"])


def test_two_moons_validation():
    with pytest.raises(ValueError):
        make_two_moons(1, 0.1)
    with pytest.raises(ValueError):
        make_two_moons(10, -0.1)
    with pytest.raises(ValueError):
        make_two_moons(10, 0.1, split="dev")


def test_linear_model_trails_mlp_on_two_moons():
    tr = make_two_moons(2000, 0.2, 0)
    te = make_two_moons(2000, 0.2, 0, "test", reference=tr)
    cfg = TrainConfig(epochs=10, batch_size=64, seed=0, lr=0.01)
    lin = train(MlpSpec((2, 2)), cfg, tr, te, TrainerMode("base"))
    mlp = train(MlpSpec((2, 32, 2)), cfg, tr, te, TrainerMode("base"))
    assert lin.evaluation.final.test_metric < mlp.evaluation.final.test_metric


def test_blobs_are_separable():
    tr = make_blobs(200, 3, 1.0, 0)
    te = make_blobs(200, 3, 1.0, 0, "test")
    res = train(MlpSpec((3, 2)), TrainConfig(epochs=20, batch_size=32, lr=0.05), tr, te,
                TrainerMode("base"))
    assert res.evaluation.final.test_metric == 1.0


def test_linreg_noise_free_is_realizable():
    tr = make_linreg(128, 3, 0.0, 0)
    te = make_linreg(64, 3, 0.0, 0, "test")
    res = train(MlpSpec((3, 1), output_head="mse"),
                TrainConfig(epochs=100, batch_size=32, optimizer="sgd", lr=0.1), tr, te,
                TrainerMode("base"))
    assert res.evaluation.final.train_loss < 1e-6


def test_linreg_recovers_true_map():
    noise, n = 0.1, 2000
    tr = make_linreg(n, 3, noise, 1)
    te = make_linreg(100, 3, noise, 1, "test")
    np.testing.assert_array_equal(tr.meta["A"], te.meta["A"])
    res = train(MlpSpec((3, 1), output_head="mse"),
                TrainConfig(epochs=30, batch_size=50, optimizer="sgd", lr=0.05, seed=1), tr, te,
                TrainerMode("base"))
    assert np.max(np.abs(res.w["W0"].T - tr.meta["A"])) < 3 * noise / np.sqrt(n)


def test_batch_sizes_keep_short_final_batch():
    ds = make_two_moons(10, 0.1, 0)
    assert [len(b) for b in batches(ds, 3, Rng(0))] == [3, 3, 3, 1]


def test_batches_without_shuffle_keep_order():
    ds = make_two_moons(7, 0.1, 0)
    ids = [i for b in batches(ds, 3, shuffle=False) for i in b.instance_ids]
    assert ids == list(range(7))
    first = next(iter(batches(ds, 3, shuffle=False)))
    np.testing.assert_array_equal(first.inputs, ds.inputs[:3])


@given(st.integers(1, 60), st.integers(1, 20), st.integers(0, 1000))
def test_epoch_partitions_instances(m, n, seed):
    ds = Dataset(np.arange(m, dtype=float)[:, None], np.zeros(m, dtype=np.int64))
    ids = [i for b in batches(ds, n, Rng(seed)) for i in b.instance_ids]
    assert sorted(ids) == list(range(m))


def test_batching_rejects_bad_size():
    with pytest.raises(ValueError):
        list(batches(make_two_moons(4, 0.1), 0, Rng(0)))


def test_csv_round_trip_bit_identical(tmp_path):
    ds = Dataset(np.array([[0.1, 1 / 3], [-2.5e-300, 7.0], [np.pi, -0.0]]), np.array([0, 2, 1]))
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path)
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.targets, ds.targets)
    assert back.targets.dtype == np.int64


def test_csv_regression_round_trip(tmp_path):
    ds = make_linreg(5, 2, 0.1, 0)
    save_csv(ds, tmp_path / "r.csv", target="y")
    back = load_csv(tmp_path / "r.csv", CsvSchema("y", "regression"))
    np.testing.assert_array_equal(back.targets, ds.targets[:, 0])
    assert back.inputs.tobytes() == ds.inputs.tobytes()


def test_csv_preserves_row_order(tmp_path):
    path = tmp_path / "o.csv"
    path.write_text("b,target,a\n3,1,4\n1,0,5\n")
    ds = load_csv(path)
    np.testing.assert_array_equal(ds.inputs, [[3, 4], [1, 5]])
    np.testing.assert_array_equal(ds.targets, [1, 0])


@pytest.mark.parametrize("text, match", [
    ("x0,x1\n1,2\n", "'target' not found"),
    ("x0,target\n1,0\n1,2,3\n", r":3: expected 2 fields, found 3"),
    ("x0,target\n1,0\nabc,1\n", r":3: column 'x0' is not numeric"),
    ("x0,target\n1,0.5\n", r":2: class label"),
    ("", "empty file"),
    ("x0,target\n", "no data rows"),
])
def test_csv_errors_are_descriptive(tmp_path, text, match):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(CsvFormatError, match=match):
        load_csv(path)
