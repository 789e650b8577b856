import numpy as np
import pytest

from debias_opt import harness as hz
from debias_opt.datasets import GroupedSplit, SpuriousSpec, gen_spurious_binary
from debias_opt.errors import DataError, DebiasOptError
from debias_opt.metrics import MetricsRow, metrics_from_predictions
from debias_opt.nn import cross_entropy, forward, model_vector
from debias_opt.rng import make_rng
from debias_opt.training import ModelConfig

SMALL = ModelConfig(hidden=(8,), lr=0.05, batch_size=32)


@pytest.fixture(scope="module")
def ds():
    return gen_spurious_binary(SpuriousSpec(n_train=300, n_val=80, n_test=80, seed=2))


# ----------------------------------------------------------------- metrics


def test_perfect_predictor(ds):
    te = ds.part("test")
    row = metrics_from_predictions(te.y, te.y, te.group, 4)
    assert row.avg_acc == 1.0 and row.wga == 1.0


def test_attribute_predictor_fails_conflicting_groups(ds):
    te = ds.part("test")
    row = metrics_from_predictions(te.group % 2, te.y, te.group, 4)
    assert row.wga == 0.0 and row.worst_group in ds.conflicting_groups()
    assert row.group_acc[0] == 1.0 and row.group_acc[3] == 1.0


def test_metrics_match_brute_force_tally():
    rng = make_rng(0, "tally")
    y, g, pred = rng.integers(0, 2, 97), rng.integers(0, 5, 97), rng.integers(0, 2, 97)
    row = metrics_from_predictions(pred, y, g, 5)
    for k in range(5):
        idx = [i for i in range(97) if g[i] == k]
        hits = sum(1 for i in idx if pred[i] == y[i])
        assert row.group_correct[k] == hits and row.group_total[k] == len(idx)
        assert row.group_acc[k] == hits / len(idx)
    assert row.avg_acc == sum(pred == y) / 97
    assert row.wga == min(row.group_acc)


def test_empty_group_rejected():
    with pytest.raises(DataError):
        metrics_from_predictions([0, 1], [0, 1], [0, 0], 2)


# --------------------------------------------------------------------- JTT


def test_unit_upweight_is_erm(ds):
    view = ds.training_view()
    erm = hz.train_erm(view, SMALL, 3, 1)
    jtt = hz.train_jtt_lite(view, SMALL, 1, 1.0, 3, 1)
    assert model_vector(erm).tobytes() == model_vector(jtt).tobytes()


def test_empty_error_set_is_erm(ds):
    view = ds.training_view()
    erm = hz.train_erm(view, SMALL, 3, 1)
    none = hz.ErrorSet.freeze(np.zeros(len(view.y), bool))
    jtt = hz.train_jtt_lite(view, SMALL, 1, 50.0, 3, 1, error_set=none)
    assert model_vector(erm).tobytes() == model_vector(jtt).tobytes()


def test_error_set_is_frozen_and_checked():
    es = hz.ErrorSet.freeze([True, False, True])
    with pytest.raises(ValueError):
        es.mask[0] = False
    es.verify()
    tampered = hz.ErrorSet(np.array([False, False, True]), es.digest)
    with pytest.raises(DebiasOptError):
        tampered.verify()


def test_jtt_argument_checks(ds):
    view = ds.training_view()
    with pytest.raises(ValueError):
        hz.train_jtt_lite(view, SMALL, 1, 0.5, 1, 0)
    with pytest.raises(ValueError):
        hz.jtt_error_set(view, SMALL, 0, 0)


# ---------------------------------------------------------------- GroupDRO


def test_group_weights_stay_on_simplex(ds):
    log = []
    hz.train_groupdro_lite(ds.part("train"), SMALL, 0.5, 2, 0, q_log=log)
    q = np.array(log)
    assert np.all(q >= 0)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, rtol=1e-14)


def test_zero_step_keeps_uniform_weights(ds):
    log = []
    hz.train_groupdro_lite(ds.part("train"), SMALL, 0.0, 1, 0, q_log=log)
    assert all(row.tolist() == [0.25] * 4 for row in log)


def test_group_with_higher_loss_gains_weight():
    # one batch, two groups; the mislabeled group has the larger loss
    rng = make_rng(0, "dro")
    X = rng.normal(size=(8, 2))
    y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    split = GroupedSplit(X, y, np.array([0] * 4 + [1] * 4), 2)
    log = []
    cfg = ModelConfig(hidden=(4,), lr=0.0, batch_size=8)
    model = hz.train_groupdro_lite(split, cfg, 1.0, 1, 0, q_log=log)
    losses = cross_entropy(forward(model, X)[0], y)
    worse = int(losses[4:].mean() > losses[:4].mean())
    assert log[0][worse] > 0.5 > log[0][1 - worse]


# --------------------------------------------------------------- sweeping


def _fake_cell(config, seed):
    wga = config["a"] / 10 + seed / 100
    row = lambda: MetricsRow("fake", seed, wga, wga, [wga, wga])
    return row(), row()


def test_single_cell_sweep():
    rows = hz.sweep(_fake_cell, {"a": [1.0]}, [0])
    assert len(rows) == 1 and rows[0].val.config == {"a": 1.0}
    assert hz.select_best(rows) == {"a": 1.0}


def test_duplicate_runs_identical(ds):
    def cell(config, seed):
        exp = hz.Experiment(hz.ExperimentConfig(student=SMALL, epochs=2), seed, dataset=ds)
        return exp.evaluate(exp.run("erm"), "erm")

    rows = hz.sweep(cell, {"x": [0, 0]}, [3])
    assert rows[0].test.group_acc == rows[1].test.group_acc


def test_sweep_records_failures_and_selects():
    def cell(config, seed):
        if config["a"] < 0:
            raise ValueError("bad")
        return _fake_cell(config, seed)

    rows = hz.sweep(cell, {"a": [-1.0, 2.0, 5.0]}, [0, 1])
    assert sum(r.error is not None for r in rows) == 2
    assert hz.select_best(rows) == {"a": 5.0}
    s = hz.summarize(rows, "fake")
    assert s["failures"] == 2 and s["n_seeds"] == 2
    assert s["wga_mean"] == pytest.approx(0.505)
    lines = hz.rows_to_csv(rows).strip().split("\n")
    assert lines[0].startswith("method,seed,a,val_wga") and "ValueError: bad" in lines[1]


def test_grid_configs_cartesian():
    got = hz.grid_configs({"b": [1, 2], "a": [0.1]})
    assert got == [{"a": 0.1, "b": 1}, {"a": 0.1, "b": 2}]


# ------------------------------------------------------------- experiments


def test_unknown_method_rejected(ds):
    exp = hz.Experiment(hz.ExperimentConfig(), 0, dataset=ds)
    with pytest.raises(ValueError):
        exp.run("mixup")


def test_group_aware_baselines_beat_erm():
    cfg = hz.ExperimentConfig()
    for seed in range(5):
        exp = hz.Experiment(cfg, seed)
        erm = exp.evaluate(exp.run("erm"), "erm")[1].wga
        for method in ("jtt", "groupdro"):
            assert exp.evaluate(exp.run(method), method)[1].wga > erm, (seed, method)
