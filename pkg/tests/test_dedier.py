import math

import mpmath as mp
import numpy as np
import pytest

from debias_opt import dedier as dd
from debias_opt.datasets import GroupedSplit, LabeledView, SpuriousSpec, gen_spurious_binary
from debias_opt.errors import DivergenceError, ShapeError
from debias_opt.harness import teacher_logits_for, train_erm, train_kd
from debias_opt.nn import Layer, MlpModel, init_mlp, model_vector
from debias_opt.rng import make_rng
from debias_opt.training import ModelConfig, build_model, run_epoch

CFG = ModelConfig(hidden=(8, 8), lr=0.05, batch_size=32)


@pytest.fixture(scope="module")
def small():
    ds = gen_spurious_binary(SpuriousSpec(n_train=200, n_val=80, n_test=80, seed=3))
    tr = ds.part("train")
    teacher = train_erm(tr.view(), ModelConfig(hidden=(16,), lr=0.05, batch_size=32), 3, 0)
    return ds, tr, teacher_logits_for(teacher, tr.X)


def separable(n, rng, flip=False):
    y = rng.integers(0, 2, n)
    X = np.zeros((n, 2))
    X[np.arange(n), y] = 5.0 + rng.uniform(0, 1, n)
    return LabeledView(X, 1 - y if flip else y)


def identity_tap_model(rng):
    return MlpModel([Layer(np.eye(2), np.zeros(2), "relu"),
                     Layer(rng.normal(size=(2, 2)), np.zeros(2), "identity")])


# ----------------------------------------------------------- weight formula


def test_confidence_margin_cases():
    assert dd.confidence_margin([0.7, 0.2, 0.1]) == pytest.approx(0.5, rel=1e-15)
    assert dd.confidence_margin([1 / 3] * 3) == pytest.approx(0.0, abs=1e-16)
    assert dd.confidence_margin([0.99, 0.01]) == pytest.approx(0.98, rel=1e-15)
    rows = dd.confidence_margin(np.array([[0.6, 0.4], [0.1, 0.9]]))
    np.testing.assert_allclose(rows, [0.2, 0.8], rtol=1e-14)
    with pytest.raises(ShapeError):
        dd.confidence_margin([1.0])


def test_instance_weight_values():
    assert dd.instance_weight([0.9, 0.1], 0, 0, 0.1, 4.0) == 1.0
    assert dd.instance_weight([1.0, 0.0], 0, 1, 0.5, 4.0) == pytest.approx(math.e ** 4, rel=1e-15)
    want = float(mp.exp(4 * mp.mpf("0.5") ** mp.mpf("0.1")))
    got = dd.instance_weight([0.75, 0.25], 0, 1, 0.1, 4.0)
    assert got == pytest.approx(want, rel=1e-14) and 41.7 < got < 41.8


def test_instance_weight_range(rng):
    p = rng.dirichlet(np.ones(3), 500)
    pred = np.argmax(p, axis=1)
    y = rng.integers(0, 3, 500)
    wt = dd.instance_weight(p, pred, y, 0.3, 2.5)
    assert np.all(wt >= 1.0) and np.all(wt <= math.exp(2.5) * (1 + 1e-15))
    assert np.all(wt[pred == y] == 1.0)


def test_weighting_curve_shape_and_order():
    c = dd.weighting_curve(1.0, 1.0, 100)
    assert c.shape == (100, 2) and c[0, 0] > 0 and c[-1, 0] == 1.0
    assert np.all(np.diff(c[:, 1]) > 0)
    np.testing.assert_allclose(c[:, 1], np.exp(c[:, 0]), rtol=1e-15)
    spot = dd.weighting_curve(1.0, math.log(2.0), 4)
    np.testing.assert_allclose(spot[:, 1], 2.0 ** spot[:, 0], rtol=1e-14)
    # below cm = 1 a smaller exponent pushes the weight up faster
    lo, hi = dd.weighting_curve(0.05, 4.0)[:-1, 1], dd.weighting_curve(1.0, 4.0)[:-1, 1]
    assert np.all(lo > hi)
    with pytest.raises(ValueError):
        dd.weighting_curve(1.0, 1.0, 1)


def test_params_validation():
    dd.WeightingParams().validate(3)
    for bad in (dict(alpha=0.0), dict(beta=-1.0), dict(kd_mix=1.5), dict(kd_temperature=0.0),
                dict(retrain_interval=0), dict(aux_epochs=0)):
        with pytest.raises(ValueError):
            dd.WeightingParams(**bad).validate(3)
    with pytest.raises(ValueError):
        dd.WeightingParams(aux_position=3).validate(3)


# ---------------------------------------------------------------- aux head


def test_train_aux_validation(rng):
    model = init_mlp([2, 4, 4, 2], rng)
    view = separable(20, rng)
    for depth in (0, 3):
        with pytest.raises(ValueError):
            dd.train_aux(model, depth, view)
    with pytest.raises(ValueError):
        dd.train_aux(model, 1, view, epochs=0)


def test_train_aux_leaves_student_untouched(rng):
    model = init_mlp([2, 6, 6, 2], rng)
    before = model_vector(model).tobytes()
    dd.train_aux(model, 2, separable(50, rng), epochs=3, rng=make_rng(0, "t"))
    assert model_vector(model).tobytes() == before


def test_separable_features_read_without_error(rng):
    model = identity_tap_model(rng)
    view = separable(200, rng)
    aux = dd.train_aux(model, 1, view, epochs=5, rng=make_rng(1, "t"))
    w = dd.compute_weights(model, aux, view, 0.1, 4.0)
    assert np.all(w.aux_correct) and np.all(w.weight == 1.0)


def test_all_wrong_readout_gets_formula_weights(rng):
    model = identity_tap_model(rng)
    view = separable(200, rng)
    aux = dd.train_aux(model, 1, view, epochs=5, rng=make_rng(1, "t"))
    flipped = LabeledView(view.X, 1 - view.y)
    w = dd.compute_weights(model, aux, flipped, 0.1, 4.0)
    assert not np.any(w.aux_correct)
    np.testing.assert_allclose(w.weight, np.exp(4.0 * w.margin ** 0.1), rtol=1e-15)


# ---------------------------------------------------------------- distill


def _weighted(view, wt):
    n = len(view.y)
    return dd.WeightedDataset(view.X, view.y, np.asarray(wt, float), np.zeros(n, int), np.zeros(n))


def test_unit_weights_match_plain_distillation(small):
    _, tr, tl = small
    view = tr.view()
    a = build_model(view.X.shape[1], 2, CFG, 0)
    b = a.copy()
    order = make_rng(0, "order").permutation(len(view.y))
    dd.distill_epoch(a, tl, _weighted(view, np.ones(len(view.y))), 0.6, 2.0, 0.05, 32, order)
    n = len(view.y)
    run_epoch(b, view.X, view.y, order, 32, 0.05, ce_weight=np.full(n, 0.4),
              kd_weight=np.full(n, 0.6), teacher_logits=tl, tau=2.0)
    assert model_vector(a).tobytes() == model_vector(b).tobytes()


def test_zero_kd_mix_is_erm(small):
    _, tr, tl = small
    view = tr.view()
    n = len(view.y)
    a = build_model(view.X.shape[1], 2, CFG, 0)
    b = a.copy()
    order = np.arange(n)
    dd.distill_epoch(a, tl, _weighted(view, make_rng(0, "w").uniform(1, 5, n)), 0.0, 1.0, 0.05, 32)
    run_epoch(b, view.X, view.y, order, 32, 0.05, ce_weight=np.ones(n),
              kd_weight=np.zeros(n), teacher_logits=tl)
    assert model_vector(a).tobytes() == model_vector(b).tobytes()


def test_doubling_weight_doubles_kd_step(small):
    _, tr, tl = small
    view = LabeledView(tr.X[:1], tr.y[:1])
    base = build_model(view.X.shape[1], 2, CFG, 0)
    steps = []
    for w in (1.0, 2.0):
        m = base.copy()
        dd.distill_epoch(m, tl[:1], _weighted(view, [w]), 1.0, 1.0, 0.05, 1)
        steps.append(model_vector(m) - model_vector(base))
    np.testing.assert_allclose(steps[1], 2 * steps[0], rtol=1e-9, atol=1e-15)
    assert np.abs(steps[0]).max() > 0


# -------------------------------------------------------------- main loop


def test_zero_epochs_leaves_student_unchanged(small):
    _, tr, tl = small
    student = build_model(tr.X.shape[1], 2, CFG, 0)
    before = model_vector(student).tobytes()
    res = dd.dedier_train(student, tl, tr.view(), dd.WeightingParams(), 0, CFG, 0)
    assert model_vector(res.student).tobytes() == before and res.trace == []


def test_long_interval_keeps_initial_weights(small):
    _, tr, tl = small
    student = build_model(tr.X.shape[1], 2, CFG, 0)
    params = dd.WeightingParams(retrain_interval=10)
    res = dd.dedier_train(student, tl, tr.view(), params, 3, CFG, 0, train_groups=tr.group)
    assert len(res.reports) == 1
    for g in range(4):
        vals = {rec[f"group_{g}_mean_weight"] for rec in res.trace}
        assert len(vals) == 1


def test_unit_reweigher_reproduces_plain_distillation(small):
    _, tr, tl = small
    view = tr.view()
    params = dd.WeightingParams(kd_mix=0.7, kd_temperature=2.0)
    student = build_model(view.X.shape[1], 2, CFG, 5)
    res = dd.dedier_train(student, tl, view, params, 3, CFG, 5,
                          reweigher=lambda e, m: np.ones(len(view.y)))
    ref = train_kd(view, tl, CFG, 0.7, 2.0, 3, 5)
    assert model_vector(res.student).tobytes() == model_vector(ref).tobytes()


def test_non_finite_weights_raise(small):
    _, tr, tl = small
    student = build_model(tr.X.shape[1], 2, CFG, 0)
    bad = lambda e, m: np.full(len(tr.y), np.nan)
    with pytest.raises(DivergenceError):
        dd.dedier_train(student, tl, tr.view(), dd.WeightingParams(), 2, CFG, 0, reweigher=bad)


def test_teacher_shape_checked(small):
    _, tr, tl = small
    student = build_model(tr.X.shape[1], 2, CFG, 0)
    with pytest.raises(ShapeError):
        dd.dedier_train(student, tl[:-1], tr.view(), dd.WeightingParams(), 1, CFG, 0)


def test_group_trace_csv_layout(small):
    _, tr, tl = small
    student = build_model(tr.X.shape[1], 2, CFG, 0)
    res = dd.dedier_train(student, tl, tr.view(), dd.WeightingParams(), 2, CFG, 0,
                          train_groups=tr.group)
    lines = dd.group_trace_to_csv(res.trace, 4).strip().split("\n")
    assert lines[0] == "epoch,group,mean_weight,acc_final,error_aux"
    assert len(lines) == 1 + 2 * 4
    assert dd.group_trace_to_csv([], 4) == "epoch,group,mean_weight,acc_final,error_aux\n"
    w = res.final_weights
    np.testing.assert_allclose([float(l.split(",")[2]) for l in lines[-4:]],
                               dd.group_mean_weights(w, tr.group, 4), rtol=1e-15)


# ------------------------------------------------------------------ probe


def test_probe_on_random_labels_is_chance():
    rng = make_rng(7, "null")
    n = 2000
    split = GroupedSplit(rng.normal(size=(n, 6)), rng.integers(0, 2, n), rng.integers(0, 4, n), 4)
    model = init_mlp([6, 16, 16, 2], rng)
    for rep in dd.readout_probe(model, split, [1, 2, 3]):
        err = rep.n_errors / n
        assert abs(err - 0.5) < 4 * math.sqrt(0.25 / n)
        assert rep.error_share.sum() == pytest.approx(1.0)


def test_probe_rejects_bad_depth(rng):
    model = init_mlp([2, 3, 2], rng)
    split = GroupedSplit(np.zeros((4, 2)), np.zeros(4, int), np.zeros(4, int), 1)
    with pytest.raises(ValueError):
        dd.readout_probe(model, split, [3])
