import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from debias_opt import minmax as mm
from debias_opt.datasets import gen_multitask
from debias_opt.errors import DivergenceError, ShapeError
from debias_opt.nn import finite_diff_check
from debias_opt.rng import make_rng


def scalar_tasks():
    return mm.tasks_from_sequences([mm.quadratic_task([0.0]), mm.quadratic_task([1.0])])


# ------------------------------------------------------------------ losses


def test_bce_edge_values():
    y = np.array([0.0, 1.0, 1.0])
    assert mm.bce_from_probs(y, y) == pytest.approx(0.0, abs=1e-11)
    assert mm.bce_from_probs(np.full(3, 0.5), y) == pytest.approx(3 * math.log(2), rel=1e-15)


def test_bce_matches_high_precision():
    yhat, y = np.array([0.2, 0.7, 0.95]), np.array([0.0, 1.0, 0.0])
    want = -mp.fsum(yi * mp.log(p) + (1 - yi) * mp.log(1 - p)
                    for p, yi in zip(map(mp.mpf, map(str, yhat)), y))
    assert mm.bce_from_probs(yhat, y) == pytest.approx(float(want), rel=1e-14)


def test_bce_task_loss_gradient(rng):
    X, Y = rng.normal(size=(6, 3)), (rng.uniform(size=(6, 2)) < 0.5).astype(float)
    theta = rng.normal(size=5)
    for label in (0, 1):
        v, g = mm.bce_task_loss(theta, X, Y, label)
        assert finite_diff_check(lambda t: mm.bce_task_loss(t, X, Y, label)[0], g, theta) < 1e-6
    with pytest.raises(ShapeError):
        mm.bce_task_loss(np.zeros(3), X, Y, 0)


def test_mixture_loss_cases():
    b = scalar_tasks()
    theta = np.array([0.3])
    assert mm.mixture_loss(theta, [1.0, 0.0], b) == pytest.approx(0.09)
    assert mm.mixture_loss(theta, [0.0, 0.0], b) == 0.0
    lam = np.array([0.4, 1.7])
    assert mm.mixture_loss(theta, lam, b) == pytest.approx(0.4 * 0.09 + 1.7 * 0.49, rel=1e-15)
    with pytest.raises(ShapeError):
        mm.mixture_loss(theta, [1.0], b)


def test_worst_task_rule(rng):
    fixed = lambda v: (lambda t: (v, np.zeros(1)))
    b = mm.tasks_from_sequences([fixed(0.1), fixed(0.9)])
    assert mm.worst_task(np.zeros(1), b) == (1, 0.9)
    b = mm.tasks_from_sequences([fixed(0.5), fixed(0.5)])
    assert mm.worst_task(np.zeros(1), b)[0] == 0
    for _ in range(20):
        vals = rng.uniform(size=5)
        b = mm.tasks_from_sequences([fixed(v) for v in vals])
        scan = max(range(5), key=lambda i: (vals[i], -i))
        assert mm.worst_task(np.zeros(1), b)[0] == scan


# ----------------------------------------------------------- one-step update


def test_one_step_worked_example():
    b = scalar_tasks()
    theta, lam = np.array([0.5]), np.array([0.5, 0.5])
    hg, theta_next, j = mm.hypergradient(theta, lam, b, 0.1)
    assert theta_next.tolist() == [0.5] and j == 0
    np.testing.assert_allclose(hg, [-0.1, 0.1], rtol=1e-15)
    t2, lam2 = mm.one_step_update(theta, lam, b, 0.1, alpha2=1.0)
    # raw (0.6, 0.4), then rescaled to sum to k = 2
    np.testing.assert_allclose(lam2, [1.2, 0.8], rtol=1e-15)


def test_zero_inner_step_freezes_everything(rng):
    b = scalar_tasks()
    theta = rng.normal(size=1)
    hg, theta_next, _ = mm.hypergradient(theta, np.array([0.7, 1.3]), b, 0.0)
    assert np.all(hg == 0.0) and theta_next.tobytes() == theta.tobytes()
    _, lam = mm.one_step_update(theta, np.array([0.7, 1.3]), b, 0.0, 5.0)
    np.testing.assert_allclose(lam, [0.7, 1.3])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hypergradient_matches_finite_differences(seed):
    rng = make_rng(seed, "hg")
    k, d = 3, 2
    centers = rng.normal(size=(k, d))
    scales = rng.uniform(0.5, 2.0, k)
    b = mm.tasks_from_sequences([mm.quadratic_task(c, s) for c, s in zip(centers, scales)])
    theta, lam, a1 = rng.normal(size=d), rng.uniform(0.1, 2, k), rng.uniform(0.01, 0.3)
    j = int(rng.integers(k))
    hg, _, _ = mm.hypergradient(theta, lam, b, a1, j=j)

    def outer(v):
        grads = np.stack([g for _, g in b.train_terms(theta)])
        return b.val[j](theta - a1 * (v @ grads))[0]

    assert finite_diff_check(outer, hg, lam) < 1e-4


# ------------------------------------------------------------------ projection


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
def test_projection_invariants(values):
    lam = mm.project_weights(np.array(values), len(values))
    assert np.all(lam >= 0)
    assert lam.sum() == pytest.approx(len(values), rel=1e-12)


def test_projection_resets_and_keeps_regularizer():
    np.testing.assert_array_equal(mm.project_weights(np.array([-1.0, -2.0]), 2), [1.0, 1.0])
    lam = mm.project_weights(np.array([1.0, 3.0, -0.5]), 2)
    np.testing.assert_allclose(lam, [0.5, 1.5, 0.0])


# --------------------------------------------------------------------- gumbel


def test_gumbel_limits():
    fixed = lambda v: (lambda t: (v, np.zeros(1)))
    b = mm.tasks_from_sequences([fixed(0.1), fixed(0.9)])
    cfg = mm.GumbelConfig(gumbel_tau=1e-4, zero_noise=True)
    s, val = mm.gumbel_soft_worst(np.zeros(1), b, cfg)
    assert s[1] == pytest.approx(1.0) and val == pytest.approx(0.9)
    b2 = mm.tasks_from_sequences([fixed(0.5), fixed(0.5)])
    s, _ = mm.gumbel_soft_worst(np.zeros(1), b2, cfg, noise=np.array([0.5, -0.5]))
    assert int(np.argmax(s)) == 0 and s[0] == pytest.approx(1.0)


def test_gumbel_unit_temperature_normalizes_losses():
    s = mm.gumbel_weights([0.1, 0.9], [0.0, 0.0], 1.0)
    a, c = mp.mpf("0.1"), mp.mpf("0.9")
    want = [float(mp.exp(mp.log(a)) / (a + c)), float(mp.exp(mp.log(c)) / (a + c))]
    np.testing.assert_allclose(s, want, rtol=1e-15)
    with pytest.raises(ValueError):
        mm.gumbel_weights([0.0, 1.0], [0.0, 0.0], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_relaxed_hypergradient_matches_finite_differences(seed):
    rng = make_rng(seed, "ghg")
    b = gen_multitask(2, 20, seed=int(rng.integers(100)), noise=(0.0, 0.2))
    theta = rng.normal(0, 0.5, len(b.theta0))
    lam, a1 = rng.uniform(0.2, 2, 2), rng.uniform(0.05, 0.5)
    noise, tau = mm.standard_gumbel(rng, 2), rng.uniform(0.3, 2.0)

    def relaxed(v):
        grads = np.stack([g for _, g in b.train_terms(theta)])
        vals = b.val_losses(theta - a1 * (v @ grads))
        s = mm.gumbel_weights(vals, noise, tau)
        return float(s @ vals)

    hg, _, _ = mm.hypergradient(theta, lam, b, a1, noise=noise, gumbel_tau=tau)
    assert finite_diff_check(relaxed, hg, lam) < 1e-4


def test_gumbel_matches_hard_when_losses_are_separated():
    b = mm.tasks_from_sequences([mm.quadratic_task([0.0], 1.0), mm.quadratic_task([3.0], 4.0)])
    lam0, theta0 = np.ones(2), np.array([0.0])
    _, _, hard = mm.direct_method_train(b, lam0, theta0, 40, 0.02, 0.01)
    _, _, soft = mm.direct_method_train(b, lam0, theta0, 40, 0.02, 0.01, mode="gumbel",
                                        gumbel=mm.GumbelConfig(1e-4, zero_noise=True))
    gaps = [abs(math.log(v[0] / v[1])) for v in hard.val_losses]
    assert min(gaps) > 0.05  # far from any tie
    assert hard.worst == soft.worst
    np.testing.assert_allclose(np.array(soft.theta), np.array(hard.theta), rtol=0, atol=1e-6)
    np.testing.assert_allclose(np.array(soft.lam), np.array(hard.lam), rtol=0, atol=1e-6)


# ------------------------------------------------------------------ training


def test_single_task_reduces_to_plain_descent():
    b = mm.tasks_from_sequences([mm.quadratic_task([2.0, -1.0], 0.7)])
    theta0 = np.array([0.5, 0.5])
    theta, lam, trace = mm.direct_method_train(b, np.ones(1), theta0, 25, 0.1, 3.0)
    plain = theta0.copy()
    for _ in range(25):
        plain = plain - 0.1 * b.train[0](plain)[1]
    assert theta.tobytes() == plain.tobytes()
    assert all(l.tolist() == [1.0] for l in trace.lam)
    fixed, _ = mm.fixed_weight_train(b, np.ones(1), theta0, 25, 0.1)
    assert fixed.tobytes() == plain.tobytes()


def test_imbalanced_quadratics_lower_worst_loss():
    b = mm.tasks_from_sequences([mm.quadratic_task([0.0], 1.0), mm.quadratic_task([2.0], 0.2)],
                                theta0=[0.0])
    r = mm.run_comparison(b, 200, 0.05, 0.5)
    assert r["learned_max_val"] < r["uniform_max_val"]


def test_trace_csv_and_one_based_index():
    b = scalar_tasks()
    _, _, trace = mm.direct_method_train(b, np.ones(2), np.array([0.9]), 3, 0.1, 0.1)
    lines = trace.to_csv().strip().split("\n")
    assert lines[0] == "iter,j_t,max_val_loss,min_val_loss,lambda_1,lambda_2"
    assert lines[1].split(",")[1] == str(trace.worst[0] + 1)


def test_divergence_raises():
    b = mm.tasks_from_sequences([mm.quadratic_task([0.0], 1.0), mm.quadratic_task([1.0], 1.0)])
    with pytest.raises(DivergenceError):
        mm.direct_method_train(b, np.ones(2), np.array([1.0]), 200, 5.0, 0.1)


def test_argument_validation():
    b = scalar_tasks()
    with pytest.raises(ValueError):
        mm.direct_method_train(b, np.ones(2), np.zeros(1), 0, 0.1, 0.1)
    with pytest.raises(ValueError):
        mm.direct_method_train(b, np.ones(2), np.zeros(1), 3, 0.1, 0.1, mode="soft")
