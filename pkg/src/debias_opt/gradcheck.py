"""Finite-difference audit of every hand-written gradient in the package.

Each target draws small random instances, rejects points within ``KINK_GAP``
of a non-differentiable boundary, and compares the analytic gradient with a
central difference.  ``run_suite`` reports the worst relative error per
target.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .minmax import MultiTaskData, hypergradient, standard_gumbel
from .rng import make_rng
from .saddle import LabelModelBank, MultiLabelDataset, PrivilegedPartition, lagrangian, primal_gradient

KINK_GAP = 1e-3
STEP = 1e-5


def _draw(rng, sample, accept):
    for _ in range(1000):
        inst = sample(rng)
        if accept(inst):
            return inst
    raise RuntimeError("could not draw a kink-safe instance")


def check_cross_entropy(rng) -> float:
    B, K = rng.integers(1, 5), rng.integers(2, 6)
    z = rng.normal(0, 2, (B, K))
    y = rng.integers(0, K, B)
    return nn.finite_diff_check(lambda v: nn.cross_entropy(v, y).sum(),
                                nn.cross_entropy_grad(z, y), z, STEP)


def check_kd(rng) -> float:
    def sample(r):
        K = r.integers(2, 6)
        return r.normal(0, 2, (3, K)), r.normal(0, 2, (3, K)), r.uniform(0.5, 4.0)

    # the loss is clamped at 0; stay away from the clamp
    s, t, tau = _draw(rng, sample, lambda i: nn.kd_loss(*i).min() > 1e-6)
    return nn.finite_diff_check(lambda v: nn.kd_loss(v, t, tau).sum(),
                                nn.kd_grad(s, t, tau), s, STEP)


def check_bce(rng) -> float:
    z = rng.normal(0, 3, 5)
    t = rng.uniform(0, 1, 5)
    return nn.finite_diff_check(lambda v: nn.bce_loss(v, t).sum(), nn.bce_grad(z, t), z, STEP)


def check_hinge(rng) -> float:
    def sample(r):
        return r.normal(0, 2, 6), r.choice([-1.0, 1.0], 6)

    s, y = _draw(rng, sample, lambda i: np.abs(i[0] * i[1] - 1.0).min() > KINK_GAP)
    return nn.finite_diff_check(lambda v: nn.hinge_loss(v, y).sum(), nn.hinge_grad(s, y), s, STEP)


def _mlp_instance(rng):
    def sample(r):
        sizes = [int(r.integers(2, 5)), int(r.integers(3, 6)), int(r.integers(3, 6)),
                 int(r.integers(2, 4))]
        model = nn.init_mlp(sizes, r)
        for layer in model.layers:
            layer.b[...] = r.normal(0, 0.1, layer.b.shape)
        x = r.normal(0, 1, (3, sizes[0]))
        y = r.integers(0, sizes[-1], 3)
        return model, x, y

    def safe(inst):
        model, x, _ = inst
        h = x
        for layer in model.layers[:-1]:
            z = h @ layer.W + layer.b
            if np.abs(z).min() <= KINK_GAP:
                return False
            h = np.maximum(z, 0.0)
        return True

    return _draw(rng, sample, safe)


def check_mlp_params(rng) -> float:
    model, x, y = _mlp_instance(rng)
    logits, taps = nn.forward(model, x)
    grads = nn.backward(model, nn.cross_entropy_grad(logits, y), x, taps)
    probe = model.copy()

    def f(vec):
        nn.set_model_vector(probe, vec)
        return nn.cross_entropy(nn.forward(probe, x)[0], y).sum()

    return nn.finite_diff_check(f, nn.gradients_vector(grads), nn.model_vector(model), STEP)


def check_mlp_input(rng) -> float:
    model, x, y = _mlp_instance(rng)
    logits, taps = nn.forward(model, x)
    grads = nn.backward(model, nn.cross_entropy_grad(logits, y), x, taps)
    return nn.finite_diff_check(lambda v: nn.cross_entropy(nn.forward(model, v)[0], y).sum(),
                                grads.dx, x, STEP)


def _score_gaps(W, data):
    Z = data.X @ W.T
    gaps = []
    for i in range(data.n):
        pos = Z[i, data.Y[i] > 0]
        neg = Z[i, data.Y[i] < 0]
        if pos.size and neg.size:
            gaps.append(np.abs(neg[None, :] - pos[:, None]).min())
    return min(gaps) if gaps else np.inf


def check_lagrangian(rng) -> float:
    def sample(r):
        n, m, T = 6, int(r.integers(2, 5)), int(r.integers(3, 6))
        X = r.normal(0, 1, (n, m))
        Y = r.choice([-1.0, 1.0], (n, T))
        data = MultiLabelDataset(X, Y)
        part = PrivilegedPartition.from_privileged(list(range(int(r.integers(1, T)))), T)
        bank = LabelModelBank(r.normal(0, 1, (T, m)), r.normal(0, 1, (T, m)),
                              r.uniform(0, 2, len(part.P_bar)), eps=0.1)
        return data, part, bank

    data, part, bank = _draw(rng, sample, lambda i: _score_gaps(i[2].W, i[0]) > KINK_GAP)
    return nn.finite_diff_check(lambda W: lagrangian(bank.replace(W=W), data, part),
                                primal_gradient(bank, data, part), bank.W, STEP)


def _task_instance(rng):
    k, d, n = int(rng.integers(2, 4)), 3, 8
    X = rng.normal(0, 1, (n, d))
    Xv = rng.normal(0, 1, (n, d))
    data = MultiTaskData(X, (rng.uniform(size=(n, k)) < 0.5).astype(float),
                         Xv, (rng.uniform(size=(n, k)) < 0.5).astype(float))
    bundle = data.bundle(l2=bool(rng.integers(0, 2)))
    theta = rng.normal(0, 1, d + k)
    lam = rng.uniform(0.2, 2.0, bundle.n_weights)
    return bundle, theta, lam, rng.uniform(0.1, 1.0)


def _lookahead(bundle, theta, lam, alpha1):
    grads = np.stack([g for _, g in bundle.train_terms(theta)])
    return theta - alpha1 * (lam @ grads)


def check_hypergradient(rng) -> float:
    bundle, theta, lam, a1 = _task_instance(rng)
    j = int(rng.integers(0, bundle.k))
    hg, _, _ = hypergradient(theta, lam, bundle, a1, j=j)
    return nn.finite_diff_check(lambda v: bundle.val[j](_lookahead(bundle, theta, v, a1))[0],
                                hg, lam, STEP)


def check_gumbel_hypergradient(rng) -> float:
    bundle, theta, lam, a1 = _task_instance(rng)
    noise = standard_gumbel(rng, bundle.k)
    tau = rng.uniform(0.3, 2.0)

    def relaxed(v):
        vals = bundle.val_losses(_lookahead(bundle, theta, v, a1))
        z = (np.log(vals) + noise) / tau
        s = np.exp(z - z.max())
        return float((s / s.sum()) @ vals)

    hg, _, _ = hypergradient(theta, lam, bundle, a1, noise=noise, gumbel_tau=tau)
    return nn.finite_diff_check(relaxed, hg, lam, STEP)


TARGETS: dict[str, Callable[[np.random.Generator], float]] = {
    "nn.cross_entropy": check_cross_entropy,
    "nn.kd_loss": check_kd,
    "nn.bce_loss": check_bce,
    "nn.hinge_loss": check_hinge,
    "nn.mlp_params": check_mlp_params,
    "nn.mlp_input": check_mlp_input,
    "saddle.lagrangian": check_lagrangian,
    "minmax.hypergradient": check_hypergradient,
    "minmax.gumbel_hypergradient": check_gumbel_hypergradient,
}


def run_suite(instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per target over ``instances`` random draws."""
    out = {}
    for name, check in TARGETS.items():
        rng = make_rng(seed, "gradcheck", name)
        out[name] = max(check(rng) for _ in range(instances))
    return out
