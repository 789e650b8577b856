"""Worst-case loss weighting with a one-step lookahead hypergradient.

Given task losses ``L_1..L_k`` on shared parameters ``theta``, the mixture

    M_lam(theta) = sum_i lam_i L_i(theta)  [+ lam_{k+1} Omega(theta)]

is trained on the train split, and ``lam`` is moved to shrink the largest
validation loss after one inner step.  Because the mixture is linear in
``lam``, the lookahead hypergradient has the closed form

    d/d lam_i  V(theta - a1 grad M_lam(theta)) = -a1 <grad L_i(theta), grad V(theta')>

where ``V`` is either the validation loss of the current worst task (hard
mode) or its Gumbel-softmax relaxation.

Task losses are callables ``theta -> (value, gradient)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, ShapeError

LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

LOG_FLOOR = 1e-12
PROB_CLAMP = 1e-12
DIVERGENCE_LIMIT = 1e12


@dataclass
class TaskBundle:
    train: list[LossFn]
    val: list[LossFn]
    regularizer: LossFn | None = None
    theta0: np.ndarray | None = None

    def __post_init__(self):
        if len(self.train) != len(self.val) or not self.train:
            raise ShapeError("train and validation task lists must be non-empty and aligned")

    @property
    def k(self) -> int:
        return len(self.train)

    @property
    def n_weights(self) -> int:
        return self.k + (self.regularizer is not None)

    def train_terms(self, theta):
        terms = [fn(theta) for fn in self.train]
        if self.regularizer is not None:
            terms.append(self.regularizer(theta))
        return terms

    def val_losses(self, theta) -> np.ndarray:
        return np.array([fn(theta)[0] for fn in self.val])


@dataclass
class GumbelConfig:
    gumbel_tau: float = 1.0
    noise_seed: int = 0
    zero_noise: bool = False

    def __post_init__(self):
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")


@dataclass
class MinmaxTrace:
    worst: list[int] = field(default_factory=list)
    val_losses: list[np.ndarray] = field(default_factory=list)
    lam: list[np.ndarray] = field(default_factory=list)
    theta: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.worst)

    def to_csv(self) -> str:
        n_lam = len(self.lam[0]) if self.lam else 0
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "j_t", "max_val_loss", "min_val_loss"]
                   + [f"lambda_{i + 1}" for i in range(n_lam)])
        for t in range(len(self)):
            v = self.val_losses[t]
            w.writerow([t + 1, self.worst[t] + 1, repr(float(v.max())), repr(float(v.min()))]
                       + [repr(float(x)) for x in self.lam[t]])
        return buf.getvalue()


# ------------------------------------------------------------ task losses


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def bce_from_probs(yhat, y) -> float:
    """Negated log-likelihood ``-sum[y log yhat + (1-y) log(1-yhat)]``."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = np.clip(yhat, PROB_CLAMP, 1.0)
    q = np.clip(1.0 - yhat, PROB_CLAMP, 1.0)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(q)).sum())


def multitask_logits(theta, X, k: int) -> np.ndarray:
    """Shared linear score plus one bias per task: ``(n, k)`` logits.

    ``theta`` packs ``[w (d), b (k)]``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    d = X.shape[1]
    if theta.shape != (d + k,):
        raise ShapeError(f"theta has shape {theta.shape}, expected {(d + k,)}")
    return (X @ theta[:d])[:, None] + theta[d:][None, :]


def bce_task_loss(theta, X, Y, label: int, reduction: str = "sum"):
    """BCE of task ``label`` under the shared-score model, with its gradient."""
    k = Y.shape[1]
    yhat = sigmoid(multitask_logits(theta, X, k)[:, label])
    y = Y[:, label]
    value = bce_from_probs(yhat, y)
    r = yhat - y
    grad = np.zeros_like(np.asarray(theta, dtype=np.float64))
    grad[: X.shape[1]] = X.T @ r
    grad[X.shape[1] + label] = r.sum()
    if reduction == "mean":
        value /= X.shape[0]
        grad /= X.shape[0]
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return value, grad


def squared_norm(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return 0.5 * float(theta @ theta), theta.copy()


def quadratic_task(center, scale=1.0) -> LossFn:
    """``scale * ||theta - center||^2``; handy for tests and demos."""
    c = np.asarray(center, dtype=np.float64)

    def fn(theta):
        r = np.asarray(theta, dtype=np.float64) - c
        return scale * float(r @ r), 2.0 * scale * r

    return fn


# ---------------------------------------------------------------- pieces


def mixture_loss(theta, lam, bundle: TaskBundle) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (bundle.n_weights,):
        raise ShapeError(f"need {bundle.n_weights} weights, got {lam.shape}")
    values = np.array([v for v, _ in bundle.train_terms(theta)])
    return float(lam @ values)


def mixture_gradient(theta, lam, bundle: TaskBundle):
    terms = bundle.train_terms(theta)
    grads = np.stack([g for _, g in terms])
    return np.asarray(lam, dtype=np.float64) @ grads, grads


def worst_task(theta, bundle: TaskBundle) -> tuple[int, float]:
    """Index and value of the largest validation loss (lowest index on ties)."""
    losses = bundle.val_losses(theta)
    j = int(np.argmax(losses))
    return j, float(losses[j])


def standard_gumbel(rng: np.random.Generator, size) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=size)
    return -np.log(-np.log(u))


def gumbel_weights(val_losses, noise, tau: float) -> np.ndarray:
    v = np.asarray(val_losses, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("validation losses must be positive (apply the floor first)")
    z = (np.log(v) + np.asarray(noise, dtype=np.float64)) / tau
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def gumbel_soft_worst(theta, bundle: TaskBundle, cfg: GumbelConfig, noise=None):
    """Soft selection ``s`` over tasks and the relaxed worst value ``sum s_i M_i``."""
    losses = np.maximum(bundle.val_losses(theta), LOG_FLOOR)
    if noise is None:
        noise = (np.zeros(bundle.k) if cfg.zero_noise
                 else standard_gumbel(np.random.default_rng(cfg.noise_seed), bundle.k))
    s = gumbel_weights(losses, noise, cfg.gumbel_tau)
    return s, float(s @ losses)


def _relaxed_val_grad(theta, bundle, noise, tau):
    vals, grads = [], []
    for fn in bundle.val:
        v, g = fn(theta)
        vals.append(max(v, LOG_FLOOR))
        grads.append(g)
    vals = np.array(vals)
    grads = np.stack(grads)
    s = gumbel_weights(vals, noise, tau)
    mean = s @ vals
    # d/dtheta sum_i s_i M_i, with s_i depending on theta through log M_i
    coef = s + s * (vals - mean) / (tau * vals)
    return coef @ grads


def hypergradient(theta, lam, bundle: TaskBundle, alpha1: float, j: int | None = None,
                  noise=None, gumbel_tau: float | None = None):
    """Exact gradient in ``lam`` of the validation objective after one inner step.

    Hard mode (``gumbel_tau is None``) differentiates ``M_j^val`` with ``j``
    frozen; if ``j`` is not given it is chosen at the lookahead point.
    Returns ``(hypergradient, theta_lookahead, j)``.
    """
    g_mix, g_terms = mixture_gradient(theta, lam, bundle)
    theta_next = theta - alpha1 * g_mix
    if gumbel_tau is None:
        if j is None:
            j, _ = worst_task(theta_next, bundle)
        _, g_val = bundle.val[j](theta_next)
    else:
        g_val = _relaxed_val_grad(theta_next, bundle, noise, gumbel_tau)
        if j is None:
            j, _ = worst_task(theta_next, bundle)
    return -alpha1 * (g_terms @ g_val), theta_next, j


def project_weights(lam, k: int) -> np.ndarray:
    """Clamp to ``>= 0`` and rescale the first ``k`` (task) weights to sum ``k``.

    A regularizer weight in slot ``k`` is only clamped.  If every task
    weight hits zero the task weights reset to uniform.
    """
    lam = np.maximum(np.asarray(lam, dtype=np.float64), 0.0)
    total = lam[:k].sum()
    if k == 1:
        lam[0] = 1.0  # the only point of the set; rescaling can miss it by an ulp
    elif total > 0:
        lam[:k] = lam[:k] * (k / total)
    else:
        lam[:k] = 1.0
    return lam


def one_step_update(theta, lam, bundle: TaskBundle, alpha1: float, alpha2: float):
    """One parameter step and one weight step: returns ``(theta', lam')``."""
    theta = np.asarray(theta, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    hg, theta_next, _ = hypergradient(theta, lam, bundle, alpha1)
    if not (np.all(np.isfinite(hg)) and np.all(np.isfinite(theta_next))):
        raise DivergenceError("non-finite gradient in one_step_update")
    return theta_next, project_weights(lam - alpha2 * hg, bundle.k)


def direct_method_train(bundle: TaskBundle, lam0, theta0, iters: int, alpha1: float,
                        alpha2: float, mode: str = "hard_argmax", eta: float | None = None,
                        gumbel: GumbelConfig | None = None, omega0=None,
                        omega_grad: Callable | None = None):
    """Alternate lookahead, worst-task selection, weight update and a committed step.

    Per iteration: ``theta_hat = theta - alpha1 grad M_lam(theta)``; the worst
    validation task is picked at ``theta_hat``; ``lam`` moves against the
    hypergradient (hard or Gumbel-relaxed) and is projected; finally
    ``theta <- theta - eta grad M_lam(theta)`` with the new weights
    (``eta`` defaults to ``alpha1``).

    ``omega0``/``omega_grad`` carry an optional second parameter group that
    follows the same committed update; ``omega_grad(omega, lam)`` returns its
    mixture gradient.

    Returns ``(theta, lam, trace)``; when an ``omega`` group is supplied the
    tuple gains a fourth element.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if mode not in ("hard_argmax", "gumbel"):
        raise ValueError(f"unknown mode {mode!r}")
    eta = alpha1 if eta is None else eta
    theta = np.array(theta0, dtype=np.float64)
    lam = project_weights(np.array(lam0, dtype=np.float64), bundle.k)
    omega = None if omega0 is None else np.array(omega0, dtype=np.float64)
    gumbel = gumbel or GumbelConfig()
    noise_rng = np.random.default_rng(gumbel.noise_seed)
    trace = MinmaxTrace()
    for t in range(iters):
        if mode == "gumbel":
            noise = (np.zeros(bundle.k) if gumbel.zero_noise
                     else standard_gumbel(noise_rng, bundle.k))
            hg, theta_hat, j = hypergradient(theta, lam, bundle, alpha1, noise=noise,
                                             gumbel_tau=gumbel.gumbel_tau)
        else:
            hg, theta_hat, j = hypergradient(theta, lam, bundle, alpha1)
        lam = project_weights(lam - alpha2 * hg, bundle.k)
        g_mix, _ = mixture_gradient(theta, lam, bundle)
        theta = theta - eta * g_mix
        if omega is not None:
            omega = omega - eta * omega_grad(omega, lam)
        vals = bundle.val_losses(theta)
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(theta))) \
                or vals.max() > DIVERGENCE_LIMIT:
            raise DivergenceError(f"diverged at iteration {t + 1}", trace)
        trace.worst.append(j)
        trace.val_losses.append(vals)
        trace.lam.append(lam.copy())
        trace.theta.append(theta.copy())
    if omega is not None:
        return theta, lam, trace, omega
    return theta, lam, trace


def fixed_weight_train(bundle: TaskBundle, lam, theta0, iters: int, eta: float):
    """Baseline: plain descent on a fixed mixture for ``iters`` steps."""
    theta = np.array(theta0, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    trace = MinmaxTrace()
    for _ in range(iters):
        g_mix, _ = mixture_gradient(theta, lam, bundle)
        theta = theta - eta * g_mix
        vals = bundle.val_losses(theta)
        trace.worst.append(int(np.argmax(vals)))
        trace.val_losses.append(vals)
        trace.lam.append(lam.copy())
        trace.theta.append(theta.copy())
    return theta, trace


# ----------------------------------------------------------------- data


@dataclass
class MultiTaskData:
    X_train: np.ndarray
    Y_train: np.ndarray  # (n, k) in {0, 1}
    X_val: np.ndarray
    Y_val: np.ndarray

    @property
    def k(self) -> int:
        return self.Y_train.shape[1]

    def bundle(self, reduction: str = "mean", l2: bool = False) -> TaskBundle:
        def make(X, Y, i):
            return lambda theta: bce_task_loss(theta, X, Y, i, reduction)

        train = [make(self.X_train, self.Y_train, i) for i in range(self.k)]
        val = [make(self.X_val, self.Y_val, i) for i in range(self.k)]
        theta0 = np.zeros(self.X_train.shape[1] + self.k)
        return TaskBundle(train, val, squared_norm if l2 else None, theta0)


def uniform_weights(bundle: TaskBundle, reg_weight: float = 0.0) -> np.ndarray:
    lam = np.ones(bundle.n_weights)
    if bundle.regularizer is not None:
        lam[-1] = reg_weight
    return lam


def max_val_loss(theta, bundle: TaskBundle) -> float:
    return float(bundle.val_losses(theta).max())


def run_comparison(bundle: TaskBundle, iters: int, alpha1: float, alpha2: float,
                   mode: str = "hard_argmax", gumbel: GumbelConfig | None = None,
                   reg_weight: float = 0.0):
    """Learned-weight run versus the fixed uniform mixture at equal step counts."""
    lam0 = uniform_weights(bundle, reg_weight)
    theta0 = bundle.theta0
    theta, lam, trace = direct_method_train(bundle, lam0, theta0, iters, alpha1, alpha2,
                                            mode=mode, gumbel=gumbel)
    theta_u, _ = fixed_weight_train(bundle, lam0, theta0, iters, alpha1)
    return {
        "learned_max_val": max_val_loss(theta, bundle),
        "uniform_max_val": max_val_loss(theta_u, bundle),
        "final_lambda": lam,
        "trace": trace,
    }


def tasks_from_sequences(train: Sequence[LossFn], val: Sequence[LossFn] | None = None,
                         regularizer: LossFn | None = None, theta0=None) -> TaskBundle:
    return TaskBundle(list(train), list(val if val is not None else train), regularizer,
                      None if theta0 is None else np.asarray(theta0, dtype=np.float64))
