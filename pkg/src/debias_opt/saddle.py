"""Privileged-label multi-label classification by primal-dual iteration.

``T`` linear scorers ``w_l . x`` are trained so that, for every instance and
true label ``l``, the label outscores its *confusing set*

    S_il = { j : y_ij < 0 and w_j . x_i >= w_l . x_i },

the negatives that currently score at least as high.  The per-label loss is

    f_l(W) = 1 / (n log T) * sum_{i: y_il > 0} mean_{k in S_il} [1 - w_l.x_i + w_k.x_i]_+

Losses on the privileged labels ``P`` are minimized while each remaining
label ``k`` must keep ``f_k(W) <= f_k(W_prior) + eps``.  The Lagrangian

    L(W, lam) = sum_{l in P} f_l(W) + sum_{k not in P} lam_k (f_k(W) - f_k(W_prior) - eps)

is handled by projected dual ascent on ``lam`` followed by a subgradient
descent step on ``W``.

Labels and instances are 0-indexed.  ``log`` is the natural logarithm.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DivergenceError, ShapeError


@dataclass
class MultiLabelDataset:
    X: np.ndarray  # (n, m)
    Y: np.ndarray  # (n, T) entries in {+1, -1}

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ShapeError(f"X {self.X.shape} and Y {self.Y.shape} disagree")
        if self.Y.shape[1] < 2:
            raise DataError("need at least two labels")
        if not np.all(np.abs(self.Y) == 1.0):
            raise DataError("label matrix entries must be exactly +1 or -1")
        if not np.all(np.isfinite(self.X)):
            raise DataError("non-finite features")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def normalizer(self) -> float:
        return self.n * math.log(self.T)


@dataclass(frozen=True)
class PrivilegedPartition:
    P: tuple[int, ...]
    P_bar: tuple[int, ...]

    @classmethod
    def from_privileged(cls, P: Sequence[int], T: int) -> "PrivilegedPartition":
        P = tuple(sorted(set(int(p) for p in P)))
        if any(p < 0 or p >= T for p in P):
            raise IndexError("privileged label out of range")
        return cls(P, tuple(l for l in range(T) if l not in P))

    def validate(self, T: int) -> None:
        if set(self.P) & set(self.P_bar):
            raise DataError("P and its complement overlap")
        if set(self.P) | set(self.P_bar) != set(range(T)):
            raise DataError("P and its complement must cover all labels")


@dataclass
class LabelModelBank:
    W: np.ndarray        # (T, m) current weights
    W_prior: np.ndarray  # (T, m) fixed reference weights
    lam: np.ndarray      # duals, one per non-privileged label (partition order)
    eps: float = 0.1
    mu: float = 1.0
    eta: float = 0.1

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        self.W_prior = np.array(self.W_prior, dtype=np.float64)
        self.W_prior.setflags(write=False)
        self.lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if self.W.shape != self.W_prior.shape:
            raise ShapeError("W and W_prior differ in shape")
        if np.any(self.lam < 0):
            raise ValueError("dual variables must be nonnegative")
        if self.eps < 0 or self.mu <= 0 or self.eta < 0:
            raise ValueError("need eps >= 0, mu > 0, eta >= 0")

    @classmethod
    def from_prior(cls, W_prior, partition: PrivilegedPartition, *, eps=0.1, mu=1.0,
                   eta=0.1, init="prior", lam=None) -> "LabelModelBank":
        W_prior = np.asarray(W_prior, dtype=np.float64)
        if init == "prior":
            W = W_prior.copy()
        elif init == "zero":
            W = np.zeros_like(W_prior)
        else:
            raise ValueError(f"unknown init {init!r}")
        if lam is None:
            lam = np.zeros(len(partition.P_bar))
        return cls(W, W_prior, lam, eps, mu, eta)

    def replace(self, **changes) -> "LabelModelBank":
        fields = dict(W=self.W, W_prior=self.W_prior, lam=self.lam, eps=self.eps,
                      mu=self.mu, eta=self.eta)
        fields.update(changes)
        return LabelModelBank(**fields)


@dataclass
class SaddleTrace:
    obj_P: list[float] = field(default_factory=list)
    losses: list[np.ndarray] = field(default_factory=list)
    lam: list[np.ndarray] = field(default_factory=list)
    residuals: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.obj_P)

    def append(self, obj, losses, lam, residuals):
        self.obj_P.append(float(obj))
        self.losses.append(np.array(losses))
        self.lam.append(np.array(lam))
        self.residuals.append(np.array(residuals))

    def to_csv(self) -> str:
        n_dual = len(self.lam[0]) if self.lam else 0
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iter", "obj_P", "constraint_residual_max"]
                        + [f"lambda_{i + 1}" for i in range(n_dual)])
        for t in range(len(self)):
            res = self.residuals[t]
            rmax = repr(float(res.max())) if res.size else ""
            writer.writerow([t + 1, repr(self.obj_P[t]), rmax]
                            + [repr(float(v)) for v in self.lam[t]])
        return buf.getvalue()


# ------------------------------------------------------------------ losses


def _confusion(W, data: MultiLabelDataset):
    """Scores, membership tensor ``M[i, l, j] = (j in S_il)`` and set sizes."""
    Z = data.X @ np.asarray(W, dtype=np.float64).T
    neg = data.Y < 0
    M = neg[:, None, :] & (Z[:, None, :] >= Z[:, :, None])
    counts = M.sum(axis=2)
    active = (data.Y > 0) & (counts > 0)
    return Z, M, counts, active


def confusing_set(i: int, l: int, W, data: MultiLabelDataset) -> set[int]:
    if not (0 <= i < data.n and 0 <= l < data.T):
        raise IndexError(f"instance {i} / label {l} out of range")
    if data.Y[i, l] <= 0:
        raise ValueError("confusing sets are defined for true labels only")
    z = data.X[i] @ np.asarray(W, dtype=np.float64).T
    return {j for j in range(data.T) if data.Y[i, j] < 0 and z[j] >= z[l]}


def _hinge_terms(Z, M, counts, active, explicit_hinge=False):
    H = 1.0 - Z[:, :, None] + Z[:, None, :]
    if explicit_hinge:
        H = np.maximum(H, 0.0)
    # membership implies H >= 1, so the [.]_+ is inactive on every kept term
    summed = np.where(M, H, 0.0).sum(axis=2)
    return np.where(active, summed / np.maximum(counts, 1), 0.0)


def label_losses(W, data: MultiLabelDataset, explicit_hinge: bool = False) -> np.ndarray:
    """All ``T`` label losses ``f_l(W)`` as a vector."""
    Z, M, counts, active = _confusion(W, data)
    return _hinge_terms(Z, M, counts, active, explicit_hinge).sum(axis=0) / data.normalizer


def label_loss(l: int, W, data: MultiLabelDataset) -> float:
    return float(label_losses(W, data)[l])


def prior_losses(bank: LabelModelBank, data: MultiLabelDataset) -> np.ndarray:
    return label_losses(bank.W_prior, data)


def lagrangian(bank: LabelModelBank, data: MultiLabelDataset, partition: PrivilegedPartition,
               f_prior: np.ndarray | None = None) -> float:
    if f_prior is None:
        f_prior = prior_losses(bank, data)
    f = label_losses(bank.W, data)
    P, Pb = list(partition.P), list(partition.P_bar)
    value = f[P].sum()
    if Pb:
        value += float(bank.lam @ (f[Pb] - f_prior[Pb] - bank.eps))
    return float(value)


def label_coefficients(partition: PrivilegedPartition, lam, T: int) -> np.ndarray:
    """Weight of each ``f_l`` in the Lagrangian: 1 on ``P``, ``lam`` elsewhere."""
    c = np.zeros(T)
    c[list(partition.P)] = 1.0
    c[list(partition.P_bar)] = lam
    return c


def weighted_loss_gradient(W, data: MultiLabelDataset, coef) -> np.ndarray:
    """Subgradient of ``sum_l coef[l] * f_l(W)`` with respect to ``W`` (T x m).

    Each active pair contributes ``-x_i`` to its true label and
    ``x_i / |S_il|`` to every member of the confusing set.
    """
    Z, M, counts, active = _confusion(W, data)
    coef = np.asarray(coef, dtype=np.float64)
    share = np.where(active, coef[None, :] / np.maximum(counts, 1), 0.0)
    C = np.einsum("il,ilp->ip", share, M.astype(np.float64))
    C -= np.where(active, coef[None, :], 0.0)
    return C.T @ data.X / data.normalizer


def primal_gradient(bank: LabelModelBank, data: MultiLabelDataset,
                    partition: PrivilegedPartition) -> np.ndarray:
    coef = label_coefficients(partition, bank.lam, data.T)
    return weighted_loss_gradient(bank.W, data, coef)


def _literal_residuals(bank, data, partition):
    # Variant residual: the prior hinge terms reuse the confusing sets of
    # the current W, and eps is divided by n log T along with the losses.
    Z, M, counts, active = _confusion(bank.W, data)
    Zp = data.X @ bank.W_prior.T
    cur = _hinge_terms(Z, M, counts, active, explicit_hinge=True)
    pri = _hinge_terms(Zp, M, counts, active, explicit_hinge=True)
    diff = (cur - pri).sum(axis=0)
    Pb = list(partition.P_bar)
    return (diff[Pb] - bank.eps) / data.normalizer


def constraint_residuals(bank, data, partition, f_prior=None) -> np.ndarray:
    """``f_k(W) - f_k(W_prior) - eps`` for every non-privileged label."""
    if f_prior is None:
        f_prior = prior_losses(bank, data)
    Pb = list(partition.P_bar)
    return label_losses(bank.W, data)[Pb] - f_prior[Pb] - bank.eps


def dual_step(bank: LabelModelBank, data: MultiLabelDataset, partition: PrivilegedPartition,
              f_prior=None, literal: bool = False, mu: float | None = None) -> np.ndarray:
    """Projected ascent ``lam <- max(0, lam + mu * residual)``.

    With ``literal=True`` the variant residual is used instead: prior terms
    share the current confusing sets and eps is scaled by ``1 / (n log T)``.
    """
    mu = bank.mu if mu is None else mu
    if literal:
        res = _literal_residuals(bank, data, partition)
    else:
        res = constraint_residuals(bank, data, partition, f_prior)
    return np.maximum(0.0, bank.lam + mu * res)


def primal_step(bank: LabelModelBank, data: MultiLabelDataset, partition: PrivilegedPartition,
                eta: float | None = None) -> np.ndarray:
    eta = bank.eta if eta is None else eta
    return bank.W - eta * primal_gradient(bank, data, partition)


def _schedule_fn(schedule) -> Callable[[int], float]:
    if schedule is None or schedule == "constant":
        return lambda t: 1.0
    if schedule == "inv_sqrt":
        return lambda t: 1.0 / math.sqrt(t + 1.0)
    if callable(schedule):
        return schedule
    raise ValueError(f"unknown schedule {schedule!r}")


def _run(bank, data, partition, iters, schedule, fixed_lam, literal):
    if iters < 1:
        raise ValueError("iters must be >= 1")
    partition.validate(data.T)
    if len(bank.lam) != len(partition.P_bar):
        raise ShapeError("one dual variable per non-privileged label is required")
    scale = _schedule_fn(schedule)
    f_prior = prior_losses(bank, data)
    P, Pb = list(partition.P), list(partition.P_bar)
    bank = bank.replace()
    if fixed_lam is not None:
        bank.lam = np.array(fixed_lam, dtype=np.float64).reshape(-1)
        if bank.lam.shape != (len(Pb),) or np.any(bank.lam < 0):
            raise ValueError("fixed lambda must be nonnegative, one per non-privileged label")
    trace = SaddleTrace()
    for t in range(iters):
        s = scale(t)
        if fixed_lam is None and Pb:
            bank.lam = dual_step(bank, data, partition, f_prior, literal, mu=bank.mu * s)
        bank.W = primal_step(bank, data, partition, eta=bank.eta * s)
        f = label_losses(bank.W, data)
        if not np.all(np.isfinite(f)) or not np.all(np.isfinite(bank.W)):
            raise DivergenceError(f"non-finite loss at iteration {t + 1}", trace)
        trace.append(f[P].sum(), f, bank.lam, f[Pb] - f_prior[Pb] - bank.eps)
    return bank, trace


def solve(bank: LabelModelBank, data: MultiLabelDataset, partition: PrivilegedPartition,
          iters: int, schedule=None, literal_dual: bool = False):
    """Alternate one dual ascent step and one primal descent step per iteration.

    ``schedule`` scales both step sizes by iteration: ``"constant"``,
    ``"inv_sqrt"`` or a callable ``t -> factor``.  Returns a new bank and the
    trace; the input bank is not modified.
    """
    return _run(bank, data, partition, iters, schedule, None, literal_dual)


def solve_fixed_lambda(bank: LabelModelBank, data: MultiLabelDataset,
                       partition: PrivilegedPartition, fixed_lam, iters: int, schedule=None):
    """Primal descent with the duals pinned, e.g. to propensity scores."""
    return _run(bank, data, partition, iters, schedule, fixed_lam, False)
