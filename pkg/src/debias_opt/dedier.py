"""Distillation reweighted by early-readout confidence.

An auxiliary linear head reads the label from an early layer of the student.
Instances it gets wrong are upweighted in the distillation loss by

    wt = exp(beta * cm ** alpha)

where ``cm`` is the gap between the head's two largest class probabilities;
correctly read instances keep weight 1.  The head is re-fit from scratch
every ``retrain_interval`` epochs, so the weights follow the student as it
trains.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .metrics import eval_metrics, predict
from .nn import MlpModel, cross_entropy_grad, forward, softmax_probs
from .rng import make_rng
from .training import ModelConfig, fit, run_epoch


@dataclass
class WeightingParams:
    alpha: float = 0.05
    beta: float = 4.0
    kd_mix: float = 1.0
    kd_temperature: float = 1.0
    aux_position: int = 1
    retrain_interval: int = 1
    aux_epochs: int = 1
    aux_lr: float = 0.1
    aux_batch_size: int = 64

    def validate(self, depth: int | None = None) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.0 <= self.kd_mix <= 1.0:
            raise ValueError("kd_mix must lie in [0, 1]")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if self.retrain_interval < 1 or self.aux_epochs < 1:
            raise ValueError("retrain_interval and aux_epochs must be >= 1")
        if self.aux_position < 1 or (depth is not None and self.aux_position >= depth):
            raise ValueError(f"aux_position must be in [1, {depth})")


def confidence_margin(p) -> np.ndarray | float:
    """Gap between the largest and second-largest probability (row-wise)."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ShapeError("confidence margin needs at least two classes")
    top2 = np.sort(p, axis=-1)[..., -2:]
    cm = top2[..., 1] - top2[..., 0]
    return float(cm) if cm.ndim == 0 else cm


def instance_weight(p_aux, y_aux_pred, y_true, alpha: float, beta: float):
    """1 where the readout is right, ``exp(beta * cm**alpha)`` where it is wrong."""
    cm = np.asarray(confidence_margin(p_aux))
    wrong = np.asarray(y_aux_pred) != np.asarray(y_true)
    wt = np.where(wrong, np.exp(beta * cm ** alpha), 1.0)
    return float(wt) if wt.ndim == 0 else wt


def weighting_curve(alpha: float, beta: float, samples: int = 100) -> np.ndarray:
    """``(samples, 2)`` table of ``(cm, wt)`` for a mispredicted instance, cm in (0, 1]."""
    if samples < 2:
        raise ValueError("need at least two samples")
    cm = np.linspace(0.0, 1.0, samples + 1)[1:]
    return np.column_stack([cm, np.exp(beta * cm ** alpha)])


# ------------------------------------------------------------ aux readout


@dataclass
class AuxReadout:
    W: np.ndarray  # (tap width, K)
    b: np.ndarray
    depth: int

    def proba(self, model: MlpModel, X) -> np.ndarray:
        return softmax_probs(tap_features(model, X, self.depth) @ self.W + self.b)


def tap_features(model: MlpModel, X, depth: int) -> np.ndarray:
    _, taps = forward(model, X)
    return taps[depth - 1]


def fit_linear_decoder(H, y, n_classes: int, epochs: int, lr: float, batch_size: int,
                       rng: np.random.Generator):
    """Softmax regression by mini-batch SGD from a small random start."""
    W = rng.standard_normal((H.shape[1], n_classes)) * 0.01
    b = np.zeros(n_classes)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            g = cross_entropy_grad(H[idx] @ W + b, y[idx]) / len(idx)
            W -= lr * (H[idx].T @ g)
            b -= lr * g.sum(axis=0)
    return W, b


def train_aux(model: MlpModel, depth: int, view, epochs: int = 1, lr: float = 0.1,
              batch_size: int = 64, rng: np.random.Generator | None = None) -> AuxReadout:
    """Fit a fresh readout head on the (frozen) representation at ``depth``."""
    if epochs < 1:
        raise ValueError("aux training needs at least one epoch")
    if not 1 <= depth < model.depth:
        raise ValueError(f"tap depth must be in [1, {model.depth})")
    rng = rng if rng is not None else make_rng(0, "aux")
    H = tap_features(model, view.X, depth)
    W, b = fit_linear_decoder(H, view.y, model.out_dim, epochs, lr, batch_size, rng)
    return AuxReadout(W, b, depth)


@dataclass
class WeightedDataset:
    X: np.ndarray
    y: np.ndarray
    weight: np.ndarray
    aux_pred: np.ndarray
    margin: np.ndarray

    @property
    def aux_correct(self) -> np.ndarray:
        return self.aux_pred == self.y


def compute_weights(model: MlpModel, aux: AuxReadout, view, alpha: float,
                    beta: float) -> WeightedDataset:
    p = aux.proba(model, view.X)
    pred = np.argmax(p, axis=1)
    cm = confidence_margin(p)
    wt = instance_weight(p, pred, view.y, alpha, beta)
    return WeightedDataset(view.X, view.y, wt, pred, cm)


def distill_epoch(student: MlpModel, teacher_logits, weighted: WeightedDataset, kd_mix: float,
                  tau: float, lr: float, batch_size: int = 64, order=None,
                  weight_decay: float = 0.0) -> MlpModel:
    """One SGD pass on ``mean[(1 - kd_mix) CE + kd_mix * wt * KD]`` (in place)."""
    n = len(weighted.y)
    order = np.arange(n) if order is None else order
    ce_w, kd_w = mixed_weights(weighted.weight, kd_mix)
    run_epoch(student, weighted.X, weighted.y, order, batch_size, lr, ce_weight=ce_w,
              kd_weight=kd_w, teacher_logits=teacher_logits, tau=tau,
              weight_decay=weight_decay)
    return student


def mixed_weights(wt, kd_mix: float):
    wt = np.asarray(wt, dtype=np.float64)
    return np.full(len(wt), 1.0 - kd_mix), kd_mix * wt


# ------------------------------------------------------------------ reports


@dataclass
class ReadoutReport:
    depth: int
    error_rate: np.ndarray      # per group, fraction of the group misread
    error_margin: np.ndarray    # per group, mean confidence margin of its errors (nan if none)
    error_share: np.ndarray     # per group, share of all errors; sums to 1 when any error
    n_errors: int

    def rows(self) -> list[dict]:
        return [{"depth": self.depth, "group": g, "error_rate": float(self.error_rate[g]),
                 "error_margin": float(self.error_margin[g]),
                 "error_share": float(self.error_share[g])}
                for g in range(len(self.error_rate))]


def readout_report(p, y, group, n_groups: int, depth: int) -> ReadoutReport:
    pred = np.argmax(p, axis=1)
    cm = confidence_margin(p)
    wrong = pred != y
    totals = np.bincount(group, minlength=n_groups)
    errs = np.bincount(group[wrong], minlength=n_groups)
    margin_sum = np.bincount(group[wrong], weights=cm[wrong], minlength=n_groups)
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(totals > 0, errs / np.maximum(totals, 1), 0.0)
        margin = np.where(errs > 0, margin_sum / np.maximum(errs, 1), np.nan)
    n_err = int(wrong.sum())
    share = errs / n_err if n_err else np.zeros(n_groups)
    return ReadoutReport(depth, rate, margin, share, n_err)


def readout_probe(model: MlpModel, split, depths, epochs: int = 1, lr: float = 0.1,
                  batch_size: int = 64, seed: int = 0, standardize: bool = True
                  ) -> list[ReadoutReport]:
    """Fit a linear decoder on each requested layer and report groupwise errors.

    ``split`` must carry group ids; the decoders are fit and scored on it.
    Depth ``model.depth`` probes the logits layer.
    """
    reports = []
    _, taps = forward(model, split.X)
    for depth in depths:
        if not 1 <= depth <= model.depth:
            raise ValueError(f"depth {depth} outside 1..{model.depth}")
        H = taps[depth - 1]
        if standardize:
            H = (H - H.mean(axis=0)) / (H.std(axis=0) + 1e-8)
        rng = make_rng(seed, "probe", depth)
        W, b = fit_linear_decoder(H, split.y, model.out_dim, epochs, lr, batch_size, rng)
        p = softmax_probs(H @ W + b)
        reports.append(readout_report(p, split.y, split.group, split.n_groups, depth))
    return reports


def reports_to_csv(reports: list[ReadoutReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth", "group", "error_rate", "error_margin", "error_share"])
    for r in reports:
        for row in r.rows():
            w.writerow([row["depth"], row["group"], repr(row["error_rate"]),
                        repr(row["error_margin"]), repr(row["error_share"])])
    return buf.getvalue()


# ------------------------------------------------------------- main loop


@dataclass
class DedierResult:
    student: MlpModel
    reports: list[ReadoutReport] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    final_weights: np.ndarray | None = None


def dedier_train(student: MlpModel, teacher_logits, view, params: WeightingParams, epochs: int,
                 cfg: ModelConfig, seed: int, val=None, train_groups=None,
                 reweigher=None) -> DedierResult:
    """Distil into ``student`` with readout weights refreshed every ``L`` epochs.

    ``view`` holds training features and labels only.  ``train_groups`` is
    used for the per-epoch report and never enters the training arithmetic.
    ``reweigher(epoch, model) -> weights`` replaces the readout weighting
    (used to check reductions to plain distillation).  The student is trained
    in place; the returned one is the best validation worst-group epoch when
    ``val`` is given.
    """
    params.validate(student.depth)
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    if teacher_logits.shape != (len(view.y), student.out_dim):
        raise ShapeError("teacher logits must have one row per training instance")
    aux_rng = make_rng(seed, "aux")
    n_groups = None if train_groups is None else int(train_groups.max()) + 1
    state = {"wt": np.ones(len(view.y)), "weighted": None}
    result = DedierResult(student)

    def before_epoch(epoch, model):
        if epoch % params.retrain_interval == 0:
            if reweigher is not None:
                state["wt"] = np.asarray(reweigher(epoch, model), dtype=np.float64)
                state["weighted"] = None
            else:
                aux = train_aux(model, params.aux_position, view, params.aux_epochs,
                                params.aux_lr, params.aux_batch_size, aux_rng)
                weighted = compute_weights(model, aux, view, params.alpha, params.beta)
                state["wt"] = weighted.weight
                state["weighted"] = weighted
                if train_groups is not None:
                    p = aux.proba(model, view.X)
                    result.reports.append(readout_report(p, view.y, train_groups, n_groups,
                                                         params.aux_position))
        if not np.all(np.isfinite(state["wt"])):
            raise DivergenceError("non-finite instance weights", result.trace)
        return mixed_weights(state["wt"], params.kd_mix)

    def after_epoch(epoch, model, record):
        if train_groups is not None:
            wt = state["wt"]
            acc = predict(model, view.X) == view.y
            weighted = state["weighted"]
            for g in range(n_groups):
                mask = train_groups == g
                record[f"group_{g}_mean_weight"] = float(wt[mask].mean())
                record[f"group_{g}_acc_final"] = float(acc[mask].mean())
                if weighted is not None:
                    record[f"group_{g}_error_aux"] = float((~weighted.aux_correct[mask]).mean())
        result.trace.append(record)

    try:
        best, _ = fit(student, view, epochs=epochs, cfg=cfg, seed=seed,
                      before_epoch=before_epoch, teacher_logits=teacher_logits,
                      tau=params.kd_temperature, val=val, after_epoch=after_epoch)
    except DivergenceError as exc:
        exc.trace = result.trace
        raise
    result.student = best
    result.final_weights = state["wt"]
    return result


def trace_to_csv(trace: list[dict]) -> str:
    """Per-epoch trace; columns are the union of keys in first-seen order."""
    cols: list[str] = []
    for rec in trace:
        for key in rec:
            if key not in cols:
                cols.append(key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for rec in trace:
        w.writerow([_fmt(rec.get(c, "")) for c in cols])
    return buf.getvalue()


def group_trace_to_csv(trace: list[dict], n_groups: int) -> str:
    """Long form of the per-epoch trace: one row per epoch per group."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "group", "mean_weight", "acc_final", "error_aux"])
    for rec in trace:
        for g in range(n_groups):
            w.writerow([rec["epoch"], g, _fmt(rec.get(f"group_{g}_mean_weight", "")),
                        _fmt(rec.get(f"group_{g}_acc_final", "")),
                        _fmt(rec.get(f"group_{g}_error_aux", ""))])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def curve_to_csv(curves: dict[tuple[float, float], np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "beta", "cm", "wt"])
    for (alpha, beta), table in curves.items():
        for cm, wt in table:
            w.writerow([repr(float(alpha)), repr(float(beta)), repr(float(cm)), repr(float(wt))])
    return buf.getvalue()


def group_mean_weights(weights, groups, n_groups: int) -> np.ndarray:
    return np.array([weights[groups == g].mean() for g in range(n_groups)])
