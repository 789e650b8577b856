"""Mini-batch training loop shared by every classifier in the package.

All methods (ERM, distillation, DeDiER, JTT, GroupDRO) reduce to
:func:`run_epoch` with different per-instance weights, so reduction
identities between them hold bit for bit when the weights coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DivergenceError
from .metrics import eval_metrics
from .nn import MlpModel, backward, cross_entropy, cross_entropy_grad, forward, init_mlp, \
    kd_grad, kd_loss, sgd_step
from .rng import make_rng


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 0.05
    batch_size: int = 64
    weight_decay: float = 0.0


def build_model(in_dim: int, n_classes: int, cfg: ModelConfig, seed: int,
                name: str = "student") -> MlpModel:
    rng = make_rng(seed, name, "init")
    return init_mlp([in_dim, *cfg.hidden, n_classes], rng)


def batch_rng(seed: int) -> np.random.Generator:
    """Batch-order stream; shared by all methods so orders line up."""
    return make_rng(seed, "batches")


def run_epoch(model: MlpModel, X, y, order, batch_size: int, lr: float, *,
              ce_weight=None, kd_weight=None, teacher_logits=None, tau: float = 1.0,
              weight_decay: float = 0.0) -> float:
    """One pass of SGD over ``order``; returns the mean per-instance loss.

    The batch objective is ``mean_i(ce_weight_i * CE_i + kd_weight_i * KD_i)``;
    a missing weight vector means 1 for CE and no KD term.
    """
    total = 0.0
    for start in range(0, len(order), batch_size):
        b = order[start:start + batch_size]
        logits, taps = forward(model, X[b])
        g = cross_entropy_grad(logits, y[b])
        loss = cross_entropy(logits, y[b])
        if ce_weight is not None:
            g = ce_weight[b][:, None] * g
            loss = ce_weight[b] * loss
        if kd_weight is not None:
            t = teacher_logits[b]
            g = g + kd_weight[b][:, None] * kd_grad(logits, t, tau)
            loss = loss + kd_weight[b] * kd_loss(logits, t, tau)
        batch_loss = float(loss.sum())
        if not np.isfinite(batch_loss):
            raise DivergenceError("non-finite training loss")
        total += batch_loss
        grads = backward(model, g / len(b), X[b], taps)
        sgd_step(model, grads, lr, weight_decay)
    return total / max(len(order), 1)


EpochWeights = Callable[[int, MlpModel], "tuple[np.ndarray | None, np.ndarray | None]"]


def fit(model: MlpModel, view, *, epochs: int, cfg: ModelConfig, seed: int,
        before_epoch: EpochWeights | None = None, teacher_logits=None, tau: float = 1.0,
        val=None, after_epoch: Callable | None = None):
    """Train in place for ``epochs`` and return the selected model and history.

    ``before_epoch(epoch, model)`` supplies ``(ce_weight, kd_weight)`` for the
    coming epoch.  With a group-annotated ``val`` split the returned model is
    the epoch with the best validation worst-group accuracy (earliest on
    ties); otherwise it is the last one.
    """
    rng = batch_rng(seed)
    n = len(view.y)
    best, best_wga = model.copy(), -1.0
    history = []
    for epoch in range(epochs):
        ce_w, kd_w = before_epoch(epoch, model) if before_epoch else (None, None)
        order = rng.permutation(n)
        loss = run_epoch(model, view.X, view.y, order, cfg.batch_size, cfg.lr,
                         ce_weight=ce_w, kd_weight=kd_w, teacher_logits=teacher_logits,
                         tau=tau, weight_decay=cfg.weight_decay)
        record = {"epoch": epoch + 1, "train_loss": loss}
        if val is not None:
            row = eval_metrics(model, val)
            record.update(avg_acc=row.avg_acc, wga=row.wga)
            if row.wga > best_wga:
                best, best_wga = model.copy(), row.wga
        if after_epoch is not None:
            after_epoch(epoch, model, record)
        history.append(record)
    if val is None or epochs == 0:
        return model, history
    return best, history
