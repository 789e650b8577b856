"""Baselines, experiment wiring and hyperparameter sweeps."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import statistics
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .datasets import GroupedDataset, GroupedSplit, LabeledView, SpuriousSpec, gen_spurious_binary
from .dedier import WeightingParams, dedier_train
from .errors import DebiasOptError
from .metrics import MetricsRow, eval_metrics, predict
from .nn import MlpModel, backward, cross_entropy, cross_entropy_grad, forward, sgd_step
from .training import ModelConfig, batch_rng, build_model, fit


def train_erm(view: LabeledView, cfg: ModelConfig, epochs: int, seed: int, val=None,
              n_classes: int = 2) -> MlpModel:
    model = build_model(view.X.shape[1], n_classes, cfg, seed)
    model, _ = fit(model, view, epochs=epochs, cfg=cfg, seed=seed, val=val)
    return model


def teacher_logits_for(teacher: MlpModel, X) -> np.ndarray:
    logits, _ = forward(teacher, X)
    return logits


def train_kd(view: LabeledView, teacher_logits, cfg: ModelConfig, kd_mix: float, tau: float,
             epochs: int, seed: int, val=None, n_classes: int = 2) -> MlpModel:
    """Plain distillation ``mean[(1 - kd_mix) CE + kd_mix KD]``."""
    model = build_model(view.X.shape[1], n_classes, cfg, seed)
    n = len(view.y)
    ce_w = np.full(n, 1.0 - kd_mix)
    kd_w = kd_mix * np.ones(n)
    model, _ = fit(model, view, epochs=epochs, cfg=cfg, seed=seed,
                   before_epoch=lambda e, m: (ce_w, kd_w), teacher_logits=teacher_logits,
                   tau=tau, val=val)
    return model


@dataclass
class ErrorSet:
    """Frozen indices misclassified by the phase-1 model."""

    mask: np.ndarray
    digest: str

    @classmethod
    def freeze(cls, mask) -> "ErrorSet":
        mask = np.array(mask, dtype=bool)
        mask.setflags(write=False)
        return cls(mask, hashlib.sha256(mask.tobytes()).hexdigest())

    def verify(self) -> None:
        if hashlib.sha256(self.mask.tobytes()).hexdigest() != self.digest:
            raise DebiasOptError("JTT error set changed after phase 1")


def jtt_error_set(view: LabeledView, cfg: ModelConfig, first_epochs: int, seed: int,
                  n_classes: int = 2) -> ErrorSet:
    if first_epochs < 1:
        raise ValueError("phase 1 needs at least one epoch")
    model = build_model(view.X.shape[1], n_classes, cfg, seed, name="jtt_phase1")
    model, _ = fit(model, view, epochs=first_epochs, cfg=cfg, seed=seed)
    return ErrorSet.freeze(predict(model, view.X) != view.y)


def train_jtt_lite(view: LabeledView, cfg: ModelConfig, first_epochs: int, upweight: float,
                   epochs: int, seed: int, val=None, n_classes: int = 2,
                   error_set: ErrorSet | None = None) -> MlpModel:
    """Just-train-twice: upweight the phase-1 errors by a fixed factor.

    Phase 2 starts from the same initialization and batch order as
    :func:`train_erm`, so ``upweight=1`` reproduces ERM exactly.
    """
    if upweight < 1:
        raise ValueError("upweight must be >= 1")
    errors = error_set or jtt_error_set(view, cfg, first_epochs, seed, n_classes)
    ce_w = np.where(errors.mask, float(upweight), 1.0)

    def before_epoch(epoch, model):
        errors.verify()
        return ce_w, None

    model = build_model(view.X.shape[1], n_classes, cfg, seed)
    model, _ = fit(model, view, epochs=epochs, cfg=cfg, seed=seed, before_epoch=before_epoch,
                   val=val)
    return model


def train_groupdro_lite(split: GroupedSplit, cfg: ModelConfig, eta_q: float, epochs: int,
                        seed: int, val=None, n_classes: int = 2, name: str = "student",
                        q_log: list | None = None) -> MlpModel:
    """Group DRO with exponentiated-gradient group weights.

    Per batch: ``q_g <- q_g exp(eta_q * loss_g)`` over the groups present,
    renormalize, then descend ``sum_g q_g loss_g``.  This is the only
    trainer that reads training group ids.
    """
    model = build_model(split.X.shape[1], n_classes, cfg, seed, name=name)
    rng = batch_rng(seed)
    G = split.n_groups
    q = np.full(G, 1.0 / G)
    best, best_wga = model.copy(), -1.0
    n = len(split.y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            gb = split.group[b]
            logits, taps = forward(model, split.X[b])
            losses = cross_entropy(logits, split.y[b])
            counts = np.bincount(gb, minlength=G)
            present = counts > 0
            group_loss = np.bincount(gb, weights=losses, minlength=G) / np.maximum(counts, 1)
            q = np.where(present, q * np.exp(eta_q * group_loss), q)
            q = q / q.sum()
            if q_log is not None:
                q_log.append(q.copy())
            w = q[gb] / counts[gb]
            grad = w[:, None] * cross_entropy_grad(logits, split.y[b])
            sgd_step(model, backward(model, grad, split.X[b], taps), cfg.lr, cfg.weight_decay)
        if val is not None:
            row = eval_metrics(model, val)
            if row.wga > best_wga:
                best, best_wga = model.copy(), row.wga
    return best if (val is not None and epochs > 0) else model


# -------------------------------------------------------------- experiments


@dataclass
class ExperimentConfig:
    """Everything one spurious-benchmark run needs besides the method name."""

    data: SpuriousSpec = field(default_factory=SpuriousSpec)
    student: ModelConfig = field(
        default_factory=lambda: ModelConfig(hidden=(32, 32), lr=0.05, weight_decay=0.05))
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(hidden=(128, 128)))
    epochs: int = 20
    teacher_epochs: int = 30
    teacher_eta_q: float = 0.05
    groupdro_eta_q: float = 0.05
    kd_tau: float = 1.0
    kd_mix: float = 1.0
    jtt_first_epochs: int = 1
    jtt_upweight: float = 20.0
    weighting: WeightingParams = field(default_factory=WeightingParams)


METHODS = ("erm", "kd", "dedier", "jtt", "groupdro")


@dataclass
class Experiment:
    """Dataset plus a cached teacher for one seed."""

    cfg: ExperimentConfig
    seed: int
    dataset: GroupedDataset = None
    _teacher: MlpModel | None = None

    def __post_init__(self):
        if self.dataset is None:
            self.dataset = gen_spurious_binary(replace(self.cfg.data, seed=self.seed))

    @property
    def train(self) -> GroupedSplit:
        return self.dataset.part("train")

    @property
    def val(self) -> GroupedSplit:
        return self.dataset.part("val")

    @property
    def test(self) -> GroupedSplit:
        return self.dataset.part("test")

    def teacher(self) -> MlpModel:
        if self._teacher is None:
            self._teacher = train_groupdro_lite(
                self.train, self.cfg.teacher, self.cfg.teacher_eta_q, self.cfg.teacher_epochs,
                self.seed, val=self.val, name="teacher")
        return self._teacher

    def teacher_logits(self) -> np.ndarray:
        return teacher_logits_for(self.teacher(), self.train.X)

    def run(self, method: str, weighting: WeightingParams | None = None,
            return_result: bool = False):
        cfg = self.cfg
        view = self.dataset.training_view()
        if method == "erm":
            model = train_erm(view, cfg.student, cfg.epochs, self.seed, self.val)
        elif method == "kd":
            model = train_kd(view, self.teacher_logits(), cfg.student, cfg.kd_mix, cfg.kd_tau,
                             cfg.epochs, self.seed, self.val)
        elif method == "dedier":
            params = weighting or cfg.weighting
            student = build_model(view.X.shape[1], 2, cfg.student, self.seed)
            result = dedier_train(student, self.teacher_logits(), view, params, cfg.epochs,
                                  cfg.student, self.seed, val=self.val,
                                  train_groups=self.train.group)
            if return_result:
                return result
            model = result.student
        elif method == "jtt":
            model = train_jtt_lite(view, cfg.student, cfg.jtt_first_epochs, cfg.jtt_upweight,
                                   cfg.epochs, self.seed, self.val)
        elif method == "groupdro":
            model = train_groupdro_lite(self.train, cfg.student, cfg.groupdro_eta_q, cfg.epochs,
                                        self.seed, self.val)
        elif method == "teacher":
            model = self.teacher()
        else:
            raise ValueError(f"unknown method {method!r}")
        return model

    def evaluate(self, model: MlpModel, method: str) -> tuple[MetricsRow, MetricsRow]:
        return (eval_metrics(model, self.val, method, self.seed),
                eval_metrics(model, self.test, method, self.seed))


# -------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    config: dict
    seed: int
    val: MetricsRow | None
    test: MetricsRow | None
    error: str | None = None


def grid_configs(grid: dict[str, list]) -> list[dict]:
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def sweep(run_cell: Callable[[dict, int], "tuple[MetricsRow, MetricsRow]"],
          grid: dict[str, list], seeds) -> list[SweepRow]:
    """Run every grid point for every seed; failures are recorded, not raised.

    ``run_cell(config, seed)`` returns ``(val_row, test_row)``.
    """
    rows = []
    for config in grid_configs(grid):
        for seed in seeds:
            try:
                val, test = run_cell(config, seed)
                val.config = dict(config)
                test.config = dict(config)
                rows.append(SweepRow(dict(config), seed, val, test))
            except (DebiasOptError, ArithmeticError, ValueError) as exc:
                rows.append(SweepRow(dict(config), seed, None, None, f"{type(exc).__name__}: {exc}"))
    return rows


def _key(config: dict) -> str:
    return json.dumps(config, sort_keys=True)


def select_best(rows: list[SweepRow]) -> dict | None:
    """Grid point with the highest mean validation worst-group accuracy."""
    by_cfg: dict[str, list[float]] = {}
    configs = {}
    for r in rows:
        if r.val is None:
            continue
        by_cfg.setdefault(_key(r.config), []).append(r.val.wga)
        configs[_key(r.config)] = r.config
    if not by_cfg:
        return None
    best = max(sorted(by_cfg), key=lambda k: statistics.fmean(by_cfg[k]))
    return configs[best]


def summarize(rows: list[SweepRow], method: str) -> dict:
    """Mean and std over seeds of test metrics at the selected grid point."""
    best = select_best(rows)
    chosen = [r.test for r in rows if r.test is not None and best is not None
              and _key(r.config) == _key(best)]
    wgas = [m.wga for m in chosen]
    avgs = [m.avg_acc for m in chosen]
    grid_wga = {}
    for r in rows:
        if r.test is not None:
            grid_wga.setdefault(_key(r.config), []).append(r.test.wga)
    grid_means = [statistics.fmean(v) for v in grid_wga.values()]
    return {
        "method": method,
        "selected_config": best,
        "n_seeds": len(chosen),
        "avg_acc_mean": statistics.fmean(avgs) if avgs else None,
        "avg_acc_std": statistics.pstdev(avgs) if avgs else None,
        "wga_mean": statistics.fmean(wgas) if wgas else None,
        "wga_std": statistics.pstdev(wgas) if wgas else None,
        "grid_wga_std": statistics.pstdev(grid_means) if grid_means else None,
        "failures": sum(r.error is not None for r in rows),
    }


def rows_to_csv(rows: list[SweepRow]) -> str:
    keys = sorted({k for r in rows for k in r.config})
    n_groups = max((len(r.test.group_acc) for r in rows if r.test), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "seed", *keys, "val_wga", "avg_acc", "wga",
                *[f"group_{g}_acc" for g in range(n_groups)], "error"])
    for r in rows:
        method = r.test.method if r.test else ""
        cfg = [repr(r.config.get(k, "")) if isinstance(r.config.get(k), float)
               else r.config.get(k, "") for k in keys]
        if r.test is None:
            w.writerow([method, r.seed, *cfg, "", "", "", *[""] * n_groups, r.error])
        else:
            w.writerow([method, r.seed, *cfg, repr(r.val.wga), repr(r.test.avg_acc),
                        repr(r.test.wga), *[repr(a) for a in r.test.group_acc], ""])
    return buf.getvalue()
