"""Average and worst-group accuracy from exact counts."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError
from .nn import MlpModel, forward


@dataclass
class MetricsRow:
    method: str
    seed: int
    avg_acc: float
    wga: float
    group_acc: list[float] = field(default_factory=list)
    group_correct: list[int] = field(default_factory=list)
    group_total: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def worst_group(self) -> int:
        return int(np.argmin(self.group_acc))

    def as_dict(self) -> dict:
        out = {"method": self.method, "seed": self.seed, "avg_acc": self.avg_acc,
               "wga": self.wga}
        out.update({f"cfg_{k}": v for k, v in sorted(self.config.items())})
        out.update({f"group_{g}_acc": a for g, a in enumerate(self.group_acc)})
        return out


def predict(model: MlpModel, X) -> np.ndarray:
    logits, _ = forward(model, X)
    return np.argmax(logits, axis=-1)


def metrics_from_predictions(pred, y, group, n_groups: int, method: str = "",
                             seed: int = 0) -> MetricsRow:
    correct = np.asarray(pred) == np.asarray(y)
    group = np.asarray(group)
    totals = np.bincount(group, minlength=n_groups)
    hits = np.bincount(group, weights=correct.astype(np.int64), minlength=n_groups)
    hits = hits.astype(np.int64)
    if np.any(totals == 0):
        raise DataError(f"empty group(s): {np.flatnonzero(totals == 0).tolist()}")
    accs = [Fraction(int(h), int(t)) for h, t in zip(hits, totals)]
    overall = Fraction(int(hits.sum()), int(totals.sum()))
    return MetricsRow(method, seed, float(overall), float(min(accs)),
                      [float(a) for a in accs], hits.tolist(), totals.tolist())


def eval_metrics(model: MlpModel, split, method: str = "", seed: int = 0) -> MetricsRow:
    """Per-group accuracy of ``model`` on a group-annotated split."""
    return metrics_from_predictions(predict(model, split.X), split.y, split.group,
                                    split.n_groups, method, seed)
