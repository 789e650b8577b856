"""Seeded synthetic benchmarks with explicit group structure.

Every generator is a pure function of its arguments: the same spec and seed
give byte-identical arrays.

Text format (comma separated, LF line endings)::

    n,m,K            # header; K is the class count, or T for multi-label files
    x_1,...,x_m,label(s),group,split

``split`` is one of ``train``, ``val``, ``test``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .minmax import MultiTaskData, TaskBundle
from .rng import make_rng
from .saddle import MultiLabelDataset, PrivilegedPartition

SPLITS = ("train", "val", "test")


@dataclass
class LabeledView:
    """Features and labels only: the view handed to group-blind training."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class GroupedSplit:
    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    n_groups: int

    def __len__(self):
        return len(self.y)

    def view(self) -> LabeledView:
        return LabeledView(self.X, self.y)

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_groups)


@dataclass
class GroupedDataset:
    """Features, class labels, group ids and split tags.

    For the spurious benchmark the group id is ``label * n_attr + attribute``;
    classes are 0-indexed.
    """

    X: np.ndarray
    y: np.ndarray
    group: np.ndarray
    split: np.ndarray  # 0 train, 1 val, 2 test
    n_classes: int = 2
    n_attr: int = 2

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.group = np.asarray(self.group, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        n = self.X.shape[0]
        if not (len(self.y) == len(self.group) == len(self.split) == n):
            raise DataError("feature, label, group and split lengths disagree")
        if np.any(self.group // self.n_attr != self.y):
            raise DataError("group ids are inconsistent with labels")
        if np.any((self.split < 0) | (self.split > 2)):
            raise DataError("unknown split tag")

    @property
    def n_groups(self) -> int:
        return self.n_classes * self.n_attr

    @property
    def attr(self) -> np.ndarray:
        return self.group % self.n_attr

    def conflicting_groups(self) -> list[int]:
        """Groups whose spurious attribute disagrees with the label."""
        return [g for g in range(self.n_groups) if g // self.n_attr != g % self.n_attr]

    def aligned_groups(self) -> list[int]:
        return [g for g in range(self.n_groups) if g // self.n_attr == g % self.n_attr]

    def part(self, name: str) -> GroupedSplit:
        mask = self.split == SPLITS.index(name)
        return GroupedSplit(self.X[mask], self.y[mask], self.group[mask], self.n_groups)

    def training_view(self) -> LabeledView:
        return self.part("train").view()

    # -- serialization

    def to_text(self) -> str:
        buf = io.StringIO()
        n, m = self.X.shape
        buf.write(f"{n},{m},{self.n_classes}\n")
        for x, y, g, s in zip(self.X, self.y, self.group, self.split):
            buf.write(",".join(repr(float(v)) for v in x))
            buf.write(f",{y},{g},{SPLITS[s]}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, n_attr: int = 2) -> "GroupedDataset":
        X, labels, groups, splits, K = _parse(text, n_labels=1)
        return cls(X, labels[:, 0].astype(np.int64), groups, splits, K, n_attr)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path, n_attr: int = 2) -> "GroupedDataset":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), n_attr)


def _parse(text: str, n_labels: int | None):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty dataset file")
    try:
        n, m, K = (int(v) for v in lines[0].split(","))
    except ValueError as exc:
        raise DataError(f"bad header {lines[0]!r}") from exc
    n_lab = K if n_labels is None else n_labels
    if len(lines) - 1 != n:
        raise DataError(f"header says {n} rows, found {len(lines) - 1}")
    X = np.zeros((n, m))
    labels = np.zeros((n, n_lab))
    groups = np.zeros(n, dtype=np.int64)
    splits = np.zeros(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != m + n_lab + 2:
            raise DataError(f"row {i + 1} has {len(cells)} cells, expected {m + n_lab + 2}")
        try:
            X[i] = [float(c) for c in cells[:m]]
            labels[i] = [float(c) for c in cells[m:m + n_lab]]
            groups[i] = int(cells[m + n_lab])
            splits[i] = SPLITS.index(cells[m + n_lab + 1].strip())
        except ValueError as exc:
            raise DataError(f"row {i + 1}: {exc}") from exc
    return X, labels, groups, splits, K


# --------------------------------------------------------- spurious binary


@dataclass
class SpuriousSpec:
    rho: float = 0.95
    core_snr: float = 3.0
    spur_snr: float = 8.0
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 1000
    core_dim: int = 2
    spur_dim: int = 2
    noise_dim: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0.5, 1)")
        if self.core_snr <= 0 or self.spur_snr <= 0:
            raise ValueError("signal-to-noise ratios must be positive")
        if min(self.core_dim, self.spur_dim) < 1 or self.noise_dim < 0:
            raise ValueError("feature block sizes must be positive")


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _train_quota(n: int, rho: float) -> np.ndarray:
    """Group sizes for the training split; index ``2 * label + attribute``."""
    per_class = [n // 2, n - n // 2]
    counts = np.zeros(4, dtype=np.int64)
    for y in (0, 1):
        minority = int(round((1.0 - rho) * per_class[y]))
        counts[2 * y + y] = per_class[y] - minority
        counts[2 * y + (1 - y)] = minority
    return counts


def _balanced_quota(n: int) -> np.ndarray:
    base = np.full(4, n // 4, dtype=np.int64)
    base[: n % 4] += 1
    return base


def gen_spurious_binary(spec: SpuriousSpec) -> GroupedDataset:
    """Two-class data whose spurious block agrees with the label w.p. ``rho``.

    The causal block separates the class means by ``core_snr`` along a fixed
    unit direction; the spurious block separates the attribute means by
    ``spur_snr``.  Both blocks carry unit Gaussian noise, followed by
    ``noise_dim`` pure-noise coordinates.  Training groups are filled by
    quota, so the bias-conflicting share per class is exactly
    ``round((1 - rho) * n_class) / n_class``; val and test are group balanced.
    """
    rng = make_rng(spec.seed, "gen_spurious_binary")
    u_core = _unit(rng, spec.core_dim)
    u_spur = _unit(rng, spec.spur_dim)
    quotas = [_train_quota(spec.n_train, spec.rho), _balanced_quota(spec.n_val),
              _balanced_quota(spec.n_test)]
    groups, splits = [], []
    for s, q in enumerate(quotas):
        g = np.repeat(np.arange(4), q)
        g = g[rng.permutation(len(g))]
        groups.append(g)
        splits.append(np.full(len(g), s))
    group = np.concatenate(groups)
    split = np.concatenate(splits)
    y = group // 2
    a = group % 2
    n = len(group)
    sy = 2.0 * y - 1.0
    sa = 2.0 * a - 1.0
    core = (0.5 * spec.core_snr) * sy[:, None] * u_core + rng.standard_normal((n, spec.core_dim))
    spur = (0.5 * spec.spur_snr) * sa[:, None] * u_spur + rng.standard_normal((n, spec.spur_dim))
    noise = rng.standard_normal((n, spec.noise_dim))
    X = np.hstack([core, spur, noise])
    return GroupedDataset(X, y, group, split, 2, 2)


# ------------------------------------------------------------- multi-label


@dataclass
class MultiLabelBundle:
    data: MultiLabelDataset
    partition: PrivilegedPartition
    W_prior: np.ndarray

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"{self.data.n},{self.data.m},{self.data.T}\n")
        for x, yrow in zip(self.data.X, self.data.Y):
            buf.write(",".join(repr(float(v)) for v in x))
            buf.write("," + ",".join(str(int(v)) for v in yrow) + ",0,train\n")
        return buf.getvalue()


def ridge_prior(X, Y, ridge: float = 1.0) -> np.ndarray:
    """One ridge regression per label on the signed targets: ``(T, m)``."""
    X = np.asarray(X, dtype=np.float64)
    A = X.T @ X + ridge * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ np.asarray(Y, dtype=np.float64)).T


def gen_multilabel(n: int = 200, m: int = 10, T: int = 6, overlap: float = 1.0, seed: int = 0,
                   n_privileged: int = 2, max_labels: int = 2, ridge: float = 1.0
                   ) -> MultiLabelBundle:
    """Instances built from label prototypes plus isotropic noise.

    Each instance carries 1..``max_labels`` labels and its features are the
    sum of their prototypes (orthonormal when ``m >= T``) plus
    ``overlap``-scaled Gaussian noise, so ``overlap`` controls how often
    negatives outscore true labels.  The prior weights come from a ridge pass
    per label; the first ``n_privileged`` labels form the privileged set.
    """
    if T < 2:
        raise ValueError("need T >= 2")
    rng = make_rng(seed, "gen_multilabel")
    if m >= T:
        protos = np.linalg.qr(rng.standard_normal((m, m)))[0][:, :T].T
    else:
        protos = rng.standard_normal((T, m))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    Y = -np.ones((n, T))
    for i in range(n):
        c = int(rng.integers(1, max_labels + 1))
        Y[i, rng.choice(T, size=c, replace=False)] = 1.0
    X = (Y > 0).astype(np.float64) @ protos + overlap * rng.standard_normal((n, m))
    data = MultiLabelDataset(X, Y)
    partition = PrivilegedPartition.from_privileged(range(n_privileged), T)
    return MultiLabelBundle(data, partition, ridge_prior(X, Y, ridge))


def multilabel_from_text(text: str, n_privileged: int = 2, ridge: float = 1.0
                         ) -> MultiLabelBundle:
    X, labels, _, _, T = _parse(text, n_labels=None)
    data = MultiLabelDataset(X, labels)
    partition = PrivilegedPartition.from_privileged(range(n_privileged), T)
    return MultiLabelBundle(data, partition, ridge_prior(X, labels, ridge))


def nonempty_confusion_fraction(W, data: MultiLabelDataset) -> float:
    """Share of (instance, true label) pairs whose confusing set is non-empty."""
    Z = data.X @ np.asarray(W).T
    neg = data.Y < 0
    M = neg[:, None, :] & (Z[:, None, :] >= Z[:, :, None])
    pos = data.Y > 0
    return float((M.any(axis=2) & pos).sum() / pos.sum())


# -------------------------------------------------------------- multi-task


def gen_multitask_data(k: int = 2, n: int = 400, seed: int = 0, noise=None, dim: int = 8,
                       angle: float = 1.5, n_val: int | None = None,
                       noisy_val: bool = False) -> MultiTaskData:
    """Binary tasks over shared Gaussian features with per-task label noise.

    Task ``i`` labels ``x`` by the sign of ``x . w_i`` where
    ``w_i = cos(angle) u_0 + sin(angle) e_i`` for orthonormal ``u_0, e_i``,
    so all tasks are symmetric about ``u_0``.  Training labels of task ``i``
    are flipped with probability ``noise[i]``; validation labels stay clean
    unless ``noisy_val``.
    """
    if k < 2:
        raise ValueError("need k >= 2")
    if dim < k + 1:
        raise ValueError("dim must exceed k")
    noise = np.zeros(k) if noise is None else np.asarray(noise, dtype=np.float64)
    if noise.shape != (k,):
        raise ValueError("one noise rate per task")
    n_val = n if n_val is None else n_val
    rng = make_rng(seed, "gen_multitask")
    basis = np.linalg.qr(rng.standard_normal((dim, dim)))[0].T
    W = np.cos(angle) * basis[0][None, :] + np.sin(angle) * basis[1:k + 1]

    def draw(count, flip):
        X = rng.standard_normal((count, dim))
        Y = (X @ W.T > 0).astype(np.float64)
        if flip:
            flips = rng.uniform(size=(count, k)) < noise[None, :]
            Y = np.where(flips, 1.0 - Y, Y)
        return X, Y

    X_tr, Y_tr = draw(n, True)
    X_va, Y_va = draw(n_val, noisy_val)
    return MultiTaskData(X_tr, Y_tr, X_va, Y_va)


def gen_multitask(k: int = 2, n: int = 400, seed: int = 0, noise=None, **kwargs) -> TaskBundle:
    l2 = kwargs.pop("l2", False)
    return gen_multitask_data(k, n, seed, noise, **kwargs).bundle(l2=l2)
