"""Dense feed-forward networks with hand-written backpropagation.

Weights are stored as ``(in_features, out_features)`` matrices and a layer
computes ``act(x @ W + b)``.  Inputs may be a single feature vector or a
batch of row vectors; outputs keep the same rank.

Loss helpers come in value/gradient pairs.  Gradients are taken with respect
to the logits of each row, so callers decide how rows are weighted and
reduced.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, ShapeError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bias shape {self.b.shape} does not match weight {self.W.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpModel:
    """Stack of dense layers.  The last layer produces the logits."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[1] != nxt.W.shape[0]:
                raise ShapeError(
                    f"layer widths disagree: {prev.W.shape[1]} -> {nxt.W.shape[0]}"
                )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def widths(self) -> list[int]:
        return [layer.W.shape[1] for layer in self.layers]

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.W, layer.b])
        return out

    def same_params(self, other: "MlpModel") -> bool:
        """Bitwise parameter equality."""
        a, b = self.params(), other.params()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


@dataclass
class Gradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]
    dx: np.ndarray


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, scale: str = "he") -> MlpModel:
    """Random MLP with relu hidden layers and an identity output layer.

    ``sizes`` lists every width including input and output, e.g. ``[4, 16, 2]``.
    Biases start at zero.
    """
    if len(sizes) < 2:
        raise ShapeError("sizes needs input and output widths")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / fan_in) if scale == "he" else np.sqrt(1.0 / fan_in)
        W = rng.standard_normal((fan_in, fan_out)) * std
        act = "identity" if i == len(sizes) - 2 else "relu"
        layers.append(Layer(W, np.zeros(fan_out), act))
    return MlpModel(layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    return z


def forward(model: MlpModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Run the network.

    Returns the logits and ``taps``, the post-activation output of every
    layer: ``taps[d - 1]`` is the representation at depth ``d`` and
    ``taps[-1]`` equals the logits.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.in_dim:
        raise ShapeError(f"input width {x.shape[-1]} != model input {model.in_dim}")
    taps = []
    h = x
    for layer in model.layers:
        h = _activate(h @ layer.W + layer.b, layer.activation)
        taps.append(h)
    return h, taps


def backward(model: MlpModel, grad_logits, x, taps: list[np.ndarray]) -> Gradients:
    """Backpropagate ``grad_logits`` through a recorded forward pass.

    ``x`` and ``taps`` must come from the matching :func:`forward` call.
    For batched input the parameter gradients are summed over rows.
    The relu derivative at exactly zero is taken as 0.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_logits, dtype=np.float64)
    if len(taps) != model.depth or g.shape != taps[-1].shape:
        raise ShapeError("gradient/taps do not match the model")
    single = x.ndim == 1
    if single:
        x, g = x[None, :], g[None, :]
        taps = [t[None, :] for t in taps]
    dW = [None] * model.depth
    db = [None] * model.depth
    for d in range(model.depth - 1, -1, -1):
        layer = model.layers[d]
        if layer.activation == "relu":
            g = g * (taps[d] > 0.0)
        inp = taps[d - 1] if d > 0 else x
        dW[d] = inp.T @ g
        db[d] = g.sum(axis=0)
        g = g @ layer.W.T
    dx = g[0] if single else g
    return Gradients(dW, db, dx)


def sgd_step(model: MlpModel, grads: Gradients, lr: float, weight_decay: float = 0.0,
             layers: Sequence[int] | None = None) -> None:
    """In-place gradient descent step; ``layers`` restricts which are updated."""
    idx = range(model.depth) if layers is None else layers
    for d in idx:
        layer = model.layers[d]
        gW = grads.dW[d]
        if weight_decay:
            gW = gW + weight_decay * layer.W
        layer.W -= lr * gW
        layer.b -= lr * grads.db[d]


# ---------------------------------------------------------------- losses


def softmax_probs(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    out = np.zeros(y.shape + (k,))
    np.put_along_axis(out, y[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def cross_entropy(logits, y):
    """Per-row softmax cross-entropy against integer class labels."""
    logp = log_softmax(logits)
    y = np.asarray(y, dtype=np.int64)
    return -np.take_along_axis(logp, y[..., None], axis=-1)[..., 0]


def cross_entropy_grad(logits, y) -> np.ndarray:
    p = softmax_probs(logits)
    return p - _one_hot(y, p.shape[-1])


def kd_loss(student_logits, teacher_logits, tau: float):
    """Temperature-scaled distillation loss ``tau**2 * KL(teacher || student)``.

    Both distributions are softened by ``tau``.  Returns one value per row.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError("student and teacher logits differ in shape")
    log_q = log_softmax(s / tau)
    log_p = log_softmax(t / tau)
    p = np.exp(log_p)
    kl = (p * (log_p - log_q)).sum(axis=-1)
    return tau * tau * np.maximum(kl, 0.0)


def kd_grad(student_logits, teacher_logits, tau: float) -> np.ndarray:
    q = softmax_probs(np.asarray(student_logits, dtype=np.float64) / tau)
    p = softmax_probs(np.asarray(teacher_logits, dtype=np.float64) / tau)
    return tau * (q - p)


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def bce_loss(logits, targets):
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return -(y * _log_sigmoid(z) + (1.0 - y) * _log_sigmoid(-z))


def bce_grad(logits, targets) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * z)) - np.asarray(targets, dtype=np.float64)


def hinge_loss(scores, y_signed):
    """Elementwise ``max(0, 1 - y * s)`` with labels in {-1, +1}."""
    s = np.asarray(scores, dtype=np.float64)
    return np.maximum(0.0, 1.0 - np.asarray(y_signed) * s)


def hinge_grad(scores, y_signed) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_signed, dtype=np.float64)
    # subgradient 0 at the kink
    return np.where(1.0 - y * s > 0.0, -y, 0.0)


# ---------------------------------------------------------- gradient oracle


def central_difference(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = point.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(point))
        flat[i] = orig - h
        fm = float(f(point))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DivergenceError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_check(f: Callable[[np.ndarray], float], analytic_grad, point,
                      h: float = 1e-5) -> float:
    """Relative error ``|a - n| / max(|a|, |n|)`` in the Euclidean norm.

    Per-coordinate ratios blow up on components that are zero up to
    rounding, so the whole gradient is compared at once.
    """
    numeric = central_difference(f, point, h)
    analytic = np.asarray(analytic_grad, dtype=np.float64).reshape(numeric.shape)
    return relative_error(analytic, numeric)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def model_vector(model: MlpModel) -> np.ndarray:
    return np.concatenate([p.ravel() for p in model.params()])


def set_model_vector(model: MlpModel, vec) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != sum(p.size for p in model.params()):
        raise ShapeError("parameter vector length mismatch")
    pos = 0
    for layer in model.layers:
        for name in ("W", "b"):
            arr = getattr(layer, name)
            arr[...] = vec[pos:pos + arr.size].reshape(arr.shape)
            pos += arr.size


def gradients_vector(grads: Gradients) -> np.ndarray:
    parts = []
    for dW, db in zip(grads.dW, grads.db):
        parts.extend([dW.ravel(), db.ravel()])
    return np.concatenate(parts)
