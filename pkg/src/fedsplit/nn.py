"""Small float64 neural-network engine with exact backpropagation.

Every layer implements ``forward(x, train) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)``.  A :class:`LayerStack` chains them and
records the caches on a single-use :class:`Tape`.  Losses use SUM reduction;
callers divide the upstream gradient by the batch size when they want a mean.
"""

from __future__ import annotations

import copy
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BlobError, ConfigError, NumericError, TapeError

DTYPE = np.float64


class LastLayerCutWarning(UserWarning):
    """Cutting after the final layer leaves the server without parameters."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"

    def params(self) -> list[np.ndarray]:
        return []

    def buffers(self) -> list[np.ndarray]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, dy, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Layer):
    kind = "identity"

    def forward(self, x, train):
        return x, None

    def backward(self, dy, cache):
        return dy, []


class Dense(Layer):
    """Affine map ``y = x @ W + b`` with ``W`` of shape (in, out)."""

    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"Dense sizes must be positive, got ({n_in}, {n_out})")
        self.n_in, self.n_out = n_in, n_out
        self.W = np.zeros((n_in, n_out), dtype=DTYPE)
        self.b = np.zeros(n_out, dtype=DTYPE)
        if rng is not None:
            self.initialize(rng)

    def initialize(self, rng):
        bound = 1.0 / math.sqrt(self.n_in)
        self.W[...] = rng.uniform(-bound, bound, size=self.W.shape)
        self.b[...] = rng.uniform(-bound, bound, size=self.b.shape)

    def params(self):
        return [self.W, self.b]

    def output_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise ConfigError(f"Dense expects input ({self.n_in},), got {in_shape}")
        return (self.n_out,)

    def forward(self, x, train):
        return x @ self.W + self.b, x

    def backward(self, dy, x):
        return dy @ self.W.T, [x.T @ dy, dy.sum(axis=0)]

    def __repr__(self):
        return f"Dense({self.n_in}, {self.n_out})"


class Conv2D(Layer):
    """Direct 2-D convolution on NCHW input."""

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None):
        if min(in_ch, out_ch, kernel, stride) < 1 or pad < 0:
            raise ConfigError("Conv2D needs positive channels/kernel/stride and pad >= 0")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.W = np.zeros((out_ch, in_ch, kernel, kernel), dtype=DTYPE)
        self.b = np.zeros(out_ch, dtype=DTYPE)
        if rng is not None:
            self.initialize(rng)

    def initialize(self, rng):
        bound = 1.0 / math.sqrt(self.in_ch * self.kernel * self.kernel)
        self.W[...] = rng.uniform(-bound, bound, size=self.W.shape)
        self.b[...] = rng.uniform(-bound, bound, size=self.b.shape)

    def params(self):
        return [self.W, self.b]

    def _out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ConfigError(f"Conv2D expects ({self.in_ch}, H, W), got {in_shape}")
        ho, wo = self._out_hw(in_shape[1], in_shape[2])
        if ho < 1 or wo < 1:
            raise ConfigError(f"Conv2D kernel {self.kernel} too large for {in_shape}")
        return (self.out_ch, ho, wo)

    def forward(self, x, train):
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = cols[:, :, ::s, ::s]  # (N, C, Ho, Wo, k, k)
        y = np.einsum("nchwij,ocij->nohw", cols, self.W) + self.b[None, :, None, None]
        return y, (x.shape, cols)

    def backward(self, dy, cache):
        x_shape, cols = cache
        k, s, p = self.kernel, self.stride, self.pad
        dW = np.einsum("nohw,nchwij->ocij", dy, cols)
        db = dy.sum(axis=(0, 2, 3))
        dcols = np.einsum("nohw,ocij->nchwij", dy, self.W)
        n, c, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j]
        dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
        return dx, [dW, db]

    def __repr__(self):
        return (f"Conv2D({self.in_ch}, {self.out_ch}, kernel={self.kernel}, "
                f"stride={self.stride}, pad={self.pad})")


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, []


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, shape):
        return dy.reshape(shape), []


class GlobalAvgPool(Layer):
    """Mean over the spatial axes of NCHW input, giving (N, C)."""

    kind = "gap"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"GlobalAvgPool expects (C, H, W), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, train):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, shape):
        hw = shape[2] * shape[3]
        return np.broadcast_to(dy[:, :, None, None] / hw, shape).copy(), []


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


class BatchNorm(Layer):
    """Batch normalization over the batch (and spatial) axes.

    Train mode normalizes with the current batch statistics and updates the
    running estimates with ``running = (1 - momentum) * running + momentum * batch``.
    Eval mode uses the running estimates.
    """

    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = np.ones(channels, dtype=DTYPE)
        self.beta = np.zeros(channels, dtype=DTYPE)
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ConfigError(f"BatchNorm({self.channels}) got input {in_shape}")
        return in_shape

    def forward(self, x, train):
        axes = (0,) + tuple(range(2, x.ndim))
        gamma, beta = _channel_view(self.gamma, x.ndim), _channel_view(self.beta, x.ndim)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - _channel_view(mean, x.ndim)) * _channel_view(inv_std, x.ndim)
        return gamma * xhat + beta, (xhat, inv_std, axes, train)

    def backward(self, dy, cache):
        xhat, inv_std, axes, train = cache
        ndim = dy.ndim
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * _channel_view(self.gamma, ndim)
        if not train:
            return dxhat * _channel_view(inv_std, ndim), [dgamma, dbeta]
        m = dy.size // self.channels
        dx = _channel_view(inv_std, ndim) / m * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, [dgamma, dbeta]

    def __repr__(self):
        return f"BatchNorm({self.channels})"


class GroupNorm(Layer):
    """Per-sample normalization over groups of channels (batch independent)."""

    kind = "groupnorm"

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if groups < 1 or channels % groups:
            raise ConfigError(
                f"GroupNorm: {groups} groups do not divide {channels} channels; "
                f"try {largest_divisor(channels, groups)}")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.gamma = np.ones(channels, dtype=DTYPE)
        self.beta = np.zeros(channels, dtype=DTYPE)

    def params(self):
        return [self.gamma, self.beta]

    def output_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ConfigError(f"GroupNorm({self.channels}) got input {in_shape}")
        return in_shape

    def forward(self, x, train):
        n = x.shape[0]
        xg = x.reshape(n, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + self.eps)
        xhat = ((xg - mean) * inv_std).reshape(x.shape)
        gamma, beta = _channel_view(self.gamma, x.ndim), _channel_view(self.beta, x.ndim)
        return gamma * xhat + beta, (xhat, inv_std)

    def backward(self, dy, cache):
        xhat, inv_std = cache
        n = dy.shape[0]
        axes = (0,) + tuple(range(2, dy.ndim))
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = (dy * _channel_view(self.gamma, dy.ndim)).reshape(n, self.groups, -1)
        xh = xhat.reshape(n, self.groups, -1)
        m = xh.shape[2]
        dx = inv_std / m * (
            m * dxhat
            - dxhat.sum(axis=2, keepdims=True)
            - xh * (dxhat * xh).sum(axis=2, keepdims=True)
        )
        return dx.reshape(dy.shape), [dgamma, dbeta]

    def __repr__(self):
        return f"GroupNorm({self.groups}, {self.channels})"


def largest_divisor(n: int, at_most: int) -> int:
    """Largest divisor of ``n`` not exceeding ``at_most``."""
    for d in range(min(n, max(at_most, 1)), 0, -1):
        if n % d == 0:
            return d
    return 1


# ---------------------------------------------------------------------------
# Stacks, tapes, splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    kind: str  # "classification" | "regression"
    classes: int = 1

    @property
    def out_width(self) -> int:
        return self.classes if self.kind == "classification" else 1

    @property
    def loss_kind(self) -> str:
        return "ce" if self.kind == "classification" else "l1"


def classification(classes: int) -> Task:
    if classes < 2:
        raise ConfigError("classification needs at least 2 classes")
    return Task("classification", classes)


REGRESSION = Task("regression", 1)


@dataclass
class LayerStack:
    """Ordered layers plus an optional task contract.

    ``input_shape`` is the per-sample shape (no batch axis).  When it is set,
    the layer chain is validated at construction.
    """

    layers: list[Layer]
    task: Task | None = None
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.layers = list(self.layers)
        if self.input_shape is not None:
            self.input_shape = tuple(self.input_shape)
            out = self.output_shape()
            if self.task is not None and out != (self.task.out_width,):
                raise ConfigError(
                    f"stack output {out} does not match task needing ({self.task.out_width},)")

    def __len__(self):
        return len(self.layers)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample shapes at every layer boundary (N+1 entries)."""
        if self.input_shape is None:
            raise ConfigError("stack has no input_shape")
        out = [self.input_shape]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> list[np.ndarray]:
        return [b for layer in self.layers for b in layer.buffers()]

    def state_tensors(self) -> list[np.ndarray]:
        """Learnable parameters followed by running-statistic buffers."""
        return self.params() + self.buffers()

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    @property
    def n_state(self) -> int:
        return sum(t.size for t in self.state_tensors())

    def copy(self) -> "LayerStack":
        return copy.deepcopy(self)

    def load_state(self, tensors: Sequence[np.ndarray]) -> None:
        own = self.state_tensors()
        if len(own) != len(tensors):
            raise ConfigError(f"expected {len(own)} tensors, got {len(tensors)}")
        for dst, src in zip(own, tensors):
            if dst.shape != np.shape(src):
                raise ConfigError(f"tensor shape {np.shape(src)} != {dst.shape}")
            dst[...] = src


class Tape:
    """Caches of one forward pass; consumed by exactly one backward pass."""

    def __init__(self, stack: LayerStack, caches: list, in_shape, out_shape):
        self._stack_id = id(stack)
        self.caches = caches
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.used = False


def forward(stack: LayerStack, batch: np.ndarray, train: bool = True):
    """Run ``batch`` through every layer; returns ``(output, tape)``."""
    x = np.asarray(batch, dtype=DTYPE)
    if stack.input_shape is not None and x.shape[1:] != stack.input_shape:
        raise ConfigError(f"batch shape {x.shape[1:]} does not match stack input {stack.input_shape}")
    in_shape = x.shape
    caches = []
    for i, layer in enumerate(stack.layers):
        x, cache = layer.forward(x, train)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite activation after layer {i} ({layer!r})")
        caches.append(cache)
    return x, Tape(stack, caches, in_shape, x.shape)


def backward(stack: LayerStack, tape: Tape, upstream_grad: np.ndarray):
    """Backpropagate ``upstream_grad``; returns ``(input_grad, weight_grads)``.

    ``weight_grads`` follows the order of ``stack.params()``.
    """
    if tape.used:
        raise TapeError("tape already consumed by a backward pass")
    if tape._stack_id != id(stack) or len(tape.caches) != len(stack.layers):
        raise TapeError("tape was recorded on a different stack")
    dy = np.asarray(upstream_grad, dtype=DTYPE)
    if dy.shape != tape.out_shape:
        raise ConfigError(f"upstream grad shape {dy.shape} != output shape {tape.out_shape}")
    tape.used = True
    per_layer = []
    for layer, cache in zip(reversed(stack.layers), reversed(tape.caches)):
        dy, grads = layer.backward(dy, cache)
        per_layer.append(grads)
    grads = [g for layer_grads in reversed(per_layer) for g in layer_grads]
    return dy, grads


@dataclass
class SubNetworks:
    institutional: LayerStack  # layers 1..c
    server: LayerStack  # layers c+1..N
    cut: int


def split(stack: LayerStack, cut: int) -> SubNetworks:
    """Split at ``cut``; both halves share the original Layer objects."""
    n = len(stack.layers)
    if not 0 <= cut <= n:
        raise ConfigError(f"cut {cut} outside 0..{n}")
    if cut == n:
        warnings.warn("cut after the last layer: server sub-network has no layers",
                      LastLayerCutWarning, stacklevel=2)
    cut_shape = None
    if stack.input_shape is not None:
        cut_shape = stack.shapes()[cut]
    fi = LayerStack(stack.layers[:cut], None, stack.input_shape)
    fs = LayerStack(stack.layers[cut:], stack.task, cut_shape)
    return SubNetworks(fi, fs, cut)


def join(institutional: LayerStack, server: LayerStack) -> LayerStack:
    return LayerStack(institutional.layers + server.layers, server.task,
                      institutional.input_shape)


def concat_batch(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Stack per-institution batches along axis 0, in the order given."""
    if len(parts) == 0:
        raise ConfigError("concat_batch needs at least one part")
    trailing = np.shape(parts[0])[1:]
    for i, p in enumerate(parts):
        if np.shape(p)[1:] != trailing:
            raise ConfigError(f"part {i} trailing dims {np.shape(p)[1:]} != {trailing}")
    return np.concatenate([np.asarray(p) for p in parts], axis=0)


def split_batch(x: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_batch` given the part sizes."""
    if sum(sizes) != x.shape[0]:
        raise ConfigError(f"sizes sum to {sum(sizes)}, batch has {x.shape[0]} rows")
    return np.split(x, np.cumsum(sizes)[:-1], axis=0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _targets(predictions, labels, kind):
    p = np.asarray(predictions, dtype=DTYPE)
    y = np.asarray(labels)
    if p.ndim != 2:
        raise ConfigError(f"predictions must be (N, width), got {p.shape}")
    n, width = p.shape
    if kind == "ce":
        if y.shape == (n, width) and width > 1:
            return p, y.astype(DTYPE)
        idx = y.reshape(-1)
        if idx.shape[0] != n:
            raise ConfigError(f"{idx.shape[0]} labels for {n} predictions")
        if not np.all(idx == np.round(idx)) or idx.min() < 0 or idx.max() >= width:
            raise ConfigError(f"class labels must be integers in [0, {width})")
        t = np.zeros((n, width), dtype=DTYPE)
        t[np.arange(n), idx.astype(np.int64)] = 1.0
        return p, t
    if kind == "l1":
        y = y.astype(DTYPE).reshape(p.shape) if y.size == p.size else None
        if y is None:
            raise ConfigError(f"label shape {np.shape(labels)} does not match {p.shape}")
        return p, y
    raise ConfigError(f"unknown loss kind {kind!r}")


def per_sample_loss(kind: str, predictions, labels):
    """Per-row loss terms and the gradient of their SUM w.r.t. predictions."""
    p, t = _targets(predictions, labels, kind)
    if kind == "ce":
        zmax = p.max(axis=1, keepdims=True)
        lse = zmax + np.log(np.exp(p - zmax).sum(axis=1, keepdims=True))
        terms = -(t * (p - lse)).sum(axis=1)
        probs = np.exp(p - lse)
        grad = probs * t.sum(axis=1, keepdims=True) - t
        return terms, grad
    r = p - t
    return np.abs(r).sum(axis=1), np.sign(r)


def loss(kind: str, predictions, labels):
    """SUM-reduced loss; returns ``(value, d value / d predictions)``.

    ``kind`` is ``"ce"`` (softmax cross-entropy on logits) or ``"l1"``.
    """
    terms, grad = per_sample_loss(kind, predictions, labels)
    return math.fsum(terms.tolist()), grad


def loss_chunked(kind: str, chunks):
    """Loss over a batch delivered as ``[(predictions, labels), ...]`` chunks.

    Each chunk is reduced on its own and the chunk values are summed, which
    equals :func:`loss` on the concatenated batch.  Returns
    ``(value, chunk_grads, per_chunk_values)``.
    """
    if not chunks:
        raise ConfigError("loss_chunked needs at least one chunk")
    values, grads = [], []
    for pred, lab in chunks:
        v, g = loss(kind, pred, lab)
        values.append(v)
        grads.append(g)
    return math.fsum(values), grads, values


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 0.001
    momentum: float = 0.9
    buffers: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    @classmethod
    def for_params(cls, params, lr=0.001, momentum=0.9):
        return cls(lr, momentum, [np.zeros_like(p) for p in params])


def sgd_step(weights: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState):
    """Classical momentum in place: ``v = mu * v + g; w -= lr * v``."""
    if not state.buffers:
        state.buffers = [np.zeros_like(w) for w in weights]
    if not (len(weights) == len(grads) == len(state.buffers)):
        raise ConfigError("weights, grads and momentum buffers differ in count")
    for w, g, v in zip(weights, grads, state.buffers):
        if w.shape != g.shape or w.shape != v.shape:
            raise ConfigError(f"shape mismatch in sgd_step: {w.shape} {g.shape} {v.shape}")
        v *= state.momentum
        v += g
        w -= state.lr * v
    return weights


def train_step(stack: LayerStack, opt: OptimState, x, y, kind: str | None = None) -> float:
    """One mean-normalized SGD step on a full stack; returns the SUM loss."""
    kind = kind or stack.task.loss_kind
    out, tape = forward(stack, x, train=True)
    value, grad = loss(kind, out, y)
    _, grads = backward(stack, tape, grad / out.shape[0])
    sgd_step(stack.params(), grads, opt)
    return value


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def _relu_masks(stack, tape):
    return [c for layer, c in zip(stack.layers, tape.caches) if isinstance(layer, ReLU)]


def _same_masks(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(stack: LayerStack, batch, labels, kind: str, eps: float = 1e-5,
               max_entries: int = 400, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between backprop and central differences.

    The error of one entry is ``|a - n| / max(|a|, |n|, 1e-8)``; differences
    below the round-off bound of a central difference (``8 * ulp * |L| / eps``)
    count as agreement, which matters for gradients that are exactly zero
    (e.g. a bias feeding BatchNorm).  Entries whose perturbation flips any ReLU
    gate are skipped, since the loss is not differentiable across the kink.
    Buffers are restored afterwards.
    """
    params = stack.params()
    if not params:
        return 0.0
    saved = [b.copy() for b in stack.buffers()]
    rng = rng or np.random.default_rng(0)

    out, tape = forward(stack, batch, train=True)
    base_masks = _relu_masks(stack, tape)
    base, g = loss(kind, out, labels)
    _, analytic = backward(stack, tape, g)
    roundoff = 8 * np.finfo(DTYPE).eps * max(1.0, abs(base)) / eps

    entries = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if len(entries) > max_entries:
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[k] for k in sorted(pick)]

    def value_at():
        o, t = forward(stack, batch, train=True)
        return loss(kind, o, labels)[0], _relu_masks(stack, t)

    worst = 0.0
    for i, j in entries:
        flat = params[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        plus, m_plus = value_at()
        flat[j] = orig - eps
        minus, m_minus = value_at()
        flat[j] = orig
        if not (_same_masks(base_masks, m_plus) and _same_masks(base_masks, m_minus)):
            continue
        numeric = (plus - minus) / (2 * eps)
        a = analytic[i].reshape(-1)[j]
        if abs(a - numeric) <= roundoff:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    for dst, src in zip(stack.buffers(), saved):
        dst[...] = src
    return worst


# ---------------------------------------------------------------------------
# Weight blobs
# ---------------------------------------------------------------------------

MAGIC = b"FSW1"
BLOB_VERSION = 1


def serialize_tensors(tensors: Sequence[np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", BLOB_VERSION, len(tensors))]
    for t in tensors:
        t = np.asarray(t, dtype=DTYPE)
        out.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        out.append(t.astype("<f8").tobytes(order="C"))
    return b"".join(out)


def serialize_weights(stack: LayerStack) -> bytes:
    """Blob of all state tensors: ``FSW1 | version | count | (rank, dims, f64 payload)*``."""
    return serialize_tensors(stack.state_tensors())


def deserialize_weights(blob: bytes) -> list[np.ndarray]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise BlobError("bad magic; not an FSW1 weight blob")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != BLOB_VERSION:
        raise BlobError(f"unsupported blob version {version}")
    pos = 12
    tensors = []
    for k in range(count):
        if pos + 4 > len(blob):
            raise BlobError(f"blob truncated in header of tensor {k}")
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + 4 * rank > len(blob):
            raise BlobError(f"blob truncated in dims of tensor {k}")
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise BlobError(f"blob truncated in payload of tensor {k}")
        data = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=pos)
        tensors.append(data.astype(DTYPE).reshape(dims))
        pos += nbytes
    if pos != len(blob):
        raise BlobError(f"{len(blob) - pos} trailing bytes after last tensor")
    return tensors


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def mlp(n_in: int, hidden: Sequence[int], task: Task, rng: np.random.Generator,
        batchnorm: bool = False) -> LayerStack:
    """Dense[-BatchNorm]-ReLU blocks followed by a Dense output layer."""
    layers: list[Layer] = []
    width = n_in
    for h in hidden:
        layers.append(Dense(width, h, rng))
        if batchnorm:
            layers.append(BatchNorm(h))
        layers.append(ReLU())
        width = h
    layers.append(Dense(width, task.out_width, rng))
    return LayerStack(layers, task, (n_in,))


def small_cnn(in_shape: tuple[int, int, int], channels: Sequence[int], task: Task,
              rng: np.random.Generator, norm: str | None = "batch", kernel: int = 3) -> LayerStack:
    """Conv[-Norm]-ReLU blocks, global average pooling and a Dense head."""
    layers: list[Layer] = []
    c = in_shape[0]
    for ch in channels:
        layers.append(Conv2D(c, ch, kernel, 1, kernel // 2, rng))
        if norm == "batch":
            layers.append(BatchNorm(ch))
        elif norm == "group":
            layers.append(GroupNorm(default_groups(ch, True), ch))
        layers.append(ReLU())
        c = ch
    layers += [GlobalAvgPool(), Dense(c, task.out_width, rng)]
    return LayerStack(layers, task, tuple(in_shape))


def default_groups(channels: int, spatial: bool) -> int:
    """Group count for a GroupNorm over ``channels``.

    Up to 32 groups when each channel has spatial extent.  Flat features get
    at least two channels per group, since normalizing a single scalar
    always yields zero.
    """
    cap = 32 if spatial else min(32, channels // 2)
    return largest_divisor(channels, cap)


def with_group_norm(stack: LayerStack, groups: int | None = None) -> LayerStack:
    """Copy of ``stack`` with every BatchNorm replaced by GroupNorm.

    ``groups`` defaults to :func:`default_groups` per layer; without an input
    shape every feature is treated as flat.
    """
    out = stack.copy()
    shape = stack.input_shape
    for i, layer in enumerate(out.layers):
        if isinstance(layer, BatchNorm):
            spatial = shape is not None and len(shape) > 1
            g = default_groups(layer.channels, spatial) if groups is None else groups
            out.layers[i] = GroupNorm(g, layer.channels, layer.eps)
        if shape is not None:
            shape = layer.output_shape(shape)
    return out
