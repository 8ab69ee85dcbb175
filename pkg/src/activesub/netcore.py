"""Dense feedforward classifier with hand-written backpropagation.

The same network type serves as the substitute model being trained by the
attacker and as the in-process target oracle. Everything works on float64
numpy arrays; single inputs are 1-D, batches are 2-D with one row per
sample. Weights are stored ``(out, in)`` so a layer computes ``W @ x + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DomainError, FormatError, ShapeError, UsageError

ACTIVATIONS = ("relu", "tanh")

_MAGIC = b"ASNP"
_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes (input first, class count last) and hidden activations.

    ``activation`` may be a single name applied to every hidden layer or one
    name per hidden layer.
    """

    layer_sizes: tuple[int, ...]
    activation: tuple[str, ...] | str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise UsageError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise UsageError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise UsageError("class count must be at least 2")
        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(sizes) - 2)
        acts = tuple(acts)
        if len(acts) != len(sizes) - 2:
            raise UsageError(
                f"need {len(sizes) - 2} hidden activations, got {len(acts)}"
            )
        for a in acts:
            if a not in ACTIVATIONS:
                raise UsageError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", acts)

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        """Number of weight layers."""
        return len(self.layer_sizes) - 1


@dataclass(frozen=True, eq=False)
class Params:
    """Weights and biases of a network. Arrays are frozen read-only."""

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.array(b, dtype=np.float64) for b in self.biases)
        sizes = self.spec.layer_sizes
        if len(ws) != self.spec.n_layers or len(bs) != self.spec.n_layers:
            raise ShapeError("parameter count does not match the spec")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ShapeError(
                    f"layer {k}: got W{w.shape} b{b.shape}, "
                    f"expected W{(sizes[k + 1], sizes[k])} b{(sizes[k + 1],)}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DomainError(f"layer {k} has non-finite entries")
            w.flags.writeable = False
            b.flags.writeable = False
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, spec: NetworkSpec, arrays) -> "Params":
        arrays = list(arrays)
        return cls(spec, tuple(arrays[0::2]), tuple(arrays[1::2]))

    def equals(self, other: "Params") -> bool:
        """Bitwise equality of spec and every array."""
        return self.spec == other.spec and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(eq=False)
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    # layer inputs and pre-activations, consumed by backprop
    inputs: list[np.ndarray] = field(repr=False)
    preacts: list[np.ndarray] = field(repr=False)

    @property
    def label(self):
        return np.argmax(self.logits, axis=-1)


def init_params(spec: NetworkSpec, seed: int) -> Params:
    """Uniform fan-in scaled initialization, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = spec.layer_sizes
    ws, bs = [], []
    for k in range(spec.n_layers):
        fan_in = sizes[k]
        gain = 2.0 if k < len(spec.activation) and spec.activation[k] == "relu" else 1.0
        limit = np.sqrt(3.0 * gain / fan_in)
        ws.append(rng.uniform(-limit, limit, size=(sizes[k + 1], fan_in)))
        bs.append(np.zeros(sizes[k + 1]))
    return Params(spec, tuple(ws), tuple(bs))


def zero_params(spec: NetworkSpec) -> Params:
    sizes = spec.layer_sizes
    return Params(
        spec,
        tuple(np.zeros((sizes[k + 1], sizes[k])) for k in range(spec.n_layers)),
        tuple(np.zeros(sizes[k + 1]) for k in range(spec.n_layers)),
    )


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _as_batch(params: Params, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != params.spec.n_inputs:
        raise ShapeError(
            f"input shape {x.shape} does not match input dim {params.spec.n_inputs}"
        )
    return X, single


def _forward2d(params: Params, X: np.ndarray) -> ForwardResult:
    inputs, preacts = [], []
    h = X
    last = params.spec.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        if k < last:
            h = np.maximum(z, 0.0) if params.spec.activation[k] == "relu" else np.tanh(z)
        else:
            h = z
    return ForwardResult(h, softmax(h), inputs, preacts)


def forward(params: Params, x) -> ForwardResult:
    """Run the network on one input (1-D) or a batch (2-D).

    For a single input the result arrays are 1-D; caches always keep the
    batch axis.
    """
    X, single = _as_batch(params, x)
    if not np.all(np.isfinite(X)):
        raise DomainError("input contains non-finite values")
    res = _forward2d(params, X)
    if single:
        res.logits = res.logits[0]
        res.probs = res.probs[0]
    return res


def predict(params: Params, X) -> np.ndarray:
    return np.asarray(forward(params, X).label)


def _backward(params: Params, res: ForwardResult, dlogits: np.ndarray, need_params=True):
    """Backpropagate ``dlogits`` (batch, C). Returns (dW list, db list, dX)."""
    g = dlogits
    dws, dbs = [], []
    for k in range(params.spec.n_layers - 1, -1, -1):
        if need_params:
            dws.append(g.T @ res.inputs[k])
            dbs.append(g.sum(axis=0))
        g = g @ params.weights[k]
        if k > 0:
            z = res.preacts[k - 1]
            if params.spec.activation[k - 1] == "relu":
                g = g * (z > 0)
            else:
                # layer input k is tanh of preact k-1
                g = g * (1.0 - res.inputs[k] ** 2)
    return dws[::-1], dbs[::-1], g


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (
        not np.issubdtype(labels.dtype, np.integer)
        or labels.min() < 0
        or labels.max() >= n_classes
    ):
        raise DomainError(f"labels must be integers in [0, {n_classes})")
    return labels.astype(np.int64)


def loss_and_grads(params: Params, X, y) -> tuple[float, Params]:
    """Mean cross-entropy over the batch and its parameter gradients.

    The gradient comes back packed in a :class:`Params` with the same spec.
    """
    X, _ = _as_batch(params, X)
    y = np.atleast_1d(_check_labels(y, params.spec.n_classes))
    if X.shape[0] == 0:
        raise UsageError("empty batch")
    if y.shape[0] != X.shape[0]:
        raise ShapeError("labels and inputs have different lengths")
    loss, dws, dbs = _loss_grads_raw(params, X, y)
    return loss, Params(params.spec, tuple(dws), tuple(dbs))


def _loss_grads_raw(params, X, y):
    res = _forward2d(params, X)
    m = X.shape[0]
    z = res.logits - res.logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(m), y]))
    d = res.probs.copy()
    d[np.arange(m), y] -= 1.0
    d /= m
    dws, dbs, _ = _backward(params, res, d)
    return loss, dws, dbs


@dataclass(frozen=True, eq=False)
class Head:
    """A differentiable scalar of the forward pass, chosen per sample.

    ``kind`` is one of ``"loss"`` (cross-entropy against label ``i``),
    ``"logit"`` (Z_i), ``"prob"`` (F_i) or ``"logit_diff"`` (Z_i - Z_j).
    ``i`` and ``j`` may be ints or per-row integer arrays for a batch.
    """

    kind: str
    i: object
    j: object = None

    @classmethod
    def loss(cls, label):
        return cls("loss", label)

    @classmethod
    def logit(cls, i):
        return cls("logit", i)

    @classmethod
    def prob(cls, i):
        return cls("prob", i)

    @classmethod
    def logit_diff(cls, i, j):
        return cls("logit_diff", i, j)


def _head_index(idx, m, n_classes, name):
    if idx is None:
        raise DomainError(f"head index {name} is required")
    arr = np.broadcast_to(np.asarray(idx), (m,))
    if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() >= n_classes:
        raise DomainError(f"head index {name}={idx!r} outside [0, {n_classes})")
    return arr.astype(np.int64)


def _head_value_and_dlogits(res: ForwardResult, head: Head, n_classes: int):
    m = res.logits.shape[0]
    rows = np.arange(m)
    onehot = np.zeros_like(res.logits)
    i = _head_index(head.i, m, n_classes, "i")
    if head.kind == "loss":
        z = res.logits - res.logits.max(axis=1, keepdims=True)
        value = np.log(np.exp(z).sum(axis=1)) - z[rows, i]
        d = res.probs.copy()
        d[rows, i] -= 1.0
    elif head.kind == "logit":
        value = res.logits[rows, i]
        d = onehot
        d[rows, i] = 1.0
    elif head.kind == "prob":
        value = res.probs[rows, i]
        onehot[rows, i] = 1.0
        d = value[:, None] * (onehot - res.probs)
    elif head.kind == "logit_diff":
        j = _head_index(head.j, m, n_classes, "j")
        value = res.logits[rows, i] - res.logits[rows, j]
        d = onehot
        d[rows, i] += 1.0
        d[rows, j] -= 1.0
    else:
        raise DomainError(f"unknown head kind {head.kind!r}")
    return value, d


def head_value(params: Params, x, head: Head):
    X, single = _as_batch(params, x)
    value, _ = _head_value_and_dlogits(_forward2d(params, X), head, params.spec.n_classes)
    return float(value[0]) if single else value


def input_gradient(params: Params, x, head: Head) -> np.ndarray:
    """Exact gradient of the head's scalar with respect to the input.

    For a batch, row ``r`` is the gradient of the head evaluated on row
    ``r`` alone (no averaging).
    """
    X, single = _as_batch(params, x)
    res = _forward2d(params, X)
    _, d = _head_value_and_dlogits(res, head, params.spec.n_classes)
    _, _, dx = _backward(params, res, d, need_params=False)
    return dx[0] if single else dx


def value_and_input_gradient(params: Params, X, head: Head, res: ForwardResult | None = None):
    """Batch-only helper returning (head values, input gradients, forward result).

    Pass ``res`` to reuse a forward pass already computed on ``X``.
    """
    if res is None:
        X, _ = _as_batch(params, X)
        res = _forward2d(params, X)
    value, d = _head_value_and_dlogits(res, head, params.spec.n_classes)
    _, _, dx = _backward(params, res, d, need_params=False)
    return value, dx, res


def prob_jacobian(params: Params, x) -> np.ndarray:
    """Jacobian dF_j/dx_i of the softmax output, shape (C, n) for one input."""
    X, _ = _as_batch(params, x)
    if X.shape[0] != 1:
        raise ShapeError("prob_jacobian takes a single input")
    res = _forward2d(params, X)
    p = res.probs[0]
    C = params.spec.n_classes
    # row j of dF/dZ is p_j (e_j - p)
    dlogits = p[:, None] * (np.eye(C) - p[None, :])
    rep = ForwardResult(
        res.logits.repeat(C, 0),
        res.probs.repeat(C, 0),
        [a.repeat(C, 0) for a in res.inputs],
        [a.repeat(C, 0) for a in res.preacts],
    )
    _, _, dx = _backward(params, rep, dlogits, need_params=False)
    return dx


class _Work(NamedTuple):
    spec: NetworkSpec
    weights: tuple
    biases: tuple


class SGD:
    """Plain gradient descent over a list of arrays, updated in place."""

    def __init__(self, learning_rate=0.05):
        self.learning_rate = learning_rate

    def step(self, arrays, grads):
        for a, g in zip(arrays, grads):
            a -= self.learning_rate * g


class Adam:
    """Adaptive-moment descent with bias correction, updated in place."""

    def __init__(self, learning_rate=0.005, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom *= 1.0 / np.sqrt(c2)
            denom += self.eps
            a -= (self.learning_rate / c1) * m / denom


def make_optimizer(name: str, learning_rate=None):
    if name in ("adam", "adaptive-moment"):
        return Adam() if learning_rate is None else Adam(learning_rate)
    if name in ("sgd", "gd"):
        return SGD() if learning_rate is None else SGD(learning_rate)
    raise UsageError(f"unknown optimizer {name!r}")


def train(
    params: Params,
    X,
    y,
    epochs: int,
    optimizer: str = "adam",
    seed: int = 0,
    batch_size: int = 32,
    learning_rate: float | None = None,
) -> Params:
    """Minibatch cross-entropy training; returns new params.

    The shuffle order is drawn from ``seed`` alone, so the result is a pure
    function of the arguments.
    """
    X, _ = _as_batch(params, X)
    y = np.atleast_1d(_check_labels(y, params.spec.n_classes))
    if X.shape[0] == 0:
        raise UsageError("cannot train on an empty dataset")
    if y.shape[0] != X.shape[0]:
        raise ShapeError("labels and inputs have different lengths")
    if epochs < 0 or batch_size < 1:
        raise UsageError("epochs must be >= 0 and batch_size >= 1")
    if epochs == 0:
        return params
    opt = make_optimizer(optimizer, learning_rate)
    rng = np.random.default_rng(seed)
    # one flat buffer; the per-layer arrays are views into it
    flat = np.concatenate([a.ravel() for a in params.arrays()])
    arrays, off = [], 0
    for a in params.arrays():
        arrays.append(flat[off:off + a.size].reshape(a.shape))
        off += a.size
    grad = np.zeros_like(flat)
    gviews, off = [], 0
    for a in arrays:
        gviews.append(grad[off:off + a.size].reshape(a.shape))
        off += a.size
    ws, bs = arrays[0::2], arrays[1::2]
    gws, gbs = gviews[0::2], gviews[1::2]
    relu = [a == "relu" for a in params.spec.activation]
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        Xs, ys = X[order], y[order]
        for start in range(0, n, batch_size):
            _grad_into(ws, bs, relu, Xs[start:start + batch_size],
                       ys[start:start + batch_size], gws, gbs)
            opt.step([flat], [grad])
    return Params.from_arrays(params.spec, arrays)


def _grad_into(ws, bs, relu, X, y, gws, gbs):
    """Mean cross-entropy parameter gradient written into the given views."""
    hs = [X]
    last = len(ws) - 1
    h = X
    for k in range(last):
        z = h @ ws[k].T
        z += bs[k]
        h = np.maximum(z, 0.0, out=z) if relu[k] else np.tanh(z, out=z)
        hs.append(h)
    z = h @ ws[last].T
    z += bs[last]
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    m = X.shape[0]
    z[np.arange(m), y] -= 1.0
    z /= m
    g = z
    for k in range(last, -1, -1):
        np.dot(g.T, hs[k], out=gws[k])
        np.sum(g, axis=0, out=gbs[k])
        if k > 0:
            g = g @ ws[k]
            # relu outputs are zero exactly where the derivative is zero
            if relu[k - 1]:
                g *= hs[k] > 0
            else:
                g *= 1.0 - hs[k] * hs[k]


def accuracy(params: Params, X, y) -> float:
    return float(np.mean(predict(params, X) == np.asarray(y)))


def save_params(path, params: Params) -> None:
    """Write the versioned little-endian binary parameter file."""
    spec = params.spec
    codes = [ACTIVATIONS.index(a) for a in spec.activation]
    parts = [
        _MAGIC,
        struct.pack("<II", _VERSION, len(spec.layer_sizes)),
        struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes),
        struct.pack(f"<{len(codes)}B", *codes),
    ]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> Params:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise FormatError("bad magic bytes in parameter file", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    version, n_sizes = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise FormatError(f"unsupported parameter file version {version}", 4)
    off = 12
    need = off + 4 * n_sizes + max(n_sizes - 2, 0)
    if len(data) < need:
        raise FormatError("truncated layer table", len(data))
    sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
    off += 4 * n_sizes
    codes = struct.unpack_from(f"<{n_sizes - 2}B", data, off)
    off += n_sizes - 2
    if any(c >= len(ACTIVATIONS) for c in codes):
        raise FormatError("unknown activation code", off - (n_sizes - 2))
    spec = NetworkSpec(tuple(sizes), tuple(ACTIVATIONS[c] for c in codes))
    arrays = []
    for k in range(spec.n_layers):
        for shape in ((sizes[k + 1], sizes[k]), (sizes[k + 1],)):
            count = int(np.prod(shape))
            if len(data) < off + 8 * count:
                raise FormatError("truncated weight block", len(data))
            arrays.append(np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape))
            off += 8 * count
    if off != len(data):
        raise FormatError("trailing bytes after weights", off)
    return Params.from_arrays(spec, arrays)
