"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operators the confidence network and the hourglass refiner need are
provided. Every op records a closure on the output tensor; ``backward`` walks
the graph in reverse topological order and then frees it, so a second
backward through the same graph raises :class:`GraphError` instead of
silently double-counting.

Also here: momentum SGD, a central-difference gradient checker and the
binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, CodecError, DimensionError, FormatError, GraphError, NonFiniteError

DTYPE = np.float64


def _check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """An N-d array with an optional gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed", "_retain")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._freed = False
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this intermediate node after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self, grad=None):
        if self._freed:
            raise GraphError("graph already freed by a previous backward; re-run the forward pass")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError("backward without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != self.shape:
            raise DimensionError(f"grad shape {grad.shape} != tensor shape {self.shape}")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                _check_finite(node.grad, f"gradient of {node._op}")
                node._backward(node.grad)
            node._backward = None
            node._parents = ()
            node._freed = True
            if not node._retain:
                node.grad = None

    # operator sugar; all delegate to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data, parents, backward, op):
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, True, tuple(parents), backward, op)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _operands(x, y, op):
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape and x.data.size != 1 and y.data.size != 1:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ (only scalar broadcasting)")
    return x, y


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- pointwise


def add(x, y) -> Tensor:
    x, y = _operands(x, y, "add")

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(g, y.shape))

    return _result(x.data + y.data, (x, y), backward, "add")


def sub(x, y) -> Tensor:
    x, y = _operands(x, y, "sub")

    def backward(g):
        _accumulate(x, _unbroadcast(g, x.shape))
        _accumulate(y, _unbroadcast(-g, y.shape))

    return _result(x.data - y.data, (x, y), backward, "sub")


def mul(x, y) -> Tensor:
    """Pointwise product."""
    x, y = _operands(x, y, "mul")

    def backward(g):
        _accumulate(x, _unbroadcast(g * y.data, x.shape))
        _accumulate(y, _unbroadcast(g * x.data, y.shape))

    return _result(x.data * y.data, (x, y), backward, "mul")


mul_pointwise = mul


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0

    def backward(g):
        _accumulate(x, g * positive)

    return _result(np.where(positive, x.data, 0.0), (x,), backward, "relu")


_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    # keep the codomain open even where exp under/overflows in float64
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward, "sigmoid")


def concat_channels(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ArgumentError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate {x.shape} with {ref} along channels")
    splits = np.cumsum([x.shape[1] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=1)):
            _accumulate(x, part)

    return _result(np.concatenate([x.data for x in xs], axis=1), xs, backward, "concat")


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape))

    return _result(np.asarray(x.data.mean()), (x,), backward, "mean")


# ---------------------------------------------------------------- convolution


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int | None = None  # None means "same": kernel // 2

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ArgumentError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ArgumentError("stride must be 1 or 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ArgumentError("channel counts must be positive")
        if self.padding is not None and self.padding < 0:
            raise ArgumentError("padding must be non-negative")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding

    def output_size(self, height, width):
        k, s, p = self.kernel, self.stride, self.pad
        return (height + 2 * p - k) // s + 1, (width + 2 * p - k) // s + 1


def _im2col(xp, k, stride, ho, wo):
    """(N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(cols, shape, k, stride, ho, wo):
    n, c, hp, wp = shape
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x, w, b, spec: ConvSpec | None = None) -> Tensor:
    """Cross-correlation of an NCHW input with (out, in, k, k) weights."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    if spec is None:
        spec = ConvSpec(w.shape[1], w.shape[0], w.shape[2])
    k, s, p = spec.kernel, spec.stride, spec.pad
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(f"conv2d input {x.shape} does not have {spec.in_channels} channels")
    if w.shape != (spec.out_channels, spec.in_channels, k, k):
        raise DimensionError(f"conv2d weight {w.shape} does not match {spec}")
    if b is not None and b.shape != (spec.out_channels,):
        raise DimensionError(f"conv2d bias {b.shape} does not match {spec.out_channels} channels")
    n, _, h, wd = x.shape
    ho, wo = spec.output_size(h, wd)
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, s, ho, wo)
    w2 = w.data.reshape(spec.out_channels, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, spec.out_channels, ho, wo)

    def backward(g):
        g2 = g.reshape(n, spec.out_channels, ho * wo)
        if w.requires_grad:
            _accumulate(w, np.matmul(g2, cols.transpose(0, 2, 1)).sum(0).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=(0, 2)))
        if not x.requires_grad:
            return
        if s == 1 and 2 * p == k - 1:
            # same-size stride-1 case: the input gradient is a correlation of g with the flipped kernel
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(spec.in_channels, -1)
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
            _accumulate(x, np.matmul(wf, _im2col(gp, k, 1, h, wd)).reshape(x.shape))
        else:
            dxp = _col2im(np.matmul(w2.T, g2), xp.shape, k, s, ho, wo)
            _accumulate(x, dxp[:, :, p : p + h, p : p + wd] if p else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm2d(x, gamma, beta, state: BatchNormState, train: bool = True) -> Tensor:
    """Per-channel normalisation of an NCHW tensor.

    Train mode normalises with biased batch statistics and folds the batch
    mean and unbiased variance into ``state``; eval mode uses ``state`` only.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError("batchnorm2d expects NCHW input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("gamma/beta must have one entry per channel")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m == 0:
        raise ArgumentError("batchnorm2d needs a non-empty batch")

    if train:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        unbiased = var * m / (m - 1) if m > 1 else var
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data[None, :, None, None]
        if train:
            gsum = gx.sum(axis=(0, 2, 3))[None, :, None, None]
            gxh = (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            dx = (gx - gsum / m - xhat * gxh / m) * inv_std[None, :, None, None]
        else:
            dx = gx * inv_std[None, :, None, None]
        _accumulate(x, dx)

    return _result(out, (x, gamma, beta), backward, "batchnorm2d")


# ---------------------------------------------------------------- resampling


def maxpool2d(x, window: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW input")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise DimensionError(f"spatial dims {h}x{w} not divisible by {window}")
    blocks = x.data.reshape(n, c, h // window, window, w // window, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // window, w // window, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // window, w // window, window, window).transpose(0, 1, 2, 4, 3, 5)
        _accumulate(x, gb.reshape(n, c, h, w))

    return _result(out, (x,), backward, "maxpool2d")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError("upsample_nearest expects NCHW input")
    if factor < 1:
        raise ArgumentError("factor must be >= 1")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        _accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _result(out, (x,), backward, "upsample")


# ---------------------------------------------------------------- losses


def mse_masked(pred, target, mask) -> Tensor:
    """Mean squared error over pixels where ``mask`` is true."""
    pred = as_tensor(pred)
    target = np.asarray(getattr(target, "data", target), dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != pred.shape:
        raise DimensionError(f"mse_masked shapes differ: {pred.shape}, {target.shape}, {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ArgumentError("mse_masked needs at least one masked-in pixel")
    diff = np.where(mask, pred.data - target, 0.0)

    def backward(g):
        _accumulate(pred, g * 2.0 * diff / count)

    return _result(np.asarray((diff**2).sum() / count), (pred,), backward, "mse_masked")


# ---------------------------------------------------------------- optimiser


class SGD:
    """Momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.params.items()}
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum)


def sgd_step(params, grads, velocity, lr, momentum):
    """In-place momentum update of ``params`` (name -> Tensor) and ``velocity``."""
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = velocity[name] = momentum * velocity[name] + g
        p.data = p.data - lr * v
    return params


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_input: list = field(default_factory=list)
    n_refined: int = 0
    n_entries: int = 0

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def _central(f, inputs, flat, i, step):
    orig = flat[i]
    flat[i] = orig + step
    fp = float(f(*inputs).data)
    flat[i] = orig - step
    fm = float(f(*inputs).data)
    flat[i] = orig
    return (fp - fm) / (2.0 * step)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    tolerance: float | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.

    With ``tolerance`` set, an entry that misses it is measured again with a
    ten times smaller step before it counts as a failure: a step that
    straddles a ReLU or max-pool switch gives a meaningless difference even
    when the gradient is right. ``n_refined`` counts such entries.
    """
    inputs = list(inputs)
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ArgumentError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def rel_err(a, n):
        return abs(a - n) / max(abs(a), abs(n), floor)

    per_input = []
    worst_rel = worst_abs = 0.0
    refined = entries = 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        numeric = np.array([_central(f, inputs, flat, i, step) for i in range(flat.size)])
        if tolerance is not None:
            for i in range(flat.size):
                if rel_err(aflat[i], numeric[i]) >= tolerance:
                    numeric[i] = _central(f, inputs, flat, i, step / 10.0)
                    refined += 1
        entries += flat.size
        abs_err = np.abs(aflat - numeric)
        rel = abs_err / np.maximum(np.maximum(np.abs(aflat), np.abs(numeric)), floor)
        per_input.append(float(rel.max(initial=0.0)))
        worst_rel = max(worst_rel, float(rel.max(initial=0.0)))
        worst_abs = max(worst_abs, float(abs_err.max(initial=0.0)))
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst_rel, worst_abs, per_input, refined, entries)


# ---------------------------------------------------------------- init


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"SCADC1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, metadata))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def encode_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    """Serialize named float64 arrays.

    Layout: ``SCADC1``, u32 metadata length + UTF-8 JSON metadata, then per
    entry: u32 name length, name bytes, u32 rank, u32 dims, raw little-endian
    float64 data. Entries are written in the mapping's order.
    """
    meta = json.dumps(dict(metadata or {}), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(meta)), meta]
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise FormatError("not a checkpoint file (bad magic)")
    view = memoryview(data)
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CodecError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(bytes(take(meta_len)).decode())
    tensors = {}
    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(DTYPE)
    return tensors, metadata


def parameters_of(modules: Iterable) -> dict[str, Tensor]:
    out = {}
    for module in modules:
        out.update(module.named_parameters())
    return out
