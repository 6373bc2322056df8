"""Dense float64 tensors with taped reverse-mode differentiation.

Deliberately small: exactly the operations needed to express a
convolutional encoder/decoder saliency network and its CC/KL losses.
Everything is float64 so that analytic gradients can be checked against
central finite differences to tight tolerances.

A ``Tape`` records one forward computation as an append-only list of
nodes; inputs of a node always have smaller node ids, so ``backward``
is a single reverse sweep that visits each node at most once. Tensors
are immutable values (their buffers are marked read-only) and may be
shared freely; a tape itself is single-threaded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    CheckpointError,
    ConfigError,
    GraphError,
    NonFiniteError,
    ShapeMismatchError,
)


class Tensor:
    """Handle to one value recorded on a tape.

    ``data`` is a read-only float64 ndarray; shape ``()`` is a scalar.
    ``leaf`` marks trainable parameters: ``backward`` reports gradients
    for exactly these nodes.
    """

    __slots__ = ("data", "tape", "node_id", "name", "leaf")

    # keep numpy from intercepting ndarray <op> Tensor expressions
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, tape: "Tape", node_id: int,
                 name: str | None = None, leaf: bool = False):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.name = name
        self.leaf = leaf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        """Re-enter this value as a constant: gradients stop here."""
        return self.tape.constant(self.data)

    def __repr__(self) -> str:
        tag = self.name or f"node{self.node_id}"
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other): return add(self, _lift(other, self.tape))
    def __radd__(self, other): return add(_lift(other, self.tape), self)
    def __sub__(self, other): return sub(self, _lift(other, self.tape))
    def __rsub__(self, other): return sub(_lift(other, self.tape), self)
    def __mul__(self, other): return mul(self, _lift(other, self.tape))
    def __rmul__(self, other): return mul(_lift(other, self.tape), self)
    def __truediv__(self, other): return div(self, _lift(other, self.tape))
    def __rtruediv__(self, other): return div(_lift(other, self.tape), self)
    def __neg__(self): return neg(self)


class _Node:
    """One recorded operation: kind, input node ids, and a pullback
    closure holding whatever forward values backward needs."""

    __slots__ = ("op", "inputs", "pullback", "leaf")

    def __init__(self, op: str, inputs: tuple[int, ...],
                 pullback: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None,
                 leaf: bool):
        self.op = op
        self.inputs = inputs
        self.pullback = pullback
        self.leaf = leaf


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def _record(self, op: str, inputs: tuple[int, ...],
                pullback, data: np.ndarray,
                name: str | None = None, leaf: bool = False) -> Tensor:
        data = _validated(data, op)
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, inputs, pullback, leaf))
        return Tensor(data, self, node_id, name=name, leaf=leaf)

    def constant(self, data) -> Tensor:
        return self._record("const", (), None, np.array(data, dtype=np.float64))

    def param(self, data, name: str) -> Tensor:
        return self._record("param", (), None,
                            np.array(data, dtype=np.float64), name=name, leaf=True)


def _validated(data: np.ndarray, op: str) -> np.ndarray:
    data = np.asarray(data)
    if data.dtype != np.float64:
        data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced NaN or Inf values")
    if data.ndim > 0:  # ascontiguousarray would promote 0-d to (1,)
        data = np.ascontiguousarray(data)
    elif not data.flags.owndata and data.base is not None:
        data = data.copy()
    data.flags.writeable = False
    return data


def _lift(value, tape: Tape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return tape.constant(np.asarray(value, dtype=np.float64))


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise GraphError("operands were recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, a: Tensor, b: Tensor, fwd, da, db) -> Tensor:
    tape = _same_tape(a, b)
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} "
                                 f"do not broadcast") from exc

    def pullback(g):
        return (_unbroadcast(da(g, a.data, b.data), a.shape),
                _unbroadcast(db(g, a.data, b.data), b.shape))

    return tape._record(op, (a.node_id, b.node_id), pullback, out)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary("add", a, b, np.add,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary("sub", a, b, np.subtract,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary("div", a, b, np.divide,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a: Tensor) -> Tensor:
    def pullback(g):
        return (-g,)
    return a.tape._record("neg", (a.node_id,), pullback, -a.data)


def log(a: Tensor) -> Tensor:
    x = a.data

    def pullback(g):
        return (g / x,)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return a.tape._record("log", (a.node_id,), pullback, out)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)

    def pullback(g):
        return (g * 0.5 / y,)
    return a.tape._record("sqrt", (a.node_id,), pullback, y)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # derivative at exactly 0 is defined as 0

    def pullback(g):
        return (g * mask,)
    return a.tape._record("relu", (a.node_id,), pullback,
                          np.where(mask, a.data, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def pullback(g):
        return (g * y * (1.0 - y),)
    return a.tape._record("sigmoid", (a.node_id,), pullback, y)


def clamp01(a: Tensor) -> Tensor:
    x = a.data
    mask = (x >= 0.0) & (x <= 1.0)  # pass-through on the closed interval

    def pullback(g):
        return (g * mask,)
    return a.tape._record("clamp01", (a.node_id,), pullback, np.clip(x, 0.0, 1.0))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    shape = a.shape

    def pullback(g):
        gk = g if keepdims or not shape else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk, shape).copy(),)

    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)
    return a.tape._record("sum", (a.node_id,), pullback, np.asarray(out))


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.shape else 1
    shape = a.shape

    def pullback(g):
        gk = g if keepdims or not shape else np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(gk, shape).copy() / count,)

    out = a.data.mean(axis=axes if axes else None, keepdims=keepdims)
    return a.tape._record("mean", (a.node_id,), pullback, np.asarray(out))


def _extreme(a: Tensor, axis, keepdims: bool, take_max: bool) -> Tensor:
    """Shared min/max reduction. Ties send the gradient to the first
    extremal element (row-major order), which keeps backward deterministic."""
    axes = _norm_axes(axis, a.data.ndim)
    kept = tuple(i for i in range(a.data.ndim) if i not in axes)
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    lead = moved.shape[:len(kept)]
    flat = moved.reshape(int(np.prod(lead)) if lead else 1, -1)
    idx = flat.argmax(axis=1) if take_max else flat.argmin(axis=1)
    vals = flat[np.arange(flat.shape[0]), idx]
    out = vals.reshape(lead)
    if keepdims:
        out = np.expand_dims(out, axes) if axes else out

    def pullback(g):
        gflat = np.asarray(g).reshape(flat.shape[0])
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), idx] = gflat
        back = buf.reshape(moved.shape)
        return (np.transpose(back, np.argsort(perm)),)

    name = "max" if take_max else "min"
    return a.tape._record(name, (a.node_id,), pullback, np.asarray(out))


def reduce_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, take_max=True)


def reduce_min(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, take_max=False)


def mean(a: Tensor) -> Tensor:
    """Scalar mean over all elements."""
    return reduce_mean(a, axis=None)


def std(a: Tensor) -> Tensor:
    """Scalar population standard deviation, composed from primitives."""
    centered = sub(a, reduce_mean(a, axis=None))
    return sqrt(reduce_mean(mul(centered, centered), axis=None))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeMismatchError("concat_channels needs at least one input")
    tape = _same_tape(*tensors)
    first = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4:
            raise ShapeMismatchError(f"concat_channels expects NCHW, got {t.shape}")
        if t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeMismatchError(
                f"concat_channels: {t.shape} does not agree with {first} on N,H,W")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def pullback(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return tape._record("concat", tuple(t.node_id for t in tensors), pullback, out)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeMismatchError(f"slice_channels expects NCHW, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeMismatchError(
            f"slice_channels: [{start}:{stop}] out of range for {a.shape[1]} channels")
    shape = a.shape

    def pullback(g):
        buf = np.zeros(shape)
        buf[:, start:stop] = g
        return (buf,)

    return a.tape._record("slice", (a.node_id,), pullback,
                          a.data[:, start:stop].copy())


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim < 1:
        raise ShapeMismatchError("slice_batch needs at least one axis")
    if not (0 <= start < stop <= a.shape[0]):
        raise ShapeMismatchError(
            f"slice_batch: [{start}:{stop}] out of range for {a.shape[0]} rows")
    shape = a.shape

    def pullback(g):
        buf = np.zeros(shape)
        buf[start:stop] = g
        return (buf,)

    return a.tape._record("slice0", (a.node_id,), pullback,
                          a.data[start:stop].copy())


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding 1 and stride 1 or 2.

    Input (N,C,H,W), kernel (O,C,3,3), bias (O,). Stride 2 halves the
    spatial extent (H and W must be even in that case).
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d input must be NCHW, got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"conv2d kernel must be (O,C,3,3), got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: kernel expects {kernel.shape[1]} input channels, "
            f"input has {x.shape[1]}")
    if bias.data.ndim != 1 or bias.shape[0] != kernel.shape[0]:
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.shape} does not match {kernel.shape[0]} "
            f"output channels")
    if stride not in (1, 2):
        raise ConfigError(f"conv2d stride must be 1 or 2, got {stride}")

    tape = _same_tape(x, kernel, bias)
    n, c, h, w = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeMismatchError(
            f"conv2d stride 2 needs even spatial dims, got {h}x{w}")
    oh, ow = (h, w) if stride == 1 else (h // 2, w // 2)
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    k = kernel.data
    out = np.empty((n, kernel.shape[0], oh, ow))
    out[:] = bias.data[None, :, None, None]
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
            out += np.einsum("nchw,oc->nohw", patch, k[:, :, dy, dx])

    def pullback(g):
        gx_pad = np.zeros_like(xp)
        gk = np.zeros_like(k)
        for dy in range(3):
            for dx in range(3):
                patch = xp[:, :, dy:dy + stride * oh:stride,
                           dx:dx + stride * ow:stride]
                gk[:, :, dy, dx] = np.einsum("nohw,nchw->oc", g, patch)
                gx_pad[:, :, dy:dy + stride * oh:stride,
                       dx:dx + stride * ow:stride] += np.einsum(
                    "nohw,oc->nchw", g, k[:, :, dy, dx])
        gb = g.sum(axis=(0, 2, 3))
        return (gx_pad[:, :, 1:h + 1, 1:w + 1], gk, gb)

    return tape._record("conv2d", (x.node_id, kernel.node_id, bias.node_id),
                        pullback, out)


def _bilinear_plan(in_size: int, out_size: int):
    """Half-pixel-center sampling plan for one axis.

    Source coordinate of output index ``i`` is
    ``(i + 0.5) * in_size / out_size - 0.5``, clamped into [0, in_size-1];
    the value is the linear interpolation of the two bracketing samples.
    """
    coords = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    coords = np.clip(coords, 0.0, in_size - 1.0)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = coords - lo
    return lo, hi, frac


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling to an arbitrary size (half-pixel centers)."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"resize_bilinear expects NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize_bilinear: invalid target {out_h}x{out_w}")
    n, c, h, w = x.shape
    y0, y1, fy = _bilinear_plan(h, out_h)
    x0, x1, fx = _bilinear_plan(w, out_w)
    fy = fy[:, None]
    fx = fx[None, :]
    d = x.data
    out = ((1 - fy) * (1 - fx) * d[:, :, y0[:, None], x0[None, :]]
           + (1 - fy) * fx * d[:, :, y0[:, None], x1[None, :]]
           + fy * (1 - fx) * d[:, :, y1[:, None], x0[None, :]]
           + fy * fx * d[:, :, y1[:, None], x1[None, :]])

    def pullback(g):
        gx = np.zeros((n, c, h, w))
        for wy, yi in (((1 - fy), y0), (fy, y1)):
            for wx, xi in (((1 - fx), x0), (fx, x1)):
                np.add.at(gx, (slice(None), slice(None),
                               yi[:, None], xi[None, :]), g * wy * wx)
        return (gx,)

    return x.tape._record("resize", (x.node_id,), pullback, out)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Integer-factor bilinear upsampling with half-pixel centers."""
    if not isinstance(factor, int) or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"upsample_bilinear expects NCHW, got {x.shape}")
    return resize_bilinear(x, x.shape[2] * factor, x.shape[3] * factor)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from ``loss``; returns gradients keyed by node id
    for every leaf parameter the loss actually depends on.

    Nodes with no path to the loss are never visited, so a frozen
    subgraph that enters the live graph only through ``detach`` never
    has gradients computed at all.
    """
    if loss.tape is not tape:
        raise GraphError("loss was not recorded on this tape")
    if loss.data.shape != ():
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.pullback is None:
            continue
        for input_id, input_grad in zip(node.inputs, node.pullback(g)):
            if input_grad is None:
                continue
            seen = grads.get(input_id)
            grads[input_id] = input_grad if seen is None else seen + input_grad
    return {nid: g for nid, g in grads.items() if tape.nodes[nid].leaf}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(step=0,
                     m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction. Functional: returns fresh
    param and state dicts. Params without a gradient are carried through
    with a zero gradient."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"adam_step: gradient shape {g.shape} != param shape {p.shape} "
                f"for {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# Parameter checkpoints ("TSPW")
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = b"TSPW"
_CHECKPOINT_VERSION = 1


def serialize_params(params: dict[str, np.ndarray]) -> bytes:
    """TSPW layout: magic, u32 version, u32 tensor count, then per tensor
    u32 name length + UTF-8 name, u32 rank, u64 extents, little-endian
    float64 payload. Tensors are written in sorted name order."""
    chunks = [_CHECKPOINT_MAGIC,
              struct.pack("<II", _CHECKPOINT_VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise CheckpointError("not a TSPW checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        numel = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=numel, offset=offset)
        offset += 8 * numel
        params[name] = arr.reshape(extents).astype(np.float64)
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return params


def save_params(path: str, params: dict[str, np.ndarray]) -> None:
    from .fileio import atomic_write_bytes
    atomic_write_bytes(path, serialize_params(params))


def load_params(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())
