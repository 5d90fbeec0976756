"""Dense N-D tensor with reverse-mode automatic differentiation.

Only the operations the segmentation networks and their losses need are
provided. Elementwise binary ops require identical shapes; the only
broadcasting allowed is against 0-d constants, conv bias and norm affine
parameters.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy array plus the bookkeeping needed to backpropagate into it."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        # iterative post-order DFS; recursion would overflow on deep nets
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

        # fresh per-call buffer so that repeated backward() calls add exactly
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            ctx = node._ctx
            if ctx is None:
                continue
            parent_grads = ctx.backward(g)
            for parent, pg in zip(ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(ctx).__name__}.backward returned grad of shape {pg.shape} "
                        f"for input of shape {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        summed = self.sum(axis=axis, keepdims=keepdims)
        count = self.size // max(summed.size, 1)
        return summed * (1.0 / count)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Function:
    """A differentiable op: ``forward`` on arrays, ``backward`` maps the
    output gradient to one gradient (or None) per input tensor."""

    parents: Tuple[Tensor, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Optional[Tensor], **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(t for t in inputs if t is not None)
        out = Tensor(fn.forward(*(t.data if t is not None else None for t in inputs), **kwargs))
        if _grad_enabled and any(t.requires_grad for t in tensors):
            # optional inputs (e.g. absent bias) become inert placeholders
            fn.parents = tuple(t if t is not None else Tensor(0.0) for t in inputs)
            out.requires_grad = True
            out._ctx = fn
        return out


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only 0-d operands broadcast
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    def forward(self, a, b):
        _check_same_shape(a, b, "add")
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_same_shape(a, b, "sub")
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return _reduce_to(grad, self.shapes[0]), _reduce_to(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_same_shape(a, b, "mul")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _reduce_to(grad * self.b, self.a.shape), _reduce_to(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _check_same_shape(a, b, "div")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _reduce_to(ga, self.a.shape), _reduce_to(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(ax % len(self.shape) for ax in axes)
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Index(Function):
    def forward(self, a, index=None):
        self.shape = a.shape
        self.dtype = a.dtype
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        ref = arrays[0].shape
        for a in arrays[1:]:
            if a.ndim != len(ref) or any(
                s != r for d, (s, r) in enumerate(zip(a.shape, ref)) if d != axis % len(ref)
            ):
                raise ValueError(f"concat: incompatible shapes {ref} and {a.shape} along axis {axis}")
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros((), a.dtype))

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyRelu(Function):
    def forward(self, a, slope=0.01):
        self.scale = np.where(a > 0, np.ones((), a.dtype), np.asarray(slope, a.dtype))
        return a * self.scale

    def backward(self, grad):
        return (grad * self.scale,)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign to avoid exp overflow
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Clip(Function):
    def forward(self, a, lo=None, hi=None):
        self.inside = np.ones(a.shape, dtype=bool)
        if lo is not None:
            self.inside &= a >= lo
        if hi is not None:
            self.inside &= a <= hi
        return np.clip(a, lo, hi).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.inside,)


class Maximum(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"elementwise_max: shape mismatch {a.shape} vs {b.shape}")
        # ties route the gradient to the first operand
        self.first = a >= b
        return np.where(self.first, a, b)

    def backward(self, grad):
        zero = np.zeros((), grad.dtype)
        return np.where(self.first, grad, zero), np.where(self.first, zero, grad)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def leaky_relu(x: Tensor, slope: float = 1e-2) -> Tensor:
    return LeakyRelu.apply(x, slope=slope)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def clip(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return Clip.apply(x, lo=lo, hi=hi)


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    return Maximum.apply(a, b)


# ---------------------------------------------------------------------------
# 3-D convolution


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


class Conv3d(Function):
    def forward(self, x, w, b=None, stride=1, padding=0):
        if x.ndim != 5:
            raise ValueError(f"conv3d: input must be rank 5 (N,C,D,H,W), got shape {x.shape}")
        if w.ndim != 5:
            raise ValueError(f"conv3d: weight must be rank 5 (Cout,Cin,k,k,k), got shape {w.shape}")
        cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
        if cin != x.shape[1]:
            raise ValueError(f"conv3d: input channels C={x.shape[1]} do not match weight Cin={cin}")
        if w.shape[2:] != (k, k, k) or k % 2 == 0:
            raise ValueError(f"conv3d: kernel must be cubic with odd extent, got {w.shape[2:]}")
        if stride not in (1, 2):
            raise ValueError(f"conv3d: stride must be 1 or 2, got {stride}")
        if b is not None and b.shape != (cout,):
            raise ValueError(f"conv3d: bias shape {b.shape} does not match Cout={cout}")
        n = x.shape[0]
        out_ext = tuple(conv_output_extent(e, k, stride, padding) for e in x.shape[2:])
        if min(out_ext) < 1:
            raise ValueError(f"conv3d: spatial extent {x.shape[2:]} too small for kernel {k}")

        xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
        self.x_shape = x.shape
        self.w = w
        self.has_bias = b is not None
        self.stride, self.padding, self.k = stride, padding, k
        self.out_ext = out_ext

        # channel-major im2col: (Cin, k^3, N, D', H', W'), built from k^3 shifted slabs
        cols = np.empty((cin, k**3, n) + out_ext, dtype=x.dtype)
        for t, window in enumerate(self._taps()):
            cols[:, t] = xp[(slice(None), slice(None)) + window].swapaxes(0, 1)
        self.cols = cols.reshape(cin * k**3, -1)
        out = w.reshape(cout, -1) @ self.cols
        out = np.ascontiguousarray(out.reshape((cout, n) + out_ext).swapaxes(0, 1))
        if b is not None:
            out += b.reshape(1, cout, 1, 1, 1)
        return out

    def _taps(self):
        k, s = self.k, self.stride
        od, oh, ow = self.out_ext
        for a in range(k):
            for b in range(k):
                for c in range(k):
                    yield (slice(a, a + s * od, s), slice(b, b + s * oh, s), slice(c, c + s * ow, s))

    def backward(self, grad):
        w, k, p = self.w, self.k, self.padding
        n, cin = self.x_shape[:2]
        cout = w.shape[0]
        gb = grad.sum(axis=(0, 2, 3, 4)) if self.has_bias else None

        g2 = grad.swapaxes(0, 1).reshape(cout, -1)
        gw = (g2 @ self.cols.T).reshape(w.shape)
        gcols = (w.reshape(cout, -1).T @ g2).reshape((cin, k**3, n) + self.out_ext)
        padded = tuple(e + 2 * p for e in self.x_shape[2:])
        gxp = np.zeros((cin, n) + padded, dtype=grad.dtype)
        # col2im: scatter each kernel tap back onto the padded input
        for t, window in enumerate(self._taps()):
            gxp[(slice(None), slice(None)) + window] += gcols[:, t]
        if p:
            gxp = gxp[:, :, p:-p, p:-p, p:-p]
        gx = np.ascontiguousarray(gxp.swapaxes(0, 1))
        return gx, gw.astype(w.dtype, copy=False), gb


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv3d.apply(x, weight, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# resolution changes


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    # x2 linear interpolation, align_corners=False, edge-clamped
    lo = np.concatenate([np.take(a, [0], axis=axis), np.take(a, np.arange(a.shape[axis] - 1), axis=axis)], axis=axis)
    hi = np.concatenate([np.take(a, np.arange(1, a.shape[axis]), axis=axis), np.take(a, [-1], axis=axis)], axis=axis)
    even = 0.75 * a + 0.25 * lo
    odd = 0.75 * a + 0.25 * hi
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return out.reshape(shape).astype(a.dtype, copy=False)


def _upsample_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] //= 2
    shape.insert(axis + 1, 2)
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    n = out.shape[axis]

    def sl(start, stop):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(start, stop)
        return tuple(idx)

    out[sl(0, n - 1)] += 0.25 * even[sl(1, n)]
    out[sl(0, 1)] += 0.25 * even[sl(0, 1)]
    out[sl(1, n)] += 0.25 * odd[sl(0, n - 1)]
    out[sl(n - 1, n)] += 0.25 * odd[sl(n - 1, n)]
    return out.astype(g.dtype, copy=False)


class Upsample2x(Function):
    def forward(self, x):
        if x.ndim != 5:
            raise ValueError(f"upsample: input must be rank 5, got shape {x.shape}")
        for axis in (2, 3, 4):
            x = _upsample_axis(x, axis)
        return x

    def backward(self, grad):
        for axis in (4, 3, 2):
            grad = _upsample_axis_T(grad, axis)
        return (np.ascontiguousarray(grad),)


def conv3d_transpose_or_upsample(x: Tensor, mode: str = "trilinear") -> Tensor:
    """Double every spatial extent by trilinear interpolation."""
    if mode != "trilinear":
        raise ValueError(f"unsupported upsampling mode {mode!r}")
    return Upsample2x.apply(x)


upsample = conv3d_transpose_or_upsample


class AvgPool2x(Function):
    def forward(self, x):
        n, c, d, h, w = x.shape
        if d % 2 or h % 2 or w % 2:
            raise ValueError(f"avg_pool: spatial extents {x.shape[2:]} must be even")
        self.shape = x.shape
        return x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).mean(axis=(3, 5, 7))

    def backward(self, grad):
        n, c, d, h, w = self.shape
        g = np.broadcast_to(grad[:, :, :, None, :, None, :, None] / 8.0, (n, c, d // 2, 2, h // 2, 2, w // 2, 2))
        return (g.reshape(self.shape).astype(grad.dtype, copy=False),)


def avg_pool2x(x: Tensor) -> Tensor:
    """Halve spatial extents; equals trilinear downsampling by 2 with align_corners=False."""
    return AvgPool2x.apply(x)


# ---------------------------------------------------------------------------
# normalization

NORM_EPS = 1e-5


class GroupNorm(Function):
    def forward(self, x, gamma=None, beta=None, groups=1, eps=NORM_EPS):
        if x.ndim != 5:
            raise ValueError(f"norm: input must be rank 5 (N,C,D,H,W), got shape {x.shape}")
        n, c = x.shape[:2]
        if groups < 1 or c % groups:
            raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
        self.x_shape = x.shape
        xg = x.reshape(n, groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        centered = xg - mean
        var = (centered * centered).mean(axis=2, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (centered * self.inv_std).reshape(x.shape)
        self.xhat = xhat
        self.gamma = gamma
        self.has_beta = beta is not None
        self.groups = groups
        out = xhat
        if gamma is not None:
            out = out * gamma.reshape(1, c, 1, 1, 1)
        if beta is not None:
            out = out + beta.reshape(1, c, 1, 1, 1)
        return out.astype(x.dtype, copy=False)

    def backward(self, grad):
        n, c = self.x_shape[:2]
        gg = gb = None
        if self.gamma is not None:
            gg = (grad * self.xhat).sum(axis=(0, 2, 3, 4))
            gxhat = grad * self.gamma.reshape(1, c, 1, 1, 1)
        else:
            gxhat = grad
        if self.has_beta:
            gb = grad.sum(axis=(0, 2, 3, 4))
        gxh = gxhat.reshape(n, self.groups, -1)
        xh = self.xhat.reshape(n, self.groups, -1)
        gx = self.inv_std * (
            gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True)
        )
        return gx.reshape(self.x_shape).astype(grad.dtype, copy=False), gg, gb


def group_norm(
    x: Tensor,
    groups: int,
    weight: Optional[Tensor] = None,
    bias: Optional[Tensor] = None,
    eps: float = NORM_EPS,
) -> Tensor:
    return GroupNorm.apply(x, weight, bias, groups=groups, eps=eps)


def instance_norm(
    x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = NORM_EPS
) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"instance_norm: input must be rank 5 (N,C,D,H,W), got shape {x.shape}")
    return GroupNorm.apply(x, weight, bias, groups=x.shape[1], eps=eps)


# ---------------------------------------------------------------------------
# weight container (DVW1)

WEIGHTS_MAGIC = b"DVW1"


def save_weights(path: Union[str, Path], tensors: Mapping[str, ArrayLike]) -> None:
    """Write named tensors as little-endian float32.

    Layout: magic, u64 count, then per tensor u32 name length, UTF-8 name,
    u32 rank, u64 extents, raw float32 data.
    """
    chunks = [WEIGHTS_MAGIC, struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: Union[str, Path]) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a DVW1 weight file")
    (count,) = struct.unpack_from("<Q", buf, 4)
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
