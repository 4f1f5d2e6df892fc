"""Dense float64 tensors with reverse-mode autodiff that can differentiate its own gradients.

Every adjoint rule is written in terms of other recorded ops, so asking
:func:`grad` for ``create_graph=True`` yields gradients that are ordinary graph
nodes and can be differentiated again. The graph itself is implicit: each
non-leaf tensor keeps a reference to the :class:`Function` that produced it.
"""

from __future__ import annotations

import contextlib
import struct
import weakref
from typing import BinaryIO, Iterator, Optional, Sequence, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def set_grad_enabled(mode: bool) -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = bool(mode)
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d float64 array that may take part in differentiation.

    Tensors are treated as immutable once created; optimizers produce new
    tensors instead of writing into ``data``.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._ctx: Optional[Function] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return Mul.apply(self, 1.0 / other)
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p: float):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return PowScalar.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    # -- methods ------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=_norm_axes(axis, self.ndim), keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _norm_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Permute.apply(self, axes=tuple(axes))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.permute(axes)

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def broadcast_to(self, shape) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def sum_to(self, shape) -> "Tensor":
        return SumTo.apply(self, shape=tuple(shape))

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis)) if ndim else ()


def _broadcast_shape(*shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"shapes {' and '.join(str(tuple(s)) for s in shapes)} cannot be broadcast") from None


class Function:
    """A recorded op. Subclasses define ``forward`` on arrays and ``backward`` on Tensors."""

    def __init__(self, inputs: tuple, kwargs: dict):
        self.inputs = inputs
        self.kwargs = kwargs
        self._out = None

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        fn = cls(inputs, kwargs)
        out = Tensor(fn.forward(*(t.data for t in inputs), **kwargs))
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._ctx = fn
            fn._out = weakref.ref(out)
        return out

    @property
    def output(self) -> Tensor:
        return self._out()

    def needs(self, i: int) -> bool:
        return self.inputs[i].requires_grad

    def forward(self, *arrays, **kwargs) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, g: Tensor) -> tuple:  # pragma: no cover - abstract
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise


class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return g.sum_to(a.shape), g.sum_to(b.shape)


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return g.sum_to(a.shape), (-g).sum_to(b.shape)


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = (g * b).sum_to(a.shape) if self.needs(0) else None
        gb = (g * a).sum_to(b.shape) if self.needs(1) else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = (g / b).sum_to(a.shape) if self.needs(0) else None
        gb = (-(g * a) / (b * b)).sum_to(b.shape) if self.needs(1) else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class PowScalar(Function):
    def forward(self, a, p):
        return a**p

    def backward(self, g):
        (a,) = self.inputs
        p = self.kwargs["p"]
        if p == 0.0:
            return (g * 0.0,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * self.output,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class Abs(Function):
    def forward(self, a):
        return np.abs(a)

    def backward(self, g):
        # sign(0) == 0 gives the zero sub-gradient at the kink
        return (g * Tensor(np.sign(self.inputs[0].data)),)


class Sigmoid(Function):
    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def backward(self, g):
        y = self.output
        return (g * y * (1.0 - y),)


class LeakyReLU(Function):
    def forward(self, a, slope):
        return np.where(a > 0, a, a * slope)

    def backward(self, g):
        mask = np.where(self.inputs[0].data > 0, 1.0, self.kwargs["slope"])
        return (g * Tensor(mask),)


# ---------------------------------------------------------------------------
# shape ops


class Sum(Function):
    def forward(self, a, axis, keepdims):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        (a,) = self.inputs
        if not self.kwargs["keepdims"]:
            kept = list(a.shape)
            for ax in self.kwargs["axis"]:
                kept[ax] = 1
            g = g.reshape(tuple(kept))
        return (g.broadcast_to(a.shape),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        _broadcast_shape(a.shape, shape)
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (g.sum_to(self.inputs[0].shape),)


class SumTo(Function):
    """Reverse of broadcasting: sum ``a`` down to ``shape``."""

    def forward(self, a, shape):
        if a.shape == tuple(shape):
            return a.copy()
        lead = a.ndim - len(shape)
        if lead < 0:
            raise DimensionError(f"cannot sum {a.shape} to {tuple(shape)}")
        axes = tuple(range(lead)) + tuple(
            lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1
        )
        out = a.sum(axis=axes, keepdims=True)
        return out.reshape(shape)

    def backward(self, g):
        return (g.broadcast_to(self.inputs[0].shape),)


class Reshape(Function):
    def forward(self, a, shape):
        try:
            return a.reshape(shape)
        except ValueError:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Permute(Function):
    def forward(self, a, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, g):
        return (g.permute(tuple(np.argsort(self.kwargs["axes"]))),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2])
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = (g @ b.swapaxes(-1, -2)).sum_to(a.shape) if self.needs(0) else None
        gb = (a.swapaxes(-1, -2) @ g).sum_to(b.shape) if self.needs(1) else None
        return ga, gb


class Softmax(Function):
    def forward(self, a, axis):
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)

    def backward(self, g):
        y = self.output
        axis = self.kwargs["axis"]
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# ---------------------------------------------------------------------------
# 2-D cross-correlation, stride 1, symmetric zero padding.
# A 4-D kernel (o, c, k, k) is shared across the batch; a 5-D kernel
# (n, o, c, k, k) holds one filter bank per sample.


def _im2col(x: np.ndarray, k: int, pad: int, per_sample: bool) -> tuple:
    """Patch matrix for stride-1 correlation with zero padding.

    ``per_sample`` gives shape (n, c*k*k, ho*wo); otherwise (c*k*k, n*ho*wo).
    """
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if k == 1 and pad == 0:
        if per_sample:
            return x.reshape(n, c, h * w), h, w
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w), h, w
    src = x if per_sample else x.transpose(1, 0, 2, 3)
    lead = src.shape[:2]
    cols = np.zeros(lead[:1] + (k, k) + lead[1:] + (ho, wo)) if not per_sample else np.zeros((n, c, k, k, ho, wo))
    for a in range(k):
        i0, i1 = max(0, pad - a), min(ho, h + pad - a)
        for b in range(k):
            j0, j1 = max(0, pad - b), min(wo, w + pad - b)
            if i0 >= i1 or j0 >= j1:
                continue
            block = src[:, :, i0 + a - pad : i1 + a - pad, j0 + b - pad : j1 + b - pad]
            if per_sample:
                cols[:, :, a, b, i0:i1, j0:j1] = block
            else:
                cols[:, a, b, :, i0:i1, j0:j1] = block
    if per_sample:
        return cols.reshape(n, c * k * k, ho * wo), ho, wo
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _corr(x: np.ndarray, w: np.ndarray, pad: int) -> np.ndarray:
    n, c = x.shape[:2]
    k = w.shape[-1]
    if w.shape[-3] != c:
        raise DimensionError(f"conv input has {c} channels but kernel {w.shape} expects {w.shape[-3]}")
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise DimensionError(f"kernel {w.shape} larger than padded input {x.shape}")
    if w.ndim == 4:
        o = w.shape[0]
        cols, ho, wo = _im2col(x, k, pad, per_sample=False)
        out = w.reshape(o, -1) @ cols
        return np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    if w.shape[0] != n:
        raise DimensionError(f"dynamic kernels for batch {w.shape[0]} applied to batch {n}")
    o = w.shape[1]
    cols, ho, wo = _im2col(x, k, pad, per_sample=True)
    return np.matmul(w.reshape(n, o, -1), cols).reshape(n, o, ho, wo)


def _flip_swap(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.swapaxes(w[..., ::-1, ::-1], -4, -3))


class Conv2d(Function):
    def forward(self, x, w, pad):
        return _corr(x, w, pad)

    def backward(self, g):
        x, w = self.inputs
        pad = self.kwargs["pad"]
        gx = ConvInputGrad.apply(g, w, pad=pad) if self.needs(0) else None
        gw = ConvWeightGrad.apply(x, g, pad=pad, k=w.shape[-1], batched=w.ndim == 5) if self.needs(1) else None
        return gx, gw


class ConvInputGrad(Function):
    """Adjoint of :class:`Conv2d` with respect to its input (a transposed convolution)."""

    def forward(self, g, w, pad):
        k = w.shape[-1]
        if pad > k - 1:
            raise DimensionError(f"padding {pad} too large for kernel size {k}")
        return _corr(g, _flip_swap(w), k - 1 - pad)

    def backward(self, u):
        g, w = self.inputs
        pad = self.kwargs["pad"]
        gg = Conv2d.apply(u, w, pad=pad) if self.needs(0) else None
        gw = ConvWeightGrad.apply(u, g, pad=pad, k=w.shape[-1], batched=w.ndim == 5) if self.needs(1) else None
        return gg, gw


class ConvWeightGrad(Function):
    """Adjoint of :class:`Conv2d` with respect to its kernel."""

    def forward(self, x, g, pad, k, batched):
        n, c = x.shape[:2]
        o = g.shape[1]
        cols, ho, wo = _im2col(x, k, pad, per_sample=batched)
        if (ho, wo) != g.shape[2:]:
            raise DimensionError(f"output gradient {g.shape} does not match conv of {x.shape}")
        if batched:
            return np.matmul(g.reshape(n, o, ho * wo), cols.transpose(0, 2, 1)).reshape(n, o, c, k, k)
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        return (gm @ cols.T).reshape(o, c, k, k)

    def backward(self, v):
        x, g = self.inputs
        pad = self.kwargs["pad"]
        gx = ConvInputGrad.apply(g, v, pad=pad) if self.needs(0) else None
        gg = Conv2d.apply(x, v, pad=pad) if self.needs(1) else None
        return gx, gg


# ---------------------------------------------------------------------------
# differentiation


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._ctx is not None:
            for inp in t._ctx.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    grad_output: Optional[Tensor] = None,
) -> list:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``wrt``.

    Args:
        loss: Scalar tensor (any shape with a single element).
        wrt: Tensors to differentiate against. They need not be leaves.
        create_graph: Record the backward pass so the returned gradients can be
            differentiated again.
        grad_output: Seed for the output adjoint; defaults to one.

    Returns:
        One gradient per entry of ``wrt``. Tensors the loss does not depend on
        get a zero tensor of their own shape.
    """
    if grad_output is None:
        if loss.size != 1:
            raise ValueError("loss must be scalar")
        grad_output = Tensor(np.ones_like(loss.data))
    want = {id(t): i for i, t in enumerate(wrt)}
    results: list = [None] * len(wrt)
    if not loss.requires_grad:
        return [Tensor(np.zeros_like(t.data)) for t in wrt]

    grads = {id(loss): grad_output}
    with set_grad_enabled(create_graph):
        for t in reversed(_topo_order(loss)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in want:
                results[want[id(t)]] = g
            ctx = t._ctx
            if ctx is None:
                continue
            for inp, ig in zip(ctx.inputs, ctx.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    return [Tensor(np.zeros_like(t.data)) if r is None else r for r, t in zip(results, wrt)]


# ---------------------------------------------------------------------------
# binary serialization: u32 rank, u32 extents, then little-endian f64 payload


def write_tensor(fh: BinaryIO, t: ArrayLike) -> None:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise EOFError("truncated tensor payload")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64))


def tensor_to_bytes(t: ArrayLike) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(blob: bytes) -> Tensor:
    import io

    return read_tensor(io.BytesIO(blob))
