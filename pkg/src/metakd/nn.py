"""Network building blocks on top of :mod:`metakd.tensor`.

All ops are compositions of recorded primitives, so they inherit exact first
and second derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    Conv2d,
    DimensionError,
    LeakyReLU,
    Sigmoid,
    Softmax,
    Tensor,
    as_tensor,
)


@dataclass
class ConvKernel:
    weights: Tensor
    bias: Optional[Tensor] = None
    padding: int = 0
    stride: int = 1

    def __post_init__(self):
        k = self.weights.shape[-1]
        if self.weights.shape[-2] != k:
            raise DimensionError(f"non-square kernel {self.weights.shape}")
        if self.stride != 1:
            raise ValueError("only stride 1 is supported")

    @classmethod
    def same(cls, weights: Tensor, bias: Optional[Tensor] = None) -> "ConvKernel":
        k = weights.shape[-1]
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel size, got {k}")
        return cls(weights, bias, padding=(k - 1) // 2)


def conv2d(x: Tensor, weight, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Cross-correlate ``x`` (n, c_in, h, w) with a (c_out, c_in, k, k) kernel.

    ``weight`` may also be a :class:`ConvKernel`, in which case its bias and
    padding are used. Without an explicit padding, odd kernels use same padding.
    """
    if isinstance(weight, ConvKernel):
        bias = weight.bias if bias is None else bias
        padding = weight.padding if padding is None else padding
        weight = weight.weights
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4:
        raise DimensionError(f"static conv kernel must be 4-D, got {weight.shape}")
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"input {x.shape} does not match kernel {weight.shape}")
    if padding is None:
        padding = (weight.shape[-1] - 1) // 2
    out = Conv2d.apply(x, weight, pad=padding)
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, -1, 1, 1)
    return out


def conv2d_dynamic(x: Tensor, kernels: Tensor) -> Tensor:
    """Convolve sample ``b`` of ``x`` with its own filter bank ``kernels[b]`` (same padding).

    Gradients reach both the features and the generated kernels.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 5:
        raise DimensionError(f"dynamic kernels must be 5-D (n, c_out, c_in, k, k), got {kernels.shape}")
    if x.ndim != 4 or kernels.shape[0] != x.shape[0]:
        raise DimensionError(f"batch mismatch: input {x.shape} vs kernels {kernels.shape}")
    if kernels.shape[2] != x.shape[1]:
        raise DimensionError(f"input {x.shape} does not match kernels {kernels.shape}")
    k = kernels.shape[-1]
    if k % 2 == 0:
        raise ValueError(f"dynamic kernels need odd size, got {k}")
    return Conv2d.apply(x, kernels, pad=(k - 1) // 2)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(x, slope=float(slope))


def relu(x: Tensor) -> Tensor:
    return LeakyReLU.apply(x, slope=0.0)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return Softmax.apply(x, axis=axis % x.ndim)


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool the last two axes of ``x`` onto an (out_h, out_w) grid.

    Bin ``i`` spans ``floor(i*h/out_h)`` to ``ceil((i+1)*h/out_h)``. Works on
    any tensor of rank >= 2.
    """
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot adaptively pool {h}x{w} up to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x
    rows = Tensor(_pool_matrix(h, out_h))
    cols = Tensor(_pool_matrix(w, out_w).T)
    return (rows @ x) @ cols


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    n, c, h, w = x.shape
    if c % (s * s):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by {s}^2")
    oc = c // (s * s)
    y = x.reshape(n, oc, s, s, h, w).permute(0, 1, 4, 2, 5, 3)
    return y.reshape(n, oc, h * s, w * s)


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return (as_tensor(a) - as_tensor(b)).abs().mean()


def channel_attention(x: Tensor, w_down: Tensor, b_down: Tensor, w_up: Tensor, b_up: Tensor) -> Tensor:
    """Squeeze-excitation gating: x * sigmoid(up(relu(down(mean_hw(x)))))."""
    desc = x.mean(axis=(2, 3), keepdims=True)
    z = relu(conv2d(desc, w_down, b_down, padding=0))
    gate = sigmoid(conv2d(z, w_up, b_up, padding=0))
    return x * gate
