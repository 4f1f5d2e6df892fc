"""Knowledge-representation networks.

A KRNet turns a (teacher, student) feature pair into two texture descriptors
whose L1 gap is the distillation loss:

1. the student feature is lifted to the teacher width by a 1x1 / LeakyReLU /
   1x1 dimension matcher;
2. the raw student feature is re-mixed by its softmax channel correlation
   with the teacher feature;
3. two generator blocks turn that modulated feature into per-sample kernel
   banks W1 (c_o, c_t, k, k) and W2 (c_o, c_o, k, k) by splitting it into a
   K x K grid of subpatches and pooling each one down to k x k;
4. both features go through ``conv(act(conv(F, W1)), W2)`` with the same
   kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import nn
from .models import ConfigError
from .tensor import DimensionError, Tensor

Params = Dict[str, Tensor]


@dataclass(frozen=True)
class KernelGenParams:
    """Structure of one kernel-generator block; its reorg weights live in the KRNet params."""

    c_in: int
    c_out: int
    grid_side: int
    k: int = 3

    def __post_init__(self):
        if self.k % 2 == 0:
            raise ConfigError(f"generated kernel size must be odd, got {self.k}")
        if self.grid_side < 1:
            raise ConfigError(f"grid_side must be >= 1, got {self.grid_side}")

    @property
    def c_o(self) -> int:
        return self.grid_side * self.grid_side


@dataclass
class KRNet:
    """Dimension matcher plus two kernel generators for one distillation position."""

    c_s: int
    c_t: int
    c_o: int = 64
    k: int = 3
    c_mid: Optional[int] = None
    params: Params = field(default_factory=dict)

    def __post_init__(self):
        side = int(round(np.sqrt(self.c_o)))
        if side * side != self.c_o:
            raise ConfigError(f"c_o must be a perfect square (K*K subpatches), got {self.c_o}")
        if self.c_mid is None:
            self.c_mid = self.c_t
        self.gen1 = KernelGenParams(self.c_t, self.c_t, side, self.k)
        self.gen2 = KernelGenParams(self.c_t, self.c_o, side, self.k)

    @property
    def grid_side(self) -> int:
        return self.gen1.grid_side

    def shapes(self) -> Dict[str, tuple]:
        return {
            "dm1.w": (self.c_mid, self.c_s, 1, 1),
            "dm1.b": (self.c_mid,),
            "dm2.w": (self.c_t, self.c_mid, 1, 1),
            "dm2.b": (self.c_t,),
            "gen1.w": (self.gen1.c_out, self.c_t, 1, 1),
            "gen1.b": (self.gen1.c_out,),
            "gen2.w": (self.gen2.c_out, self.c_t, 1, 1),
            "gen2.b": (self.gen2.c_out,),
        }

    def init(self, rng: np.random.Generator) -> "KRNet":
        params = {}
        for name, shape in self.shapes().items():
            if name.endswith(".b"):
                params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                bound = 1.0 / np.sqrt(shape[1])
                params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.params = params
        return self

    def with_params(self, params: Params) -> "KRNet":
        return KRNet(self.c_s, self.c_t, self.c_o, self.k, self.c_mid, params)

    def describe(self) -> dict:
        return {"kind": "krnet", "c_s": self.c_s, "c_t": self.c_t, "c_o": self.c_o, "k": self.k, "c_mid": self.c_mid}


@dataclass
class ConvKR:
    """Plain learnable representation: one 3x3 conv per side, both mapping to c_t channels.

    The non-texture-aware baseline for the ablation table. It plugs into the
    same loss and training code as :class:`KRNet`.
    """

    c_s: int
    c_t: int
    k: int = 3
    params: Params = field(default_factory=dict)

    def shapes(self) -> Dict[str, tuple]:
        return {
            "s.w": (self.c_t, self.c_s, self.k, self.k),
            "s.b": (self.c_t,),
            "t.w": (self.c_t, self.c_t, self.k, self.k),
            "t.b": (self.c_t,),
        }

    def init(self, rng: np.random.Generator) -> "ConvKR":
        self.params = {}
        for name, shape in self.shapes().items():
            if name.endswith(".b"):
                self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
            else:
                bound = 1.0 / np.sqrt(np.prod(shape[1:]))
                self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        return self

    def with_params(self, params: Params) -> "ConvKR":
        return ConvKR(self.c_s, self.c_t, self.k, params)

    def describe(self) -> dict:
        return {"kind": "conv", "c_s": self.c_s, "c_t": self.c_t, "k": self.k}


Representation = Union[KRNet, ConvKR]


def make_krnets(
    c_s: int, c_t: int, n_taps: int, c_o: int = 64, k: int = 3, seed: int = 0, c_mid: Optional[int] = None
) -> List[KRNet]:
    """One independently initialised KRNet per distillation position."""
    rng = np.random.default_rng(seed)
    return [KRNet(c_s, c_t, c_o, k, c_mid).init(rng) for _ in range(n_taps)]


def make_conv_krs(c_s: int, c_t: int, n_taps: int, k: int = 3, seed: int = 0) -> List[ConvKR]:
    rng = np.random.default_rng(seed)
    return [ConvKR(c_s, c_t, k).init(rng) for _ in range(n_taps)]


def from_description(desc: dict) -> Representation:
    """Rebuild an (uninitialised) representation from :meth:`describe` output."""
    desc = dict(desc)
    kind = desc.pop("kind", "krnet")
    if kind == "conv":
        return ConvKR(**desc)
    if kind == "krnet":
        return KRNet(**desc)
    raise ConfigError(f"unknown representation kind {kind!r}")


def identity_krnet(c: int, c_o: int = 4, k: int = 3, seed: int = 0) -> KRNet:
    """KRNet whose dimension matcher is the identity on non-negative features."""
    net = KRNet(c, c, c_o, k).init(np.random.default_rng(seed))
    eye = np.eye(c).reshape(c, c, 1, 1)
    net.params["dm1.w"] = Tensor(eye, requires_grad=True)
    net.params["dm2.w"] = Tensor(eye.copy(), requires_grad=True)
    return net


def flatten_params(krnets: Sequence[KRNet]) -> Params:
    return {f"kr{i}.{name}": t for i, net in enumerate(krnets) for name, t in net.params.items()}


def unflatten_params(krnets: Sequence[KRNet], flat: Params) -> List[KRNet]:
    out = []
    for i, net in enumerate(krnets):
        prefix = f"kr{i}."
        out.append(net.with_params({k[len(prefix):]: v for k, v in flat.items() if k.startswith(prefix)}))
    return out


# ---------------------------------------------------------------------------


def dimension_match(f_s: Tensor, net: KRNet) -> Tensor:
    p = net.params
    if f_s.shape[1] != net.c_s:
        raise DimensionError(f"student feature has {f_s.shape[1]} channels, KRNet expects {net.c_s}")
    hidden = nn.leaky_relu(nn.conv2d(f_s, p["dm1.w"], p["dm1.b"], padding=0))
    return nn.conv2d(hidden, p["dm2.w"], p["dm2.b"], padding=0)


def channel_correlation(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Re-express each teacher channel as a softmax-weighted mix of student channels.

    Per sample, with S = (c_s, hw) and T = (c_t, hw): C = softmax_rows(T S^T),
    output = C S reshaped to (c_t, h, w).
    """
    n, c_s, h, w = f_s.shape
    if f_t.shape[0] != n or f_t.shape[2:] != (h, w):
        raise DimensionError(f"student {f_s.shape} and teacher {f_t.shape} features differ in batch or space")
    c_t = f_t.shape[1]
    s = f_s.reshape(n, c_s, h * w)
    t = f_t.reshape(n, c_t, h * w)
    corr = nn.softmax(t @ s.swapaxes(1, 2), axis=-1)
    return (corr @ s).reshape(n, c_t, h, w)


def generate_texture_kernels(f: Tensor, weight: Tensor, bias: Tensor, g: KernelGenParams) -> Tensor:
    """Per-sample kernel bank of shape (n, K*K, c_out, k, k).

    After the 1x1 reorganising conv the feature is tiled into a K x K grid;
    subpatch (r, c) is average-pooled to k x k and becomes filter ``r*K + c``.
    """
    n, _, h, w = f.shape
    side = g.grid_side
    if h % side or w % side:
        raise ConfigError(f"feature size {h}x{w} is not divisible by grid side K={side}")
    if h // side < g.k or w // side < g.k:
        raise ConfigError(f"subpatch {h // side}x{w // side} of a {h}x{w} feature is smaller than the {g.k}x{g.k} kernel")
    z = nn.conv2d(f, weight, bias, padding=0)
    c = z.shape[1]
    ph, pw = h // side, w // side
    tiles = z.reshape(n, c, side, ph, side, pw).permute(0, 2, 4, 1, 3, 5)
    pooled = nn.adaptive_avg_pool(tiles, g.k, g.k)
    return pooled.reshape(n, side * side, c, g.k, g.k)


def kernel_pair(f_s: Tensor, f_t: Tensor, net: KRNet):
    modulated = channel_correlation(f_s, f_t)
    p = net.params
    w1 = generate_texture_kernels(modulated, p["gen1.w"], p["gen1.b"], net.gen1)
    w2 = generate_texture_kernels(modulated, p["gen2.w"], p["gen2.b"], net.gen2)
    return w1, w2


def extract_descriptors(f_t: Tensor, f_s_matched: Tensor, w1: Tensor, w2: Tensor, slope: float = 0.2):
    """Apply the shared kernel pair to both branches; returns ``(K_t, K_s)``."""
    if f_t.shape != f_s_matched.shape:
        raise DimensionError(f"teacher {f_t.shape} and matched student {f_s_matched.shape} differ")
    k_t = nn.conv2d_dynamic(nn.leaky_relu(nn.conv2d_dynamic(f_t, w1), slope), w2)
    k_s = nn.conv2d_dynamic(nn.leaky_relu(nn.conv2d_dynamic(f_s_matched, w1), slope), w2)
    return k_t, k_s


def tap_loss(f_t: Tensor, f_s: Tensor, net: Representation) -> Tensor:
    if isinstance(net, ConvKR):
        p = net.params
        r_t = nn.conv2d(f_t, p["t.w"], p["t.b"])
        r_s = nn.conv2d(f_s, p["s.w"], p["s.b"])
        return (r_s - r_t).abs().mean()
    w1, w2 = kernel_pair(f_s, f_t, net)
    k_t, k_s = extract_descriptors(f_t, dimension_match(f_s, net), w1, w2)
    return (k_s - k_t).abs().mean()


def distill_loss(taps_t: Sequence[Tensor], taps_s: Sequence[Tensor], krnets: Union[KRNet, Sequence[KRNet]]) -> Tensor:
    """Sum over distillation positions of the mean absolute descriptor gap.

    ``krnets`` is either one KRNet shared by every position or one per position.
    """
    if len(taps_t) != len(taps_s):
        raise ValueError(f"tap count mismatch: {len(taps_t)} teacher vs {len(taps_s)} student")
    if isinstance(krnets, (KRNet, ConvKR)):
        krnets = [krnets] * len(taps_t)
    if len(krnets) != len(taps_t):
        raise ValueError(f"{len(krnets)} KRNets for {len(taps_t)} distillation positions")
    total = None
    for f_t, f_s, net in zip(taps_t, taps_s, krnets):
        term = tap_loss(f_t, f_s, net)
        total = term if total is None else total + term
    return total


def per_tap_losses(taps_t, taps_s, krnets) -> List[float]:
    if isinstance(krnets, (KRNet, ConvKR)):
        krnets = [krnets] * len(taps_t)
    return [tap_loss(t, s, n).item() for t, s, n in zip(taps_t, taps_s, krnets)]
