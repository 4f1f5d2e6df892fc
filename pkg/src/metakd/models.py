"""RCAN-style post-upsampling SR backbones with intermediate feature taps.

A network is a config plus a flat ``{name: Tensor}`` parameter dict. The
forward pass is functional in the parameters, which lets the meta optimizer
substitute unrolled student weights without touching the network object.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import nn
from .data import bicubic_matrix
from .tensor import Tensor, read_tensor, write_tensor

Params = Dict[str, Tensor]

PRESETS = {
    "RCAN-T": (10, 20, 64),
    "RCAN-A": (4, 1, 16),
    "RCAN-B": (4, 4, 16),
    "RCAN-C": (4, 4, 32),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_groups: int
    n_blocks: int
    n_feats: int
    scale: int = 4
    use_channel_attention: bool = True
    n_taps: int = 4
    reduction: int = 4

    def __post_init__(self):
        for field in ("n_groups", "n_blocks", "n_feats", "n_taps", "reduction"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.n_taps > self.n_groups:
            raise ConfigError(f"n_taps ({self.n_taps}) exceeds n_groups ({self.n_groups})")

    @classmethod
    def from_name(cls, name: str, **overrides) -> "NetConfig":
        g, b, f = parse_config_name(name)
        return cls(n_groups=g, n_blocks=b, n_feats=f, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def parse_config_name(name: str) -> Tuple[int, int, int]:
    """Return (n_RGs, n_RBs, n_feats) for a named preset such as ``"RCAN-A"``."""
    try:
        return PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; known: {sorted(PRESETS)}") from None


def tap_indices(n_groups: int, n_taps: int) -> List[int]:
    """Evenly spaced group indices whose outputs are exposed; the last is always the final group."""
    return [(i + 1) * n_groups // n_taps - 1 for i in range(n_taps)]


def _conv_shapes(cfg: NetConfig) -> List[Tuple[str, Tuple[int, int, int, int]]]:
    f, s = cfg.n_feats, cfg.scale
    shapes = [("head", (f, 3, 3, 3))]
    mid = max(1, f // cfg.reduction)
    for g in range(cfg.n_groups):
        for b in range(cfg.n_blocks):
            p = f"g{g}.b{b}"
            shapes += [(f"{p}.c1", (f, f, 3, 3)), (f"{p}.c2", (f, f, 3, 3))]
            if cfg.use_channel_attention:
                shapes += [(f"{p}.ca_down", (mid, f, 1, 1)), (f"{p}.ca_up", (f, mid, 1, 1))]
        shapes.append((f"g{g}.tail", (f, f, 3, 3)))
    shapes += [("body", (f, f, 3, 3)), ("up", (f * s * s, f, 3, 3)), ("tail", (3, f, 3, 3))]
    return shapes


def init_params(cfg: NetConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _conv_shapes(cfg):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return params


@dataclass
class Network:
    config: NetConfig
    params: Params

    def forward_with_taps(self, x: Tensor, params: Optional[Params] = None):
        return forward_with_taps(self.config, self.params if params is None else params, x)

    def __call__(self, x: Tensor, params: Optional[Params] = None) -> Tensor:
        return self.forward_with_taps(x, params)[0]

    def frozen(self) -> "Network":
        return Network(self.config, {k: v.detach() for k, v in self.params.items()})

    def trainable(self) -> "Network":
        return Network(self.config, {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()})


def build_network(cfg: NetConfig, seed: int = 0) -> Network:
    return Network(cfg, init_params(cfg, seed))


def _conv(params: Params, name: str, x: Tensor) -> Tensor:
    return nn.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def upsample_bicubic(x: Tensor, scale: int) -> Tensor:
    h, w = x.shape[-2:]
    rows = Tensor(bicubic_matrix(h, h * scale, antialias=False))
    cols = Tensor(bicubic_matrix(w, w * scale, antialias=False).T)
    return (rows @ x) @ cols


def forward_with_taps(cfg: NetConfig, params: Params, x: Tensor):
    """Run the backbone; returns ``(sr, taps)`` with ``len(taps) == cfg.n_taps``.

    Layout: head conv, residual groups (blocks + conv + group skip), body conv
    with long skip, pixel-shuffle upsampler, tail conv to RGB, plus a fixed
    bicubic upsampling of the input as image-level residual.
    """
    keep = set(tap_indices(cfg.n_groups, cfg.n_taps))
    head = _conv(params, "head", x)
    feat = head
    taps = []
    for g in range(cfg.n_groups):
        group_in = feat
        for b in range(cfg.n_blocks):
            p = f"g{g}.b{b}"
            r = _conv(params, f"{p}.c2", nn.relu(_conv(params, f"{p}.c1", feat)))
            if cfg.use_channel_attention:
                r = nn.channel_attention(
                    r,
                    params[f"{p}.ca_down.w"], params[f"{p}.ca_down.b"],
                    params[f"{p}.ca_up.w"], params[f"{p}.ca_up.b"],
                )
            feat = feat + r
        feat = _conv(params, f"g{g}.tail", feat) + group_in
        if g in keep:
            taps.append(feat)
    feat = _conv(params, "body", feat) + head
    up = nn.pixel_shuffle(_conv(params, "up", feat), cfg.scale)
    sr = _conv(params, "tail", up) + upsample_bicubic(x, cfg.scale)
    return sr, taps


def param_count(net: Network) -> int:
    return int(sum(t.size for t in net.params.values()))


def flops_estimate(net: Network, h: int, w: int) -> int:
    """Convolution FLOPs (2*k^2*c_in*c_out per output pixel) for an h x w LR input."""
    cfg = net.config
    total = 0
    for name, (co, ci, kh, kw) in _conv_shapes(cfg):
        if ".ca_" in name:
            area = 1
        elif name == "tail":
            area = h * w * cfg.scale**2
        else:
            area = h * w
        total += 2 * kh * kw * ci * co * area
    return int(total)


# ---------------------------------------------------------------------------
# checkpoints: b"MKDC", u32 manifest length, JSON manifest, tensor records


_MAGIC = b"MKDC"


def save_checkpoint(path, manifest: dict, namespaces: Dict[str, Params]) -> None:
    index = []
    for ns, params in namespaces.items():
        index += [f"{ns}/{name}" for name in params]
    body = dict(manifest, index=index)
    blob = json.dumps(body, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for ns, params in namespaces.items():
            for t in params.values():
                write_tensor(fh, t)


def load_checkpoint(path) -> Tuple[dict, Dict[str, Params]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(n).decode())
        spaces: Dict[str, Params] = {}
        for key in manifest["index"]:
            ns, name = key.split("/", 1)
            spaces.setdefault(ns, {})[name] = read_tensor(fh)
    return manifest, spaces


def save_network(path, net: Network, extra: Optional[dict] = None, krnet_params: Optional[Params] = None) -> None:
    manifest = {"config": net.config.to_dict(), **(extra or {})}
    spaces = {"net": net.params}
    if krnet_params is not None:
        spaces["krnet"] = krnet_params
    save_checkpoint(path, manifest, spaces)


def load_network(path) -> Network:
    manifest, spaces = load_checkpoint(path)
    return Network(NetConfig(**manifest["config"]), spaces["net"])
