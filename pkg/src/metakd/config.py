"""Run configuration: a flat INI file whose sections mirror the package modules.

Every key has a typed default, so an empty file is a valid config. Unknown
sections or keys are rejected, and every error names the offending key and
the line it sits on.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from .models import ConfigError, NetConfig


@dataclass
class NetSection:
    n_groups: int = 4
    n_blocks: int = 1
    n_feats: int = 16
    n_taps: int = 4
    reduction: int = 4
    use_channel_attention: bool = True


@dataclass
class KRNetSection:
    kind: str = "krnet"  # krnet | conv
    c_o: int = 64
    k: int = 3
    c_mid: int = 0  # 0 means "same as teacher width"


@dataclass
class MetaSection:
    mode: str = "meta"  # vanilla | kr | meta
    T: int = 1
    alpha: float = 1e-4
    lam: float = 1.0
    rounds: int = 1000
    interleave: int = 1
    phi_lr: float = 1e-4
    first_order: bool = False


@dataclass
class OptimSection:
    lr0: float = 1e-4
    lr_min: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 16
    patch: int = 48
    total_steps: int = 1000  # teacher training steps


@dataclass
class DataSection:
    corpus: str = "synthetic"  # "synthetic" or a folder of HR PNGs
    manifest: str = ""
    n_images: int = 200
    size: int = 64
    scale: int = 4
    seed: int = 0
    augment: bool = False
    val_images: int = 0


@dataclass
class RunSection:
    out_dir: str = "runs"
    val_every: int = 0
    ckpt_every: int = 0


def _teacher_default() -> NetSection:
    return NetSection(n_groups=10, n_blocks=20, n_feats=64)


@dataclass
class RunConfig:
    teacher: NetSection = field(default_factory=_teacher_default)
    student: NetSection = field(default_factory=NetSection)
    krnet: KRNetSection = field(default_factory=KRNetSection)
    meta: MetaSection = field(default_factory=MetaSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)

    def net_config(self, which: str) -> NetConfig:
        s: NetSection = getattr(self, which)
        return NetConfig(s.n_groups, s.n_blocks, s.n_feats, scale=self.data.scale,
                         use_channel_attention=s.use_channel_attention, n_taps=s.n_taps, reduction=s.reduction)

    def validate(self) -> "RunConfig":
        """Check cross-field constraints before any compute; raises ConfigError."""
        t, s = self.net_config("teacher"), self.net_config("student")
        if t.n_taps != s.n_taps:
            raise ConfigError(f"teacher.n_taps ({t.n_taps}) != student.n_taps ({s.n_taps})")
        if self.krnet.kind not in ("krnet", "conv"):
            raise ConfigError(f"krnet.kind must be 'krnet' or 'conv', got {self.krnet.kind!r}")
        if self.meta.mode not in ("vanilla", "kr", "meta"):
            raise ConfigError(f"meta.mode must be vanilla, kr or meta, got {self.meta.mode!r}")
        if self.meta.mode == "meta" and (self.meta.alpha <= 0 or self.meta.T < 1):
            raise ConfigError("meta mode needs meta.alpha > 0 and meta.T >= 1")
        side = round(self.krnet.c_o**0.5)
        if side * side != self.krnet.c_o:
            raise ConfigError(f"krnet.c_o must be a perfect square, got {self.krnet.c_o}")
        if self.krnet.k % 2 == 0:
            raise ConfigError(f"krnet.k must be odd, got {self.krnet.k}")
        if self.krnet.kind == "krnet" and self.optim.patch % side:
            raise ConfigError(f"optim.patch ({self.optim.patch}) not divisible by grid side {side} of krnet.c_o")
        for sec, name in (("optim", "batch"), ("optim", "patch"), ("optim", "total_steps"), ("meta", "rounds"),
                          ("meta", "interleave"), ("data", "n_images"), ("data", "size")):
            if getattr(getattr(self, sec), name) < 1:
                raise ConfigError(f"{sec}.{name} must be >= 1")
        if self.data.size % self.data.scale:
            raise ConfigError(f"data.size ({self.data.size}) not divisible by data.scale ({self.data.scale})")
        if self.optim.lr_min > self.optim.lr0:
            raise ConfigError("optim.lr_min exceeds optim.lr0")
        return self

    # -- text form -----------------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in fields(self):
            cp[sec.name] = {f.name: _emit(getattr(getattr(self, sec.name), f.name)) for f in fields(getattr(self, sec.name))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]

    def with_overrides(self, **flat) -> "RunConfig":
        """Return a copy with ``section__key=value`` style overrides applied (None values ignored)."""
        out = dataclasses.replace(self, **{s.name: dataclasses.replace(getattr(self, s.name)) for s in fields(self)})
        for key, value in flat.items():
            if value is None:
                continue
            sec, name = key.split("__")
            setattr(getattr(out, sec), name, value)
        return out


def _emit(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, default, where: str):
    kind = type(default)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def _line_index(text: str) -> Dict[Tuple[str, str], int]:
    """Map (section, key) to its 1-based line number."""
    index, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"\s*([^#;=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            index.setdefault((section, m.group(1)), no)
    return index


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = _line_index(text)
    cfg = RunConfig()
    known = {f.name: f for f in fields(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = getattr(cfg, section)
        slots = {f.name for f in fields(target)}
        for key, raw in cp[section].items():
            where = f"{source} line {lines.get((section, key), '?')}, key {section}.{key}"
            if key not in slots:
                raise ConfigError(f"{where}: unknown key")
            setattr(target, key, _coerce(raw, getattr(target, key), where))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), source=str(path))


def defaults_summary(cfg: Optional[RunConfig] = None) -> str:
    cfg = cfg or RunConfig()
    o, k = cfg.optim, cfg.krnet
    return (f"batch={o.batch} patch={o.patch} lr0={o.lr0:g} lr_min={o.lr_min:g} "
            f"betas=({o.beta1:g},{o.beta2:g}) c_o={k.c_o} k={k.k} N={cfg.student.n_taps}")
