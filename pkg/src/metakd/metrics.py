"""Y-channel PSNR/SSIM and benchmark-folder evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import ImagePair, load_folder, rgb_to_y255
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


def _crop(a: np.ndarray, crop: int) -> np.ndarray:
    return a[..., crop:-crop, crop:-crop] if crop > 0 else a


def _as_2d(a) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    return arr


def psnr(a, b, crop: int = 0) -> float:
    """PSNR in dB for images on the [0, 255] scale; ``inf`` when identical."""
    a, b = _as_2d(a), _as_2d(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    diff = _crop(a, crop) - _crop(b, crop)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.tensordot(sliding_window_view(img, win.shape), win, axes=([2, 3], [0, 1]))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, crop: int = 0) -> float:
    """Mean of the Gaussian-windowed SSIM map over all fully-contained windows."""
    a, b = _crop(_as_2d(a), crop), _crop(_as_2d(b), crop)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    c1, c2 = (k1 * 255) ** 2, (k2 * 255) ** 2
    win = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a**2
    var_b = _filter_valid(b * b, win) - mu_b**2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def quantize(img: np.ndarray) -> np.ndarray:
    """Round an RGB image in [0, 1] to 8-bit levels (still float, still in [0, 1])."""
    return np.clip(np.round(img * 255.0), 0, 255) / 255.0


@dataclass
class ImageScore:
    id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    records: List[ImageScore] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.records])) if self.records else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.records])) if self.records else math.nan

    def to_table(self) -> str:
        width = max([len(r.id) for r in self.records] + [5])
        lines = [f"{'image':<{width}}  {'PSNR':>9}  {'SSIM':>7}"]
        for r in self.records:
            lines.append(f"{r.id:<{width}}  {_fmt(r.psnr):>9}  {r.ssim:>7.4f}")
        lines.append(f"{'mean':<{width}}  {_fmt(self.mean_psnr):>9}  {self.mean_ssim:>7.4f}")
        for s in self.skipped:
            lines.append(f"skipped: {s}")
        return "\n".join(lines)

    def to_jsonl(self) -> str:
        rows = [{"id": r.id, "psnr": _fmt(r.psnr), "ssim": r.ssim} for r in self.records]
        rows.append({"id": "__mean__", "psnr": _fmt(self.mean_psnr), "ssim": self.mean_ssim})
        rows += [{"id": s, "skipped": True} for s in self.skipped]
        return "".join(json.dumps(r) + "\n" for r in rows)


def _fmt(v: float):
    return "inf" if math.isinf(v) else round(v, 4) if isinstance(v, float) else v


def run_tiled(model: Callable[[Tensor], Tensor], lr: np.ndarray, scale: int, tile: Optional[int], overlap: int = 8) -> np.ndarray:
    """Apply ``model`` to a (3, h, w) LR image, optionally in overlapping tiles stitched at tile centres."""
    with no_grad():
        if tile is None or (lr.shape[-2] <= tile and lr.shape[-1] <= tile):
            return model(Tensor(lr[None])).data[0]
        _, h, w = lr.shape
        out = np.zeros((3, h * scale, w * scale))
        step = tile - 2 * overlap
        if step <= 0:
            raise ValueError(f"tile {tile} too small for overlap {overlap}")
        for y0 in range(0, h, step):
            for x0 in range(0, w, step):
                ys, xs = max(0, y0 - overlap), max(0, x0 - overlap)
                ye, xe = min(h, y0 + step + overlap), min(w, x0 + step + overlap)
                sr = model(Tensor(lr[None, :, ys:ye, xs:xe])).data[0]
                cy, cx = (y0 - ys) * scale, (x0 - xs) * scale
                hy = (min(h, y0 + step) - y0) * scale
                hx = (min(w, x0 + step) - x0) * scale
                out[:, y0 * scale : y0 * scale + hy, x0 * scale : x0 * scale + hx] = sr[:, cy : cy + hy, cx : cx + hx]
        return out


def evaluate_pairs(
    model: Callable[[Tensor], Tensor],
    pairs: Sequence[ImagePair],
    scale: int,
    crop: Optional[int] = None,
    tile: Optional[int] = None,
) -> EvalReport:
    """Score ``model`` on already-degraded pairs; SR output is quantized to 8 bits first."""
    crop = scale if crop is None else crop
    report = EvalReport()
    for pair in pairs:
        sr = quantize(run_tiled(model, pair.lr.data, scale, tile))
        y_sr, y_hr = rgb_to_y255(sr), rgb_to_y255(quantize(pair.hr.data))
        report.records.append(ImageScore(pair.id, psnr(y_sr, y_hr, crop), ssim(y_sr, y_hr, crop=crop)))
    return report


def evaluate_benchmark(model, folder, scale: int, manifest=None, tile: Optional[int] = None) -> EvalReport:
    """Evaluate on a folder of HR PNGs, generating LR inputs by bicubic degradation."""
    skipped: list = []
    pairs = load_folder(folder, scale, manifest=manifest, skipped=skipped)
    report = evaluate_pairs(model, pairs, scale, tile=tile)
    report.skipped = skipped
    return report
