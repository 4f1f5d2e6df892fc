"""Image ingestion, bicubic degradation, LR/HR patch sampling and a synthetic texture corpus."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, List, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Tensor, read_tensor, write_tensor

log = logging.getLogger(__name__)


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def bicubic_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Resampling matrix M of shape (n_out, n_in) so that ``y = M @ x`` along one axis.

    Pixel centres are aligned, borders are edge-clamped and each row is
    normalised to sum to one. When downscaling with ``antialias`` the cubic
    kernel is stretched by the scale factor.
    """
    ratio = n_out / n_in
    kscale = min(ratio, 1.0) if antialias else 1.0
    support = 2.0 / kscale
    m = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) / ratio - 0.5
        idx = np.arange(int(np.floor(center - support)), int(np.ceil(center + support)) + 1)
        wts = cubic((center - idx) * kscale) * kscale
        np.add.at(m[j], np.clip(idx, 0, n_in - 1), wts)
        m[j] /= m[j].sum()
    return m


def bicubic_downscale(img, s: int, antialias: bool = True):
    """Downscale the last two axes of ``img`` by integer factor ``s``.

    Accepts a Tensor (result stays differentiable) or an ndarray.
    """
    h, w = img.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} not divisible by scale {s}")
    if s == 1:
        return img
    rows = bicubic_matrix(h, h // s, antialias)
    cols = bicubic_matrix(w, w // s, antialias).T
    if isinstance(img, Tensor):
        return (Tensor(rows) @ img) @ Tensor(cols)
    return rows @ np.asarray(img, dtype=np.float64) @ cols


def bicubic_upscale(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[-2:]
    return bicubic_matrix(h, h * s, False) @ img @ bicubic_matrix(w, w * s, False).T


def rgb_to_ycbcr(img) -> np.ndarray:
    """BT.601 digital YCbCr for RGB in [0, 1] (channel axis -3); output also scaled to [0, 1]."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    r, g, b = arr[..., 0, :, :], arr[..., 1, :, :], arr[..., 2, :, :]
    y = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b
    cb = 128.0 - 37.797 * r - 74.203 * g + 112.0 * b
    cr = 128.0 + 112.0 * r - 93.786 * g - 18.214 * b
    return np.stack([y, cb, cr], axis=-3) / 255.0


def rgb_to_y255(img) -> np.ndarray:
    """Luma on the [0, 255] scale used by the quality metrics."""
    return rgb_to_ycbcr(img)[..., 0, :, :] * 255.0


# ---------------------------------------------------------------------------


@dataclass
class ImagePair:
    hr: Tensor
    lr: Tensor
    id: str

    @property
    def scale(self) -> int:
        return self.hr.shape[-1] // self.lr.shape[-1]


def make_pair(hr: np.ndarray, s: int, id: str = "", antialias: bool = True) -> ImagePair:
    hr = np.asarray(hr, dtype=np.float64)
    h, w = hr.shape[-2:]
    hr = hr[..., : h - h % s, : w - w % s]
    return ImagePair(Tensor(hr), Tensor(bicubic_downscale(hr, s, antialias)), id)


def write_pair(fh: BinaryIO, pair: ImagePair) -> None:
    key = pair.id.encode()
    fh.write(struct.pack("<I", len(key)))
    fh.write(key)
    write_tensor(fh, pair.hr)
    write_tensor(fh, pair.lr)


def read_pair(fh: BinaryIO) -> ImagePair:
    (n,) = struct.unpack("<I", fh.read(4))
    key = fh.read(n).decode()
    hr = read_tensor(fh)
    lr = read_tensor(fh)
    return ImagePair(hr, lr, key)


class PatchSample(NamedTuple):
    lr: np.ndarray
    hr: np.ndarray
    lr_offset: tuple


class PatchBatch(NamedTuple):
    lr: Tensor
    hr: Tensor


def _augment(lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator):
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    if flip:
        lr, hr = lr[..., ::-1], hr[..., ::-1]
    return np.rot90(lr, k, axes=(-2, -1)), np.rot90(hr, k, axes=(-2, -1))


def sample_patch_pair(pair: ImagePair, p: int, rng: np.random.Generator, augment: bool = False) -> PatchSample:
    """Crop an aligned (p x p LR, sp x sp HR) window, offsets uniform over valid positions."""
    s = pair.scale
    lh, lw = pair.lr.shape[-2:]
    if p > lh or p > lw:
        raise ValueError(f"patch {p} larger than LR image {lh}x{lw} ({pair.id})")
    y = int(rng.integers(lh - p + 1))
    x = int(rng.integers(lw - p + 1))
    lr = pair.lr.data[:, y : y + p, x : x + p]
    hr = pair.hr.data[:, s * y : s * (y + p), s * x : s * (x + p)]
    if augment:
        lr, hr = _augment(lr, hr, rng)
    return PatchSample(np.ascontiguousarray(lr), np.ascontiguousarray(hr), (y, x))


def batch_iterator(
    corpus: Sequence[ImagePair],
    b: int,
    p: int,
    rng: np.random.Generator,
    augment: bool = False,
) -> Iterator[PatchBatch]:
    """Endless stream of patch batches; images drawn uniformly with replacement."""
    while True:
        picks = rng.integers(len(corpus), size=b)
        samples = [sample_patch_pair(corpus[i], p, rng, augment) for i in picks]
        yield PatchBatch(
            Tensor(np.stack([s.lr for s in samples])),
            Tensor(np.stack([s.hr for s in samples])),
        )


# ---------------------------------------------------------------------------
# synthetic texture corpus


def _grating(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 12.0)
    phase = rng.uniform(0, 2 * np.pi)
    u = np.cos(theta) * xx + np.sin(theta) * yy
    base = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
    if rng.random() < 0.5:
        theta2 = theta + rng.uniform(np.pi / 4, 3 * np.pi / 4)
        u2 = np.cos(theta2) * xx + np.sin(theta2) * yy
        base = 0.5 * base + 0.25 + 0.25 * np.sin(2 * np.pi * u2 / rng.uniform(3.0, 12.0))
    return base


def _checker(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi / 2)
    period = rng.uniform(4.0, 14.0)
    u = np.cos(theta) * xx + np.sin(theta) * yy + rng.uniform(0, period)
    v = -np.sin(theta) * xx + np.cos(theta) * yy + rng.uniform(0, period)
    board = (np.floor(u / period) + np.floor(v / period)) % 2
    return gaussian_filter(board, 0.5)


def _noise(size: int, rng: np.random.Generator) -> np.ndarray:
    fine = gaussian_filter(rng.normal(size=(size, size)), rng.uniform(0.7, 1.5), mode="wrap")
    coarse = gaussian_filter(rng.normal(size=(size, size)), rng.uniform(3.0, 6.0), mode="wrap")
    field = fine / (fine.std() + 1e-12) + 0.7 * coarse / (coarse.std() + 1e-12)
    return 0.5 + 0.18 * field


_LUMA = np.array([0.299, 0.587, 0.114])


def synthetic_image(size: int, rng: np.random.Generator, min_contrast: float = 0.3) -> np.ndarray:
    """One texture painted between two colours whose luma differs by at least ``min_contrast``."""
    kind = rng.integers(3)
    gray = (_grating, _checker, _noise)[kind](size, rng)
    while True:
        c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
        if abs(_LUMA @ (c1 - c0)) >= min_contrast:
            break
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * gray[None]
    return np.clip(img, 0.0, 1.0)


def make_synthetic_corpus(n: int, size: int, rng: np.random.Generator, scale: int = 2) -> List[ImagePair]:
    """Dense periodic textures: sinusoid gratings, checkerboards and filtered noise."""
    return [make_pair(synthetic_image(size, rng), scale, id=f"synthetic_{i:04d}") for i in range(n)]


# ---------------------------------------------------------------------------
# PNG folders and manifests


def read_manifest(path: Union[str, Path]) -> List[str]:
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def write_manifest(path: Union[str, Path], entries: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{e}\n" for e in entries))


def load_image(path: Union[str, Path]) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def save_image(path: Union[str, Path], img) -> None:
    from PIL import Image

    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


def list_images(folder: Union[str, Path], manifest: Optional[Union[str, Path]] = None) -> List[Path]:
    folder = Path(folder)
    if manifest is not None:
        return [folder / rel for rel in read_manifest(manifest)]
    return sorted(p for p in folder.iterdir() if p.suffix.lower() == ".png")


def load_folder(folder, scale: int, manifest=None, skipped: Optional[list] = None) -> List[ImagePair]:
    """Load every readable PNG as an HR/LR pair; unreadable files are logged and skipped."""
    pairs = []
    for path in list_images(folder, manifest):
        try:
            hr = load_image(path)
        except Exception as exc:  # PIL raises a zoo of types
            log.warning("skipping unreadable image %s: %s", path, exc)
            if skipped is not None:
                skipped.append(str(path))
            continue
        pairs.append(make_pair(hr, scale, id=path.stem))
    return pairs
