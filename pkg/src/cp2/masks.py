"""Binary foreground/background masks for copy-paste composition.

Four random families (rectangular, polygon, blocks, patches) plus masks read
from external grayscale files.  Random families keep the foreground ratio
inside ``ratio_range``; generators that cannot hit it fail loudly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.draw import polygon2mask

from .errors import DegenerateMask, GenerationFailed, InvalidConfig, IOFailure

FAMILIES = ("rectangular", "polygon", "blocks", "patches", "external")
DEFAULT_RATIO = (0.5, 0.8)
RETRY_CAP = 100


@dataclass
class Mask:
    bits: np.ndarray  # H x W uint8, 1 = foreground
    family: str

    @property
    def size(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class MaskConfig:
    family: str = "rectangular"
    ratio_range: Tuple[float, float] = DEFAULT_RATIO
    n_vertices_range: Tuple[int, int] = (3, 8)
    block_size_range: Tuple[float, float] = (0.125, 0.375)  # fraction of image side
    patch: int = 8
    external_dir: Optional[str] = None
    blur_sigma: float = 2.0
    threshold: float = 0.5
    independent_masks: bool = True
    retry_cap: int = RETRY_CAP

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise InvalidConfig(f"unknown mask family {self.family!r}; expected one of {FAMILIES}")
        _check_ratio(self.ratio_range)
        if self.family == "external" and not self.external_dir:
            raise InvalidConfig("mask family 'external' needs masks.external_dir")


def _check_ratio(ratio_range):
    lo, hi = ratio_range
    if not 0.0 < lo <= hi <= 1.0:
        raise InvalidConfig(f"ratio_range={tuple(ratio_range)} must satisfy 0 < min <= max <= 1")


def _in_range(frac: float, ratio_range) -> bool:
    return ratio_range[0] <= frac <= ratio_range[1]


def foreground_ratio(mask) -> float:
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    return float(np.count_nonzero(bits)) / bits.size


def gen_rectangular(rng: np.random.Generator, size: int, ratio_range=DEFAULT_RATIO) -> Mask:
    """One axis-aligned rectangle with area fraction in ``ratio_range``.

    The (height, width) pair is drawn uniformly from every integer pair that
    satisfies the ratio, then placed uniformly among valid offsets.
    """
    _check_ratio(ratio_range)
    total = size * size
    lo = math.ceil(ratio_range[0] * total - 1e-9)
    hi = math.floor(ratio_range[1] * total + 1e-9)
    sides = np.arange(1, size + 1)
    hh, ww = np.meshgrid(sides, sides, indexing="ij")
    area = hh * ww
    valid = np.flatnonzero((area >= lo) & (area <= hi))
    if valid.size == 0:
        raise InvalidConfig(f"no integer rectangle reaches ratio {tuple(ratio_range)} at size {size}")
    pick = valid[rng.integers(valid.size)]
    h, w = int(hh.flat[pick]), int(ww.flat[pick])
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    bits = np.zeros((size, size), dtype=np.uint8)
    bits[top:top + h, left:left + w] = 1
    return Mask(bits, "rectangular")


def rasterize_polygon(vertices, size: int) -> np.ndarray:
    """Fill a polygon given as (x, y) vertices in pixel units.

    A pixel is foreground when its center lies inside the polygon.
    """
    v = np.asarray(vertices, dtype=np.float64)
    # polygon2mask samples at integer (row, col); shift to pixel centers
    rc = np.stack([v[:, 1] - 0.5, v[:, 0] - 0.5], axis=1)
    return polygon2mask((size, size), rc).astype(np.uint8)


def gen_polygon(rng: np.random.Generator, size: int, n_vertices_range=(3, 8),
                ratio_range=DEFAULT_RATIO, retry_cap: int = RETRY_CAP) -> Mask:
    """Star-shaped (hence simple) random polygon, rescaled toward a target area."""
    _check_ratio(ratio_range)
    nlo, nhi = n_vertices_range
    if not 3 <= nlo <= nhi <= 16:
        raise InvalidConfig(f"n_vertices_range={tuple(n_vertices_range)} must lie in [3, 16]")
    for _ in range(retry_cap):
        n = int(rng.integers(nlo, nhi + 1))
        angles = np.sort(rng.uniform(0.0, 2 * np.pi, n))
        radii = rng.uniform(0.6, 1.0, n)
        unit = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        x, y = unit[:, 0], unit[:, 1]
        unit_area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
        if unit_area < 1e-6:
            continue
        target = rng.uniform(*ratio_range) * size * size
        scale = math.sqrt(target / unit_area)
        center = rng.uniform(0.3, 0.7, 2) * size
        bits = None
        for _ in range(6):  # clipping at the border shrinks area; re-scale a few times
            bits = rasterize_polygon(unit * scale + center, size)
            frac = bits.mean()
            if _in_range(frac, ratio_range) or frac == 0:
                break
            scale *= math.sqrt(target / (frac * size * size))
        if bits is not None and _in_range(bits.mean(), ratio_range):
            return Mask(bits, "polygon")
    raise GenerationFailed(f"polygon mask: no draw in {tuple(ratio_range)} after {retry_cap} tries")


def gen_blocks(rng: np.random.Generator, size: int, block_size_range=(0.125, 0.375),
               ratio_range=DEFAULT_RATIO, retry_cap: int = RETRY_CAP) -> Mask:
    """Union of random rectangles, grown until the ratio enters ``ratio_range``.

    ``block_size_range`` is given as a fraction of the image side.
    """
    _check_ratio(ratio_range)
    blo = max(1, int(round(block_size_range[0] * size)))
    bhi = min(size, max(blo, int(round(block_size_range[1] * size))))
    for _ in range(retry_cap):
        bits = np.zeros((size, size), dtype=np.uint8)
        for _ in range(10 * size):
            h, w = rng.integers(blo, bhi + 1, 2)
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            bits[top:top + h, left:left + w] = 1
            frac = bits.mean()
            if frac >= ratio_range[0]:
                break
        if _in_range(bits.mean(), ratio_range):
            return Mask(bits, "blocks")
    raise GenerationFailed(f"blocks mask: no draw in {tuple(ratio_range)} after {retry_cap} tries")


def gen_patches(rng: np.random.Generator, size: int, patch: int = 8,
                ratio_range=DEFAULT_RATIO) -> Mask:
    """Select an exact number of patch-aligned cells so the ratio is in range."""
    _check_ratio(ratio_range)
    if patch <= 0 or size % patch:
        raise InvalidConfig(f"size {size} is not divisible by patch {patch}")
    g = size // patch
    n = g * g
    counts = [k for k in range(1, n + 1) if _in_range(k / n, ratio_range)]
    if not counts:
        raise InvalidConfig(f"no patch count reaches ratio {tuple(ratio_range)} on a {g}x{g} grid")
    k = counts[int(rng.integers(len(counts)))]
    cells = np.zeros(n, dtype=np.uint8)
    cells[rng.choice(n, size=k, replace=False)] = 1
    bits = np.kron(cells.reshape(g, g), np.ones((patch, patch), dtype=np.uint8))
    return Mask(bits, "patches")


def load_external_mask(path, blur_sigma: float = 2.0, threshold: float = 0.5,
                       size: Optional[int] = None) -> Mask:
    """Grayscale file -> Gaussian blur -> binarize (value > threshold)."""
    try:
        with Image.open(Path(path)) as im:
            gray = im.convert("L")
            if size is not None and gray.size != (size, size):
                gray = gray.resize((size, size), Image.BILINEAR)
            arr = np.asarray(gray, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read mask {path}: {exc}") from exc
    return binarize_map(arr, blur_sigma, threshold)


def binarize_map(gray: np.ndarray, blur_sigma: float, threshold: float) -> Mask:
    if blur_sigma > 0:
        gray = gaussian_filter(gray, sigma=blur_sigma, mode="nearest")
    bits = (gray > threshold).astype(np.uint8)
    if not bits.any():
        raise DegenerateMask("external mask has no foreground after thresholding")
    return Mask(bits, "external")


def downsample_mask(mask, stride: int) -> np.ndarray:
    """Majority vote over stride x stride blocks; a tie counts as foreground."""
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    h, w = bits.shape
    if stride <= 0 or h % stride or w % stride:
        raise InvalidConfig(f"mask of size {h}x{w} is not divisible by stride {stride}")
    blocks = bits.reshape(h // stride, stride, w // stride, stride).astype(np.int64)
    # 2 * count >= stride^2 is the exact form of mean >= 0.5
    return (2 * blocks.sum(axis=(1, 3)) >= stride * stride).astype(np.uint8)


def sample_mask(cfg: MaskConfig, rng: np.random.Generator, size: int) -> Mask:
    if cfg.family == "rectangular":
        return gen_rectangular(rng, size, cfg.ratio_range)
    if cfg.family == "polygon":
        return gen_polygon(rng, size, cfg.n_vertices_range, cfg.ratio_range, cfg.retry_cap)
    if cfg.family == "blocks":
        return gen_blocks(rng, size, cfg.block_size_range, cfg.ratio_range, cfg.retry_cap)
    if cfg.family == "patches":
        return gen_patches(rng, size, cfg.patch, cfg.ratio_range)
    if cfg.family == "external":
        files = sorted(p for p in Path(cfg.external_dir).iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not files:
            raise IOFailure(f"no mask images in {cfg.external_dir}")
        path = files[int(rng.integers(len(files)))]
        return load_external_mask(path, cfg.blur_sigma, cfg.threshold, size)
    raise InvalidConfig(f"unknown mask family {cfg.family!r}")
