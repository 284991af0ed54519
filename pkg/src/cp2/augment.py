"""Augmented views of foreground and background images.

The recipe is the usual contrastive one: random resized crop, color jitter,
grayscale, Gaussian blur and horizontal flip, applied in that order.  All
randomness comes from an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.transform import resize

from .errors import InvalidConfig, InvalidInput, IOFailure

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentConfig:
    target_size: int = 64
    crop_scale_range: Tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: Tuple[float, float] = (3 / 4, 4 / 3)
    # brightness, contrast, saturation, hue
    jitter_strengths: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: Tuple[float, float] = (0.1, 2.0)
    hflip_prob: float = 0.5

    def validate(self, stride: int = 1) -> None:
        if self.target_size <= 0 or self.target_size % stride:
            raise InvalidConfig(
                f"target_size={self.target_size} must be a positive multiple of stride {stride}")
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "hflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{name}={p} is not a probability")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise InvalidConfig(f"crop_scale_range={self.crop_scale_range} must lie in (0, 1]")
        rlo, rhi = self.crop_ratio_range
        if not 0.0 < rlo <= rhi:
            raise InvalidConfig(f"crop_ratio_range={self.crop_ratio_range} is invalid")
        if len(self.jitter_strengths) != 4 or min(self.jitter_strengths) < 0:
            raise InvalidConfig("jitter_strengths needs four non-negative entries")
        if self.jitter_strengths[3] > 0.5:
            raise InvalidConfig("hue jitter must be <= 0.5")
        slo, shi = self.blur_sigma_range
        if not 0.0 <= slo <= shi:
            raise InvalidConfig(f"blur_sigma_range={self.blur_sigma_range} is invalid")

    @classmethod
    def disabled(cls, target_size: int = 64) -> "AugmentConfig":
        """A configuration under which a target_size square passes through unchanged."""
        return cls(target_size=target_size, crop_scale_range=(1.0, 1.0),
                   jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0, hflip_prob=0.0)


@dataclass
class ImageView:
    pixels: np.ndarray  # H x W x 3 float64 in [0, 1]
    source_id: str
    view_tag: str  # "q" or "k"


def load_image(path) -> np.ndarray:
    """Read an RGB raster file into an H x W x 3 float array in [0, 1]."""
    try:
        with Image.open(Path(path)) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def _as_float_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInput(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise InvalidInput(f"image of shape {arr.shape[:2]} is smaller than 2x2")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64, copy=False)


def _crop_box(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator):
    area = h * w
    lo, hi = cfg.crop_scale_range
    log_r = (math.log(cfg.crop_ratio_range[0]), math.log(cfg.crop_ratio_range[1]))
    for _ in range(10):
        target_area = area * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target_area * ratio)))
        ch = int(round(math.sqrt(target_area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # fallback: central crop at the clamped aspect ratio
    in_ratio = w / h
    if in_ratio < cfg.crop_ratio_range[0]:
        cw, ch = w, int(round(w / cfg.crop_ratio_range[0]))
    elif in_ratio > cfg.crop_ratio_range[1]:
        ch, cw = h, int(round(h * cfg.crop_ratio_range[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    top, left, ch, cw = _crop_box(img.shape[0], img.shape[1], cfg, rng)
    crop = img[top:top + ch, left:left + cw]
    t = cfg.target_size
    if crop.shape[:2] == (t, t):
        return crop.copy()
    return resize(crop, (t, t, 3), order=1, mode="reflect", anti_aliasing=crop.shape[0] > t)


def _blend(a, b, factor):
    return np.clip(factor * a + (1.0 - factor) * b, 0.0, 1.0)


def _factor(strength, rng):
    return rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength)


def color_jitter(img: np.ndarray, strengths, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in that fixed order."""
    b, c, s, h = strengths
    out = img
    if b > 0:
        out = np.clip(out * _factor(b, rng), 0.0, 1.0)
    if c > 0:
        mean = float((out @ _LUMA).mean())
        out = _blend(out, mean, _factor(c, rng))
    if s > 0:
        gray = (out @ _LUMA)[..., None]
        out = _blend(out, gray, _factor(s, rng))
    if h > 0:
        shift = rng.uniform(-h, h)
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    gray = np.clip(img @ _LUMA, 0.0, 1.0)
    return np.repeat(gray[..., None], 3, axis=2)


def augment_view(image, cfg: AugmentConfig, rng: np.random.Generator,
                 source_id: str = "", view_tag: str = "q") -> ImageView:
    """One augmented view: crop -> jitter -> grayscale -> blur -> flip."""
    img = _as_float_rgb(image)
    out = random_resized_crop(img, cfg, rng)
    if rng.random() < cfg.jitter_prob:
        out = color_jitter(out, cfg.jitter_strengths, rng)
    if rng.random() < cfg.grayscale_prob:
        out = to_grayscale(out)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
    if rng.random() < cfg.hflip_prob:
        out = out[:, ::-1]
    out = np.ascontiguousarray(np.clip(out, 0.0, 1.0))
    return ImageView(out, source_id, view_tag)


def make_view_set(fore, back_a, back_b, cfg: AugmentConfig, rng: np.random.Generator,
                  ids=("fore", "back_a", "back_b")):
    """Return (fore_q, fore_k, back_q, back_k).

    The two foreground views are independent draws; each background gets
    one view.  Every view draws its own augmentation parameters.
    """
    fore_q = augment_view(fore, cfg, rng, ids[0], "q")
    fore_k = augment_view(fore, cfg, rng, ids[0], "k")
    back_q = augment_view(back_a, cfg, rng, ids[1], "q")
    back_k = augment_view(back_b, cfg, rng, ids[2], "k")
    return fore_q, fore_k, back_q, back_k
