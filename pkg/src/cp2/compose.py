"""Copy-paste composition of foreground views onto background views."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, ImageView, augment_view, make_view_set
from .errors import GenerationFailed, InvalidInput
from .masks import Mask, MaskConfig, downsample_mask, sample_mask

log = logging.getLogger(__name__)


@dataclass
class ComposedPair:
    image_q: ImageView
    image_k: ImageView
    mask_q: Mask
    mask_k: Mask
    fmask_q: np.ndarray
    fmask_k: np.ndarray
    foreground_source_id: str
    seed: int = -1  # per-sample seed, for diagnostics and replay


def compose(fore: ImageView, back: ImageView, mask: Mask) -> ImageView:
    """Pixels come from ``fore`` where the mask is 1 and from ``back`` where it is 0."""
    f, b = fore.pixels, back.pixels
    m = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    if f.shape != b.shape or f.shape[:2] != m.shape:
        raise InvalidInput(f"shape mismatch: fore {f.shape}, back {b.shape}, mask {m.shape}")
    out = np.where(m[..., None].astype(bool), f, b)
    return ImageView(out, fore.source_id, fore.view_tag)


def is_mixed(fmask: np.ndarray) -> bool:
    """At least one foreground and one background cell."""
    return bool(fmask.any()) and not bool(fmask.all())


def make_pair(fore_img, back_a, back_b, aug_cfg: AugmentConfig, mask_cfg: MaskConfig,
              rng: np.random.Generator, stride: int = 16,
              ids=("fore", "back_a", "back_b")) -> ComposedPair:
    """Compose I_q and I_k sharing a foreground source but with different backgrounds.

    Masks are redrawn (up to ``mask_cfg.retry_cap`` times) until both
    feature-grid masks hold foreground and background cells.
    """
    fq, fk, bq, bk = make_view_set(fore_img, back_a, back_b, aug_cfg, rng, ids)
    size = aug_cfg.target_size

    def draw():
        for _ in range(mask_cfg.retry_cap):
            m = sample_mask(mask_cfg, rng, size)
            fm = downsample_mask(m, stride)
            if is_mixed(fm):
                return m, fm
        raise GenerationFailed(
            f"no mask with mixed {size // stride}x{size // stride} feature grid "
            f"after {mask_cfg.retry_cap} draws")

    mq, fmq = draw()
    if mask_cfg.independent_masks:
        mk, fmk = draw()
    else:
        mk, fmk = mq, fmq
    return ComposedPair(
        image_q=compose(fq, bq, mq), image_k=compose(fk, bk, mk),
        mask_q=mq, mask_k=mk, fmask_q=fmq, fmask_k=fmk,
        foreground_source_id=ids[0])


def make_plain_pair(image, aug_cfg: AugmentConfig, rng: np.random.Generator,
                    stride: int = 16, source_id: str = "fore") -> ComposedPair:
    """Two augmented views with no pasting; the masks cover the whole image.

    Used by the ``no_copy_paste`` ablation, where masked pooling over a full
    mask reduces to global average pooling.
    """
    vq = augment_view(image, aug_cfg, rng, source_id, "q")
    vk = augment_view(image, aug_cfg, rng, source_id, "k")
    size = aug_cfg.target_size
    full = Mask(np.ones((size, size), dtype=np.uint8), "full")
    fm = downsample_mask(full, stride)
    return ComposedPair(vq, vk, full, full, fm, fm.copy(), source_id)
