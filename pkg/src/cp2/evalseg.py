"""Synthetic segmentation data, supervised finetuning and mIoU evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.draw import disk, ellipse, polygon

from .errors import InvalidConfig, InvalidInput, IOFailure
from .model import (ModelConfig, SegModel, build_model, load_checkpoint, model_config_from,
                    replace_projection_with_classifier, save_checkpoint, segment_forward)

log = logging.getLogger(__name__)

IGNORE_VALUE = 255
CLASS_NAMES = ("background", "circle", "triangle", "rectangle", "ellipse", "diamond", "cross")
# (orientation in radians, spatial frequency in cycles per image) of each class texture
_TEXTURES = {
    1: (0.0, 6.0),
    2: (math.pi / 2, 6.0),
    3: (math.pi / 4, 9.0),
    4: (-math.pi / 4, 9.0),
    5: (0.0, 12.0),
    6: (math.pi / 2, 12.0),
}


@dataclass
class SegSample:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    label: np.ndarray  # H x W uint8
    ignore_value: int = IGNORE_VALUE


@dataclass
class SegDataset:
    samples: List[SegSample]
    num_classes: int

    def __len__(self):
        return len(self.samples)

    @property
    def images(self) -> List[np.ndarray]:
        return [s.image for s in self.samples]

    def tensors(self, indices=None):
        idx = range(len(self.samples)) if indices is None else indices
        x = np.stack([self.samples[i].image for i in idx]).astype(np.float32)
        y = np.stack([self.samples[i].label for i in idx]).astype(np.int64)
        return torch.from_numpy(x).permute(0, 3, 1, 2).contiguous(), torch.from_numpy(y)


@dataclass
class IoUReport:
    per_class_iou: np.ndarray  # nan for classes absent from prediction and label
    miou: float
    confusion: np.ndarray  # rows: label, columns: prediction

    def to_dict(self, class_names=None) -> dict:
        names = class_names or [str(c) for c in range(len(self.per_class_iou))]
        return {
            "miou": self.miou,
            "per_class_iou": {n: (None if math.isnan(v) else float(v))
                              for n, v in zip(names, self.per_class_iou)},
            "confusion": self.confusion.tolist(),
        }


# -- dataset -----------------------------------------------------------------

def _texture(size, theta, freq, rng):
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)


def _shape_pixels(cls, size, rng):
    lo, hi = size // 7, size // 3
    cy, cx = rng.uniform(lo, size - lo, 2)
    r = rng.uniform(lo, hi)
    if cls == 1:
        return disk((cy, cx), r, shape=(size, size))
    if cls == 2:
        ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
        return polygon(cy + 1.3 * r * np.sin(ang), cx + 1.3 * r * np.cos(ang), shape=(size, size))
    if cls == 3:
        h, w = rng.uniform(0.7, 1.0, 2) * 1.6 * r
        return polygon([cy - h, cy - h, cy + h, cy + h], [cx - w, cx + w, cx + w, cx - w],
                       shape=(size, size))
    if cls == 4:
        return ellipse(cy, cx, r, 0.5 * r, shape=(size, size), rotation=rng.uniform(0, np.pi))
    if cls == 5:
        return polygon([cy - 1.3 * r, cy, cy + 1.3 * r, cy], [cx, cx + r, cx, cx - r], shape=(size, size))
    w = max(2.0, 0.35 * r)
    canvas = np.zeros((size, size), dtype=bool)
    for hh, ww in ((w, r), (r, w)):
        rr, cc = polygon([cy - hh, cy - hh, cy + hh, cy + hh], [cx - ww, cx + ww, cx + ww, cx - ww],
                         shape=(size, size))
        canvas[rr, cc] = True
    return np.nonzero(canvas)


def gen_shapes_sample(rng: np.random.Generator, size: int, num_classes: int) -> SegSample:
    # background: smooth colored noise, class 0
    noise = gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(size / 8, size / 8, 0))
    noise = (noise - noise.mean()) / (noise.std() + 1e-8)
    image = np.clip(rng.uniform(0.2, 0.8, 3) + 0.12 * noise, 0, 1)
    label = np.zeros((size, size), dtype=np.uint8)
    n_shapes = int(rng.integers(1, 4))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes))
        rr, cc = _shape_pixels(cls, size, rng)
        if rr.size == 0:
            continue
        theta, freq = _TEXTURES[cls]
        tex = _texture(size, theta, freq, rng)
        color = rng.uniform(0.0, 1.0, 3)
        dark = color * 0.35
        fill = dark + (color - dark) * tex[..., None]
        image[rr, cc] = fill[rr, cc]
        label[rr, cc] = cls
    image = np.clip(image + rng.normal(0, 0.02, image.shape), 0.0, 1.0)
    if not (label > 0).any():
        # every shape fell off the canvas; paste a centred disk so the sample has >= 2 classes
        rr, cc = disk((size / 2, size / 2), size / 5, shape=(size, size))
        image[rr, cc] = rng.uniform(0, 1, 3)
        label[rr, cc] = 1
    return SegSample(image, label)


def gen_shapes_dataset(rng: np.random.Generator, n_samples: int, size: int = 64,
                       num_classes: int = 4) -> SegDataset:
    """Textured geometric shapes on smooth noise backgrounds, with exact labels.

    Class 0 is background; classes 1.. are circle, triangle, rectangle,
    ellipse, diamond, cross.  Each class carries its own stripe texture.
    """
    if not 2 <= num_classes <= len(CLASS_NAMES):
        raise InvalidConfig(f"num_classes must be in [2, {len(CLASS_NAMES)}]")
    return SegDataset([gen_shapes_sample(rng, size, num_classes) for _ in range(n_samples)], num_classes)


def save_dataset(dataset: SegDataset, root) -> Path:
    """PNG images + palette-indexed PNG labels + manifest.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    palette = _palette()
    entries = []
    for i, s in enumerate(dataset.samples):
        img_name, lbl_name = f"images/{i:05d}.png", f"labels/{i:05d}.png"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / img_name)
        lbl = Image.fromarray(s.label.astype(np.uint8), mode="P")
        lbl.putpalette(palette)
        lbl.save(root / lbl_name)
        entries.append({"image": img_name, "label": lbl_name})
    manifest = {"num_classes": dataset.num_classes, "ignore_value": IGNORE_VALUE,
                "class_names": list(CLASS_NAMES[:dataset.num_classes]), "samples": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def load_dataset(root) -> SegDataset:
    root = Path(root)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        samples = []
        for e in manifest["samples"]:
            with Image.open(root / e["image"]) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            with Image.open(root / e["label"]) as im:
                lbl = np.asarray(im, dtype=np.uint8)
            samples.append(SegSample(img, lbl, manifest.get("ignore_value", IGNORE_VALUE)))
    except (OSError, KeyError, ValueError) as exc:
        raise IOFailure(f"cannot read dataset at {root}: {exc}") from exc
    return SegDataset(samples, int(manifest["num_classes"]))


def _palette():
    rng = np.random.default_rng(7)
    pal = rng.integers(0, 256, (256, 3)).astype(np.uint8)
    pal[0] = 0
    pal[IGNORE_VALUE] = 255
    return pal.flatten().tolist()


# -- metric ------------------------------------------------------------------

def confusion_matrix(predictions, labels, num_classes: int, ignore_value: int = IGNORE_VALUE):
    pred = np.asarray(predictions).reshape(-1).astype(np.int64)
    lbl = np.asarray(labels).reshape(-1).astype(np.int64)
    if pred.shape != lbl.shape:
        raise InvalidInput(f"prediction/label size mismatch: {pred.shape} vs {lbl.shape}")
    keep = lbl != ignore_value
    pred, lbl = pred[keep], lbl[keep]
    if ((lbl < 0) | (lbl >= num_classes)).any() or ((pred < 0) | (pred >= num_classes)).any():
        raise InvalidInput("class index out of range")
    return np.bincount(lbl * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray) -> IoUReport:
    if conf.sum() == 0:
        raise InvalidInput("no pixels left to evaluate after removing ignored labels")
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    iou = np.full(conf.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    return IoUReport(iou, float(iou[present].mean()), conf)


def miou(predictions, labels, num_classes: int, ignore_value: int = IGNORE_VALUE) -> IoUReport:
    """IoU_c = TP / (TP + FP + FN), averaged over classes seen in prediction or label."""
    return report_from_confusion(confusion_matrix(predictions, labels, num_classes, ignore_value))


# -- finetuning --------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hflip: bool = True
    num_labeled: Optional[int] = None  # use the first n samples only

    def validate(self):
        if self.steps < 1 or self.batch_size < 1 or self.lr <= 0:
            raise InvalidConfig("finetune steps, batch_size and lr must be positive")


def init_segmentation_model(init, num_classes: int, model_cfg: Optional[ModelConfig] = None,
                            seed: int = 0):
    """Build the model to finetune.

    ``init`` is None/"random" for a fresh network, or a checkpoint path/payload.
    Returns (model, head_pretrained).
    """
    gen = torch.Generator().manual_seed(seed)
    if init is None or init == "random":
        if model_cfg is None:
            raise InvalidConfig("random init needs a model config")
        return build_model(model_cfg, num_classes, seed=seed), False
    payload = init if isinstance(init, dict) else load_checkpoint(init)
    cfg = model_config_from(payload)
    if model_cfg is not None and model_cfg != cfg:
        log.warning("checkpoint model config differs from the experiment config; using the checkpoint's")
    if payload["phase"] in ("pretrain", "quicktune"):
        pretrained = SegModel(cfg, None)
        pretrained.load_state_dict(payload["state_dict"])
        return replace_projection_with_classifier(pretrained, num_classes, gen), True
    if payload.get("num_classes") != num_classes:
        raise InvalidConfig(
            f"checkpoint has {payload.get('num_classes')} classes, dataset has {num_classes}")
    model = SegModel(cfg, num_classes)
    model.load_state_dict(payload["state_dict"])
    return model, True


def finetune(init, dataset: SegDataset, ft_cfg: FinetuneConfig = FinetuneConfig(),
             model_cfg: Optional[ModelConfig] = None, seed: int = 0, run_dir=None,
             config_echo: Optional[dict] = None):
    """Supervised cross-entropy training on label maps.

    Weight decay applies only when the head starts from random init; a head
    pretrained with the contrastive objective is finetuned without decay.
    Returns (model, loss history).
    """
    ft_cfg.validate()
    model, head_pretrained = init_segmentation_model(init, dataset.num_classes, model_cfg, seed)
    wd = 0.0 if head_pretrained else ft_cfg.weight_decay
    opt = torch.optim.SGD(model.parameters(), lr=ft_cfg.lr, momentum=ft_cfg.momentum, weight_decay=wd)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: (1 - s / ft_cfg.steps) ** 0.9)  # poly schedule
    n = len(dataset) if ft_cfg.num_labeled is None else min(ft_cfg.num_labeled, len(dataset))
    x_all, y_all = dataset.tensors(range(n))
    rng = np.random.default_rng(seed)
    losses = []
    metrics_rows = []
    t0 = time.time()
    model.train()
    for step in range(ft_cfg.steps):
        idx = rng.choice(n, size=min(ft_cfg.batch_size, n), replace=False)
        x, y = x_all[idx], y_all[idx]
        if ft_cfg.hflip:
            flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
            x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            y = torch.where(flip[:, None, None], y.flip(-1), y)
        logits = segment_forward(model, x)
        loss = F.cross_entropy(logits, y, ignore_index=IGNORE_VALUE)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        metrics_rows.append({"step": step + 1, "loss": losses[-1], "lr": opt.param_groups[0]["lr"],
                             "wall_time": time.time() - t0})
    model.eval()
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(run_dir / "checkpoints" / "finetune.pt", phase="finetune", model=model,
                        config=config_echo or {}, step=ft_cfg.steps,
                        extra={"head_pretrained": head_pretrained, "weight_decay": wd})
        with open(run_dir / "finetune_metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "loss", "lr", "wall_time"])
            w.writeheader()
            w.writerows(metrics_rows)
    return model, losses


@torch.no_grad()
def predict(model: SegModel, dataset: SegDataset, batch_size: int = 32) -> np.ndarray:
    model.eval()
    preds = []
    for start in range(0, len(dataset), batch_size):
        x, _ = dataset.tensors(range(start, min(start + batch_size, len(dataset))))
        preds.append(segment_forward(model, x).argmax(dim=1).numpy().astype(np.uint8))
    return np.concatenate(preds) if preds else np.zeros((0,), dtype=np.uint8)


def evaluate(model: SegModel, dataset: SegDataset, out_dir=None, batch_size: int = 32,
             metrics_csv=None) -> IoUReport:
    """Accumulate one confusion matrix over the dataset; optionally write report + plots."""
    if len(dataset) == 0:
        raise InvalidInput("empty evaluation set")
    conf = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    preds = predict(model, dataset, batch_size)
    for p, s in zip(preds, dataset.samples):
        conf += confusion_matrix(p, s.label, dataset.num_classes, s.ignore_value)
    report = report_from_confusion(conf)
    if out_dir is not None:
        from . import plots
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = list(CLASS_NAMES[:dataset.num_classes])
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(names), indent=2))
        plots.plot_per_class_iou(report, names, out_dir / "per_class_iou.png")
        if metrics_csv is not None and Path(metrics_csv).exists():
            plots.plot_training_curves(metrics_csv, out_dir / "training_curves.png")
    return report
