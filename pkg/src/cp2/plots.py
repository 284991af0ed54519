"""Matplotlib figures written to files (Agg backend, no display needed)."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_per_class_iou(report, names: Sequence[str], path) -> Path:
    ious = [np.nan if v is None else v for v in report.per_class_iou]
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(ious), 3))
    ax.bar(range(len(ious)), np.nan_to_num(ious), color="tab:blue")
    ax.axhline(report.miou, color="tab:red", ls="--", lw=1, label=f"mIoU {report.miou:.3f}")
    ax.set_xticks(range(len(ious)))
    ax.set_xticklabels(names[:len(ious)], rotation=30)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend(loc="upper right")
    return _save(fig, path)


def read_metrics(metrics_csv) -> Dict[str, np.ndarray]:
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_training_curves(metrics_csv, path) -> Path:
    m = read_metrics(metrics_csv)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    if m:
        x = m.get("step", np.arange(len(next(iter(m.values())))))
        for key in ("total", "l_ins", "l_dense", "loss"):
            if key in m:
                axes[0].plot(x, m[key], label=key, lw=1)
        axes[0].set_xlabel("step")
        axes[0].set_ylabel("loss")
        axes[0].legend()
        if "lr" in m:
            axes[1].plot(x, m["lr"], color="tab:green", lw=1)
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("lr")
    return _save(fig, path)


def _overlay(img: np.ndarray, mask: np.ndarray, color=(1.0, 0.2, 0.2), alpha=0.45):
    out = img.copy()
    sel = mask.astype(bool)
    out[sel] = (1 - alpha) * out[sel] + alpha * np.asarray(color)
    return out


def plot_compose_grid(pairs: List, path, title: str = "") -> Path:
    """One row per composed pair: query, query mask overlay, key, key mask overlay."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 4, figsize=(6, 1.6 * n), squeeze=False)
    cols = ("query", "query mask", "key", "key mask")
    for i, p in enumerate(pairs):
        panels = (p.image_q.pixels, _overlay(p.image_q.pixels, p.mask_q.bits),
                  p.image_k.pixels, _overlay(p.image_k.pixels, p.mask_k.bits))
        for j, img in enumerate(panels):
            ax = axes[i, j]
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
            if i == 0:
                ax.set_title(cols[j])
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_report_comparison(rows: List[dict], path, metric: str = "miou") -> Path:
    names = [r["run"] for r in rows]
    vals = [np.nan if r.get(metric) in (None, "") else float(r[metric]) for r in rows]
    fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(rows), 3))
    ax.bar(range(len(rows)), np.nan_to_num(vals), color="tab:orange")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(metric)
    return _save(fig, path)
