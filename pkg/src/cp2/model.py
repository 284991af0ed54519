"""Segmentation network: a small atrous CNN backbone, an FCN or ASPP head,
and either a dense projection (pretraining) or a classifier (finetuning).
"""
from __future__ import annotations

import copy
import hashlib
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IncompatibleCheckpoint, InvalidConfig, InvalidInput, IOFailure

NORM_EPS = 1e-12
CHECKPOINT_FORMAT = "cp2-checkpoint"
CHECKPOINT_VERSION = 1
PHASES = ("pretrain", "quicktune", "finetune")


@dataclass(frozen=True)
class ModelConfig:
    backbone_widths: Tuple[int, ...] = (32, 64, 128, 256)
    stride: int = 16
    head_kind: str = "fcn"
    head_width: int = 256
    proj_dim: int = 128
    atrous_last_stage: bool = True
    norm: str = "batch"
    fcn_rate: int = 6
    aspp_rates: Tuple[int, ...] = (6, 12, 18)

    def validate(self) -> None:
        if self.head_kind not in ("fcn", "aspp"):
            raise InvalidConfig(f"head_kind must be 'fcn' or 'aspp', got {self.head_kind!r}")
        if self.norm not in ("batch", "group"):
            raise InvalidConfig(f"norm must be 'batch' or 'group', got {self.norm!r}")
        if self.proj_dim < 2:
            raise InvalidConfig("proj_dim must be >= 2")
        if len(self.backbone_widths) != 4:
            raise InvalidConfig("backbone_widths needs one width per stage (4 stages)")
        stage_plan(self.stride, self.atrous_last_stage)


def stage_plan(stride: int, atrous_last_stage: bool = True):
    """(stride, dilation) per stage: 4, then 2s until ``stride`` is reached, then dilated 1s."""
    if stride < 4 or stride & (stride - 1):
        raise InvalidConfig(f"stride {stride} must be a power of two >= 4")
    limit = 16 if atrous_last_stage else 32
    if stride > limit:
        raise InvalidConfig(f"stride {stride} is unreachable with atrous_last_stage={atrous_last_stage}")
    plan, total, dilation = [], 1, 1
    for i in range(4):
        s = 4 if i == 0 else 2
        if total * s <= stride:
            total *= s
            plan.append((s, 1))
        else:
            dilation *= 2 if atrous_last_stage else 1
            plan.append((1, dilation))
    return plan


def _group_norm(ch: int) -> nn.GroupNorm:
    # largest group count <= 8 that divides the channels
    groups = max(g for g in range(1, min(8, ch) + 1) if ch % g == 0)
    return nn.GroupNorm(groups, ch)


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "group":
        return _group_norm(ch)
    return nn.BatchNorm2d(ch)


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1, norm="batch"):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, dilation=1, norm="batch"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, dilation, dilation, bias=False)
        self.bn1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, dilation, dilation, bias=False)
        self.bn2 = _norm(norm, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(norm, cout))

    def forward(self, x):
        idt = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + idt, inplace=True)


class Backbone(nn.Module):
    """Four stages; the first downsamples by 4 (stem + block), later stages by 2 or dilate."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stride = cfg.stride
        plan = stage_plan(cfg.stride, cfg.atrous_last_stage)
        self.plan = plan
        w = cfg.backbone_widths
        self.stem = conv_bn_relu(3, w[0], 3, stride=2, norm=cfg.norm)
        stages = []
        cin = w[0]
        for i, (s, d) in enumerate(plan):
            # stem already took a factor of 2 from stage one
            s_eff = s // 2 if i == 0 else s
            stages.append(BasicBlock(cin, w[i], s_eff, d, cfg.norm))
            cin = w[i]
        self.stages = nn.Sequential(*stages)
        self.out_channels = w[-1]

    def forward(self, x):
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise InvalidInput(f"input {tuple(x.shape[-2:])} is not divisible by stride {self.stride}")
        return self.stages(self.stem(x))


class FCNHead(nn.Module):
    def __init__(self, cin, width, rate=6, norm="batch"):
        super().__init__()
        self.layers = nn.Sequential(
            conv_bn_relu(cin, width, 3, dilation=rate, norm=norm),
            conv_bn_relu(width, width, 3, dilation=rate, norm=norm),
        )
        self.out_channels = width

    def forward(self, x):
        return self.layers(x)


class ASPPHead(nn.Module):
    """DeepLab v3 style: 1x1 branch, atrous branches, image pooling, 1x1 fusion."""

    def __init__(self, cin, width, rates=(6, 12, 18), norm="batch"):
        super().__init__()
        branches = [conv_bn_relu(cin, width, 1, norm=norm)]
        branches += [conv_bn_relu(cin, width, 3, dilation=r, norm=norm) for r in rates]
        self.branches = nn.ModuleList(branches)
        # GroupNorm here: BatchNorm on a 1x1 map breaks at batch size 1
        self.pool_proj = nn.Sequential(
            nn.Conv2d(cin, width, 1, bias=False), _group_norm(width), nn.ReLU(inplace=True))
        self.fuse = conv_bn_relu(width * (len(rates) + 2), width, 1, norm=norm)
        self.out_channels = width

    def pool_branch(self, x):
        pooled = self.pool_proj(F.adaptive_avg_pool2d(x, 1))
        return pooled.expand(-1, -1, x.shape[-2], x.shape[-1])

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool_branch(x))
        return self.fuse(torch.cat(outs, dim=1))


class Projection(nn.Module):
    """Two 1x1 convolutions with a ReLU between, then per-cell l2 normalization."""

    def __init__(self, cin, proj_dim, hidden=None):
        super().__init__()
        hidden = hidden or cin
        self.conv1 = nn.Conv2d(cin, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, proj_dim, 1)

    def forward(self, x):
        z = self.conv2(F.relu(self.conv1(x)))
        return l2_normalize(z, dim=1)


def l2_normalize(x, dim=1):
    return x / x.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)


class SegModel(nn.Module):
    def __init__(self, cfg: ModelConfig, num_classes: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        if cfg.head_kind == "fcn":
            self.head = FCNHead(self.backbone.out_channels, cfg.head_width, cfg.fcn_rate, cfg.norm)
        else:
            self.head = ASPPHead(self.backbone.out_channels, cfg.head_width, cfg.aspp_rates, cfg.norm)
        self.projection = None
        self.classifier = None
        if num_classes is None:
            self.projection = Projection(cfg.head_width, cfg.proj_dim)
        else:
            self._attach_classifier(num_classes)

    def _attach_classifier(self, num_classes):
        if num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {num_classes}")
        self.classifier = nn.Conv2d(self.cfg.head_width, num_classes, 1)

    def head_features(self, x):
        return self.head(self.backbone(x))

    def forward(self, x):
        """Dense features: normalized embeddings when projecting, logits at stride s otherwise."""
        h = self.head_features(x)
        if self.projection is not None:
            return self.projection(h)
        return self.classifier(h)


def replace_projection_with_classifier(model: SegModel, num_classes: int,
                                       generator: Optional[torch.Generator] = None) -> SegModel:
    """Copy of ``model`` with the projection swapped for a fresh 1x1 classifier."""
    if num_classes < 2:
        raise InvalidConfig(f"num_classes must be >= 2, got {num_classes}")
    if model.projection is None:
        raise InvalidConfig("model has no projection to replace")
    out = copy.deepcopy(model)
    out.projection = None
    out._attach_classifier(num_classes)
    if generator is not None:
        reset_conv(out.classifier, generator)
    return out


def reset_conv(conv: nn.Conv2d, generator: torch.Generator):
    """Kaiming-uniform init (PyTorch's default for conv) drawn from ``generator``."""
    fan_in = conv.weight[0].numel()
    bound = 1.0 / fan_in ** 0.5
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound, generator=generator)
        if conv.bias is not None:
            conv.bias.uniform_(-bound, bound, generator=generator)


def segment_forward(model: SegModel, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel class logits at input resolution."""
    logits = model(images)
    return F.interpolate(logits, size=images.shape[-2:], mode="bilinear", align_corners=False)


def build_model(cfg: ModelConfig, num_classes: Optional[int] = None, seed: int = 0) -> SegModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegModel(cfg, num_classes)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_hash(state: dict, prefixes=("",)) -> str:
    """sha256 over tensors whose names start with any of ``prefixes``."""
    h = hashlib.sha256()
    for name in sorted(state):
        if any(name.startswith(p) for p in prefixes):
            h.update(name.encode())
            h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, *, phase: str, model: SegModel, config: dict, step: int = 0,
                    key_model: Optional[SegModel] = None, rng_state=None, extra=None) -> Path:
    """Write a versioned checkpoint atomically (temp file, then rename)."""
    if phase not in PHASES:
        raise InvalidConfig(f"phase must be one of {PHASES}")
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "phase": phase,
        "config": config,
        "model_config": asdict(model.cfg),
        "num_classes": None if model.classifier is None else model.classifier.out_channels,
        "state_dict": model.state_dict(),
        "key_state_dict": None if key_model is None else key_model.state_dict(),
        "step": step,
        "rng_state": rng_state,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path} is not a cp2 checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def model_config_from(payload: dict) -> ModelConfig:
    d = dict(payload["model_config"])
    for k in ("backbone_widths", "aspp_rates"):
        d[k] = tuple(d[k])
    return ModelConfig(**d)


def model_from_checkpoint(payload: dict) -> SegModel:
    model = SegModel(model_config_from(payload), payload.get("num_classes"))
    model.load_state_dict(payload["state_dict"])
    return model
