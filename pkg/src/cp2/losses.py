"""Dense and instance contrastive losses, masked pooling, and the memory bank.

Feature maps are torch tensors shaped (C, r, r) for a single image or
(B, C, r, r) for a batch; feature-grid masks are (r, r) / (B, r, r) arrays
with 1 marking foreground cells.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import DegenerateMask, InvalidConfig, InvalidState

MODES = ("full", "instance_only", "dense_only", "no_copy_paste")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    tau_dense: float = 1.0
    tau_ins: float = 0.2
    alpha: float = 0.2
    mode: str = "full"
    symmetric: bool = False

    def validate(self) -> None:
        if self.tau_dense <= 0 or self.tau_ins <= 0:
            raise InvalidConfig("temperatures must be positive")
        if self.alpha < 0:
            raise InvalidConfig("alpha must be non-negative")
        if self.mode not in MODES:
            raise InvalidConfig(f"unknown loss mode {self.mode!r}; expected one of {MODES}")


def _as_mask(fmask, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(fmask, device=like.device)
    return m.to(torch.bool)


def _flatten(features: torch.Tensor, fmask):
    """(B, C, r, r) -> (B, r*r, C) and mask (B, r*r)."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    m = _as_mask(fmask, features)
    if m.dim() == 2:
        m = m.unsqueeze(0)
    b, c = features.shape[:2]
    return features.reshape(b, c, -1).transpose(1, 2), m.reshape(b, -1)


def dense_loss(fq: torch.Tensor, fk: torch.Tensor, fmask_q, fmask_k, tau_dense: float = 1.0):
    """Pixel-wise contrastive loss between two composed views.

    Every (query foreground, key foreground) cell pair is a positive; the
    softmax for a query cell runs over all key cells, foreground and
    background.  The log terms are averaged over all positive pairs of an
    image, then over the batch.
    """
    q, mq = _flatten(fq, fmask_q)
    k, mk = _flatten(fk, fmask_k)
    nq = mq.sum(dim=1)
    nk = mk.sum(dim=1)
    if (nq == 0).any() or (nk == 0).any():
        raise DegenerateMask("dense loss needs at least one foreground cell in each view")
    logits = torch.bmm(q, k.transpose(1, 2)) / tau_dense  # (B, rq, rk)
    log_prob = logits - torch.logsumexp(logits, dim=2, keepdim=True)
    pos = (mq.unsqueeze(2) & mk.unsqueeze(1)).to(log_prob.dtype)
    per_image = -(log_prob * pos).sum(dim=(1, 2)) / (nq * nk).to(log_prob.dtype)
    return per_image.mean()


def masked_pool(features: torch.Tensor, fmask) -> torch.Tensor:
    """Sum of foreground cell vectors, divided by the l2 norm of that sum.

    Returns (C,) for a single map or (B, C) for a batch.
    """
    single = features.dim() == 3
    f, m = _flatten(features, fmask)
    if (m.sum(dim=1) == 0).any():
        raise DegenerateMask("masked pooling needs at least one foreground cell")
    s = (f * m.unsqueeze(2).to(f.dtype)).sum(dim=1)
    out = s / s.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    return out[0] if single else out


def instance_loss(q_plus: torch.Tensor, k_plus: torch.Tensor, negatives, tau_ins: float = 0.2):
    """InfoNCE of the positive key against bank negatives; mean over the batch.

    ``negatives`` is a MemoryBank or an (N, C) tensor; it is always detached.
    """
    neg = negatives.negatives() if isinstance(negatives, MemoryBank) else negatives
    if neg is None or neg.shape[0] == 0:
        raise InvalidState("instance loss needs a non-empty memory bank")
    neg = neg.detach().to(q_plus.dtype)
    single = q_plus.dim() == 1
    q = q_plus.unsqueeze(0) if single else q_plus
    k = k_plus.unsqueeze(0) if single else k_plus
    l_pos = (q * k).sum(dim=1, keepdim=True) / tau_ins
    l_neg = q @ neg.T / tau_ins
    logits = torch.cat([l_pos, l_neg], dim=1)
    return (torch.logsumexp(logits, dim=1) - l_pos[:, 0]).mean()


def total_loss(l_ins, l_dense, alpha: float, mode: str = "full"):
    if mode == "full":
        return l_ins + alpha * l_dense
    if mode in ("instance_only", "no_copy_paste"):
        return l_ins
    if mode == "dense_only":
        return l_dense
    raise InvalidConfig(f"unknown loss mode {mode!r}")


class MemoryBank:
    """Fixed-capacity FIFO queue of unit vectors used as negatives."""

    def __init__(self, size: int, dim: int, dtype=torch.float32):
        if size < 1 or dim < 1:
            raise InvalidConfig("memory bank size and dim must be positive")
        self.size = size
        self.dim = dim
        self.vectors = torch.zeros(size, dim, dtype=dtype)
        self.head = 0  # next write slot
        self.filled = 0

    @classmethod
    def random(cls, size: int, dim: int, generator: Optional[torch.Generator] = None,
               dtype=torch.float32) -> "MemoryBank":
        """A full bank of random unit vectors, as MoCo initializes its queue."""
        bank = cls(size, dim, dtype)
        v = torch.randn(size, dim, generator=generator, dtype=dtype)
        bank.vectors = v / v.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
        bank.filled = size
        return bank

    def reset(self):
        self.vectors.zero_()
        self.head = 0
        self.filled = 0

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> "MemoryBank":
        keys = keys.detach().to(self.vectors.dtype).reshape(-1, self.dim)
        if keys.shape[0] > self.size:
            keys = keys[-self.size:]
        n = keys.shape[0]
        idx = (self.head + torch.arange(n)) % self.size
        self.vectors[idx] = keys
        self.head = (self.head + n) % self.size
        self.filled = min(self.filled + n, self.size)
        return self

    def negatives(self) -> torch.Tensor:
        if self.filled == self.size:
            return self.vectors
        # still filling: slots 0..filled-1 are the valid ones
        return self.vectors[: self.filled]

    def ordered(self) -> torch.Tensor:
        """Stored vectors, oldest first."""
        if self.filled < self.size:
            return self.vectors[: self.filled].clone()
        return torch.roll(self.vectors, -self.head, dims=0).clone()

    def state_dict(self) -> dict:
        return {"vectors": self.vectors.clone(), "head": self.head, "filled": self.filled}

    def load_state_dict(self, state: dict):
        self.vectors = state["vectors"].clone()
        self.size, self.dim = self.vectors.shape
        self.head = int(state["head"])
        self.filled = int(state["filled"])
