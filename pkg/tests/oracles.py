"""Slow, loop-based reference evaluations used to check the vectorized code.

Nothing here imports from cp2.losses; each function is a literal
transcription of the formula it names.
"""
import math

import numpy as np


def dense_loss_loops(fq, fk, mq, mk, tau):
    """fq, fk: (C, r, r) arrays; mq, mk: (r, r) 0/1 arrays."""
    c, r, _ = fq.shape
    q_cells = [(i, j) for i in range(r) for j in range(r)]
    k_cells = [(i, j) for i in range(fk.shape[1]) for j in range(fk.shape[2])]
    q_fg = [p for p in q_cells if mq[p]]
    k_fg = [p for p in k_cells if mk[p]]
    total = 0.0
    for a in q_fg:
        for b in k_fg:
            num = math.exp(sum(fq[ch][a] * fk[ch][b] for ch in range(c)) / tau)
            den = 0.0
            for d in k_cells:
                den += math.exp(sum(fq[ch][a] * fk[ch][d] for ch in range(c)) / tau)
            total += -math.log(num / den)
    return total / (len(q_fg) * len(k_fg))


def masked_pool_loops(f, m):
    c = f.shape[0]
    s = [0.0] * c
    for i in range(f.shape[1]):
        for j in range(f.shape[2]):
            if m[i, j]:
                for ch in range(c):
                    s[ch] += f[ch, i, j]
    norm = math.sqrt(sum(v * v for v in s))
    return np.array([v / norm for v in s])


def instance_loss_loops(q, k, bank, tau):
    pos = math.exp(sum(a * b for a, b in zip(q, k)) / tau)
    neg = 0.0
    for row in bank:
        neg += math.exp(sum(a * b for a, b in zip(q, row)) / tau)
    return -math.log(pos / (pos + neg))


def compose_loops(fore, back, mask):
    """Per-pixel fore * m + back * (1 - m)."""
    out = np.empty_like(fore)
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            m = float(mask[y, x])
            for ch in range(fore.shape[2]):
                out[y, x, ch] = fore[y, x, ch] * m + back[y, x, ch] * (1.0 - m)
    return out


def central_difference(fn, x, step=1e-5):
    """Gradient of scalar fn at float64 array x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def random_unit_map(rng, c, r):
    f = rng.normal(size=(c, r, r))
    return f / np.linalg.norm(f, axis=0, keepdims=True)


def random_mixed_mask(rng, r, need_background=True):
    while True:
        m = (rng.random((r, r)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        if m.any() and (not need_background or not m.all()):
            return m
