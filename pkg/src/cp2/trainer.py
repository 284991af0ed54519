"""Contrastive pretraining and Quick Tuning loops.

A query encoder is trained by SGD; the key encoder follows it as an
exponential moving average and never sees the optimizer.  Keys of each
batch are enqueued in the memory bank after the step.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

import numpy as np
import torch

from .augment import load_image
from .compose import ComposedPair, make_pair, make_plain_pair
from .config import ExperimentConfig, TrainerConfig, dump_config
from .errors import (GenerationFailed, IncompatibleCheckpoint, InvalidConfig, InvalidInput,
                     NonFiniteLoss)
from .evalseg import gen_shapes_dataset
from .losses import LossConfig, MemoryBank, dense_loss, instance_loss, masked_pool, total_loss
from .model import SegModel, build_model, load_checkpoint, model_config_from, save_checkpoint

log = logging.getLogger(__name__)

PRIME_EPOCH = 1_000_000
METRIC_FIELDS = ("step", "l_ins", "l_dense", "total", "lr", "wall_time")


@dataclass
class TrainState:
    query: SegModel
    key: SegModel
    momentum_m: float
    bank: MemoryBank
    optimizer: torch.optim.Optimizer
    loss_cfg: LossConfig
    scheduler: Optional[object] = None
    step: int = 0
    master_seed: int = 0
    stride: int = 16
    bn_groups: int = 1
    history: List[dict] = field(default_factory=list)


def _tensors(params):
    if isinstance(params, torch.nn.Module):
        return list(params.parameters())
    return list(params)


@torch.no_grad()
def momentum_update(query_params, key_params, m: float):
    """key <- m * key + (1 - m) * query, elementwise and in place."""
    q, k = _tensors(query_params), _tensors(key_params)
    if len(q) != len(k):
        raise InvalidInput("query and key parameter sets differ in length")
    for pq, pk in zip(q, k):
        if pq.shape != pk.shape:
            raise InvalidInput(f"parameter shape mismatch {tuple(pq.shape)} vs {tuple(pk.shape)}")
        pk.mul_(m).add_(pq, alpha=1.0 - m)
    return key_params


def make_key_encoder(query: SegModel) -> SegModel:
    key = copy.deepcopy(query)
    for p in key.parameters():
        p.requires_grad_(False)
    return key


def _lr_lambda(cfg: TrainerConfig, total_steps: int):
    if cfg.schedule == "constant" or total_steps <= 0:
        return lambda s: 1.0
    return lambda s: 0.5 * (1.0 + math.cos(math.pi * min(s, total_steps) / total_steps))


def init_state(query: SegModel, loss_cfg: LossConfig, tcfg: TrainerConfig, total_steps: int,
               seed: int, lr: Optional[float] = None) -> TrainState:
    key = make_key_encoder(query)
    gen = torch.Generator().manual_seed(seed + 1)
    bank = MemoryBank.random(tcfg.bank_size, query.cfg.proj_dim, generator=gen)
    opt = torch.optim.SGD(query.parameters(), lr=tcfg.effective_lr() if lr is None else lr,
                          momentum=tcfg.momentum, weight_decay=tcfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, _lr_lambda(tcfg, total_steps))
    return TrainState(query=query, key=key, momentum_m=tcfg.ema_momentum, bank=bank, optimizer=opt,
                      loss_cfg=loss_cfg, scheduler=sched, master_seed=seed, stride=query.cfg.stride,
                      bn_groups=tcfg.bn_groups)


def collate(batch: List[ComposedPair]):
    xq = torch.from_numpy(np.stack([p.image_q.pixels for p in batch]).astype(np.float32))
    xk = torch.from_numpy(np.stack([p.image_k.pixels for p in batch]).astype(np.float32))
    mq = torch.from_numpy(np.stack([p.fmask_q for p in batch]).astype(bool))
    mk = torch.from_numpy(np.stack([p.fmask_k for p in batch]).astype(bool))
    return xq.permute(0, 3, 1, 2).contiguous(), xk.permute(0, 3, 1, 2).contiguous(), mq, mk


def grouped_forward(model: SegModel, x: torch.Tensor, groups: int, perm=None) -> torch.Tensor:
    """Forward in ``groups`` sub-batches so normalization statistics stay within each group.

    With ``perm`` the samples are regrouped by that permutation first (shuffled
    batch norm on a single device); outputs come back in the input order.
    """
    if groups <= 1 or x.shape[0] < 2 * groups:
        return model(x)
    idx = torch.arange(x.shape[0]) if perm is None else perm
    parts = idx.chunk(groups)
    out = torch.cat([model(x[p]) for p in parts])
    return out[torch.argsort(torch.cat(parts))]


def _key_perm(state: TrainState, n: int, salt: int = 0):
    if state.bn_groups <= 1:
        return None
    gen = torch.Generator().manual_seed(sample_seed(state.master_seed, state.step, salt))
    return torch.randperm(n, generator=gen)


def _losses(fq, fk, mq, mk, bank, cfg: LossConfig):
    zero = fq.new_zeros(())
    l_ins, l_dense = zero, zero
    k_plus = masked_pool(fk, mk)
    if cfg.mode != "dense_only":
        q_plus = masked_pool(fq, mq)
        l_ins = instance_loss(q_plus, k_plus, bank, cfg.tau_ins)
    if cfg.mode in ("full", "dense_only"):
        l_dense = dense_loss(fq, fk, mq, mk, cfg.tau_dense)
    return l_ins, l_dense, k_plus


def pretrain_step(state: TrainState, batch: List[ComposedPair]):
    """One optimization step; returns (state, metrics)."""
    if not batch:
        raise InvalidInput("empty batch")
    t0 = time.time()
    cfg = state.loss_cfg
    xq, xk, mq, mk = collate(batch)
    state.query.train()
    state.key.train()
    g = state.bn_groups
    fq = grouped_forward(state.query, xq, g)
    with torch.no_grad():
        fk = grouped_forward(state.key, xk, g, _key_perm(state, len(batch)))
    l_ins, l_dense, k_plus = _losses(fq, fk, mq, mk, state.bank, cfg)
    if cfg.symmetric:
        fq2 = grouped_forward(state.query, xk, g)
        with torch.no_grad():
            fk2 = grouped_forward(state.key, xq, g, _key_perm(state, len(batch), 1))
        l_ins2, l_dense2, k_plus2 = _losses(fq2, fk2, mk, mq, state.bank, cfg)
        l_ins, l_dense = 0.5 * (l_ins + l_ins2), 0.5 * (l_dense + l_dense2)
        k_plus = torch.cat([k_plus, k_plus2])
    loss = total_loss(l_ins, l_dense, cfg.alpha, cfg.mode)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss at step {state.step + 1}",
            {"step": state.step + 1, "sample_seeds": [p.seed for p in batch],
             "sources": [p.foreground_source_id for p in batch],
             "l_ins": l_ins.item(), "l_dense": l_dense.item()})
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    lr = state.optimizer.param_groups[0]["lr"]
    state.optimizer.step()
    if state.scheduler is not None:
        state.scheduler.step()
    momentum_update(state.query, state.key, state.momentum_m)
    state.bank.enqueue(k_plus)
    state.step += 1
    metrics = {"step": state.step, "l_ins": l_ins.item(), "l_dense": l_dense.item(),
               "total": loss.item(), "lr": lr, "wall_time": time.time() - t0}
    state.history.append(metrics)
    return state, metrics


# -- data --------------------------------------------------------------------

def sample_seed(master_seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([master_seed, epoch, position]).generate_state(1)[0])


def build_pair(corpus, index: int, seed: int, cfg: ExperimentConfig, copy_paste: bool = True):
    rng = np.random.default_rng(seed)
    stride = cfg.model.stride
    if not copy_paste:
        pair = make_plain_pair(corpus[index], cfg.augment, rng, stride, str(index))
    else:
        others = np.delete(np.arange(len(corpus)), index)
        a, b = rng.choice(others, size=2, replace=False)
        pair = make_pair(corpus[index], corpus[a], corpus[b], cfg.augment, cfg.masks, rng, stride,
                         ids=(str(index), str(a), str(b)))
    pair.seed = seed
    return pair


def iter_batches(corpus, cfg: ExperimentConfig, epoch: int, batch_size: int,
                 copy_paste: bool = True) -> Iterator[List[ComposedPair]]:
    """Each corpus image serves once per epoch as foreground; incomplete batches are dropped."""
    if len(corpus) < 3:
        raise InvalidInput("copy-paste needs a corpus of at least 3 images")
    order = np.random.default_rng([cfg.master_seed, epoch]).permutation(len(corpus))
    seeds = [sample_seed(cfg.master_seed, epoch, pos) for pos in range(len(order))]

    def one(pos):
        try:
            return build_pair(corpus, int(order[pos]), seeds[pos], cfg, copy_paste)
        except GenerationFailed as exc:
            log.warning("skipping sample %d (seed %d): %s", order[pos], seeds[pos], exc)
            return None

    workers = cfg.trainer.num_workers
    if workers > 0:
        with ThreadPoolExecutor(workers) as ex:
            pairs = ex.map(one, range(len(order)))
            yield from _chunk(pairs, batch_size)
    else:
        yield from _chunk(map(one, range(len(order))), batch_size)


def _chunk(pairs: Iterable, batch_size: int):
    batch = []
    for p in pairs:
        if p is None:
            continue
        batch.append(p)
        if len(batch) == batch_size:
            yield batch
            batch = []


def load_corpus(cfg: ExperimentConfig):
    """Unlabeled images: files from data.corpus_dir, or synthetic shapes images."""
    d = cfg.data
    if d.corpus_dir:
        files = sorted(p for p in Path(d.corpus_dir).iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        return [load_image(p) for p in files]
    rng = np.random.default_rng([cfg.master_seed, 101])
    return gen_shapes_dataset(rng, d.corpus_size, d.image_size, d.num_classes).images


# -- run loops ---------------------------------------------------------------

class _MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        self.t0 = time.time()
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)

    def append(self, m: dict):
        row = dict(m, wall_time=time.time() - self.t0)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in METRIC_FIELDS])


@torch.no_grad()
def prime_bank(state: TrainState, corpus, cfg: ExperimentConfig, batch_size: int):
    """Fill the bank with key-encoder embeddings of composed views before step one.

    Draws from epoch ids >= PRIME_EPOCH, disjoint from the training epochs.
    """
    copy_paste = state.loss_cfg.mode != "no_copy_paste"
    state.bank.reset()
    state.key.train()
    epoch = PRIME_EPOCH
    while state.bank.filled < state.bank.size:
        before = state.bank.filled
        for batch in iter_batches(corpus, cfg, epoch, batch_size, copy_paste):
            _, xk, _, mk = collate(batch)
            fk = grouped_forward(state.key, xk, state.bn_groups, _key_perm(state, len(batch)))
            state.bank.enqueue(masked_pool(fk, mk))
            if state.bank.filled >= state.bank.size:
                break
        if state.bank.filled == before:
            raise InvalidInput("corpus yields no batch for bank priming")
        epoch += 1


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return n // batch_size


def _run(state: TrainState, corpus, cfg: ExperimentConfig, epochs: int, batch_size: int,
         run_dir: Optional[Path], phase: str, max_steps: Optional[int] = None):
    copy_paste = state.loss_cfg.mode != "no_copy_paste"
    if state.bank.size >= len(corpus):
        # the bank then holds a stale key of every foreground image: unavoidable false negatives
        log.warning("memory bank (%d) is not smaller than the corpus (%d images)",
                    state.bank.size, len(corpus))
    if cfg.trainer.bank_init == "keys":
        prime_bank(state, corpus, cfg, batch_size)
    metrics_log = _MetricsLog(run_dir / "metrics.csv") if run_dir else None
    every = cfg.trainer.checkpoint_every
    epoch = 0
    # with a step budget, epochs cycle until the budget is spent
    while max_steps is not None or epoch < epochs:
        n_before = state.step
        for batch in iter_batches(corpus, cfg, epoch, batch_size, copy_paste):
            _, m = pretrain_step(state, batch)
            if metrics_log:
                metrics_log.append(m)
            if run_dir and every and state.step % every == 0:
                _save(state, cfg, run_dir / "checkpoints" / f"step_{state.step:06d}.pt", phase, epoch)
            if max_steps is not None and state.step >= max_steps:
                break
        epoch += 1
        if state.step == n_before:
            raise InvalidInput(f"corpus of {len(corpus)} images yields no batch of {batch_size}")
        if max_steps is not None and state.step >= max_steps:
            break
    if run_dir:
        return _save(state, cfg, run_dir / "checkpoints" / "final.pt", phase, epoch)
    return None


def _save(state: TrainState, cfg: ExperimentConfig, path: Path, phase: str, epoch: int):
    return save_checkpoint(
        path, phase=phase, model=state.query, key_model=state.key, config=cfg.to_dict(),
        step=state.step,
        rng_state={"master_seed": state.master_seed, "epoch": epoch, "torch": torch.get_rng_state()},
        extra={"bank": state.bank.state_dict(), "optimizer": state.optimizer.state_dict(),
               "loss_mode": state.loss_cfg.mode})


def _prepare_run_dir(run_dir, cfg: ExperimentConfig) -> Optional[Path]:
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(dump_config(cfg))
    return run_dir


def total_steps(cfg: ExperimentConfig, n_images: int, epochs: int, batch_size: int) -> int:
    steps = epochs * _steps_per_epoch(n_images, batch_size)
    if cfg.trainer.max_steps is not None:
        steps = cfg.trainer.max_steps
    return steps


def pretrain(cfg: ExperimentConfig, corpus=None, run_dir=None, return_state: bool = False):
    """Pretrain from scratch; returns the final checkpoint path (or the state when asked)."""
    cfg.validate()
    corpus = load_corpus(cfg) if corpus is None else corpus
    run_dir = _prepare_run_dir(run_dir, cfg)
    tcfg = cfg.trainer
    query = build_model(cfg.model, seed=cfg.master_seed)
    steps = total_steps(cfg, len(corpus), tcfg.epochs, tcfg.batch_size)
    state = init_state(query, cfg.losses, tcfg, steps, cfg.master_seed)
    path = _run(state, corpus, cfg, tcfg.epochs, tcfg.batch_size, run_dir, "pretrain", tcfg.max_steps)
    return state if return_state else path


def load_backbone(query: SegModel, payload: dict):
    """Copy backbone weights from a checkpoint; shapes must match exactly."""
    own = query.backbone.state_dict()
    src = {k[len("backbone."):]: v for k, v in payload["state_dict"].items() if k.startswith("backbone.")}
    if set(src) != set(own):
        raise IncompatibleCheckpoint("checkpoint backbone parameter names do not match the model")
    for name, tensor in own.items():
        if src[name].shape != tensor.shape:
            raise IncompatibleCheckpoint(
                f"backbone.{name}: checkpoint shape {tuple(src[name].shape)} != model {tuple(tensor.shape)}")
    query.backbone.load_state_dict(src)


def quick_tune(cfg: ExperimentConfig, init_checkpoint=None, corpus=None, run_dir=None,
               return_state: bool = False):
    """Contrastive tuning of a pretrained backbone under a freshly initialized head.

    Head and projection are re-initialized from the master seed, the key
    encoder starts as a copy of the query encoder, and the bank is reset.
    """
    cfg.validate()
    qt = cfg.quicktune
    init_checkpoint = init_checkpoint or qt.init_checkpoint
    if init_checkpoint is None:
        raise InvalidConfig("quick tuning needs an init checkpoint")
    payload = init_checkpoint if isinstance(init_checkpoint, dict) else load_checkpoint(init_checkpoint)
    ck_cfg = model_config_from(payload)
    if (ck_cfg.backbone_widths, ck_cfg.stride, ck_cfg.atrous_last_stage) != (
            cfg.model.backbone_widths, cfg.model.stride, cfg.model.atrous_last_stage):
        raise IncompatibleCheckpoint("checkpoint backbone config does not match the model config")
    corpus = load_corpus(cfg) if corpus is None else corpus
    run_dir = _prepare_run_dir(run_dir, cfg)
    query = build_model(cfg.model, seed=cfg.master_seed + 7919)
    load_backbone(query, payload)
    batch_size = qt.batch_size or cfg.trainer.batch_size
    lr = None
    if qt.lr is not None:
        scale = batch_size / 256 if cfg.trainer.lr_scaling == "linear" else 1.0
        lr = qt.lr * scale
    steps = qt.epochs * _steps_per_epoch(len(corpus), batch_size)
    tcfg = cfg.trainer
    if batch_size != tcfg.batch_size:
        from dataclasses import replace
        tcfg = replace(tcfg, batch_size=batch_size)
    state = init_state(query, cfg.losses, tcfg, steps, cfg.master_seed, lr=lr)
    path = _run(state, corpus, cfg, qt.epochs, batch_size, run_dir, "quicktune")
    return state if return_state else path
