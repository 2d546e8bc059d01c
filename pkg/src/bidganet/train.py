"""Optimizer, schedule, OHEM loss, cropping and the training loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import SegSample
from .errors import ConfigError, DataError, NumericAbort, ShapeError
from .model import SegModel, save_checkpoint
from .tensor import GradTape, Tensor, record

IGNORE_INDEX = 255


@dataclass
class TrainConfig:
    """Optimization recipe. Defaults follow the Cityscapes setting."""

    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    total_iters: int = 1000
    warmup_iters: Optional[int] = None
    poly_power: float = 0.9
    crop: tuple = (512, 512)
    batch_size: int = 32
    ohem: bool = True
    ohem_thresh: float = 0.7
    ohem_min_kept: float = 1 / 16
    ignore_index: int = IGNORE_INDEX
    seed: int = 0
    log_every: int = 10
    ckpt_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = self.total_iters // 100
        self.crop = tuple(int(c) for c in self.crop)
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.total_iters and self.warmup_iters >= self.total_iters:
            raise ConfigError("warmup_iters must be smaller than total_iters")
        if len(self.crop) != 2 or self.crop[0] % 32 or self.crop[1] % 32:
            raise ConfigError(f"crop dims must be divisible by 32, got {self.crop}")
        if not 0.0 < self.ohem_thresh < 1.0:
            raise ConfigError("ohem_thresh must lie in (0, 1)")
        if not 0.0 <= self.ohem_min_kept <= 1.0:
            raise ConfigError("ohem_min_kept is a fraction in [0, 1]")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")

    @classmethod
    def cityscapes(cls, total_iters: int, **kw) -> "TrainConfig":
        return cls(total_iters=total_iters, **kw)

    @classmethod
    def camvid(cls, total_iters: int, **kw) -> "TrainConfig":
        kw = {"base_lr": 0.005, "weight_decay": 5e-5, "crop": (672, 672), "batch_size": 16, **kw}
        return cls(total_iters=total_iters, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def iters_for_epochs(epochs: int, dataset_size: int, batch_size: int) -> int:
    return epochs * math.ceil(dataset_size / batch_size)


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``base_lr`` then poly decay to zero at ``total_iters``."""
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    w = cfg.warmup_iters
    if it < w:
        return cfg.base_lr * (it + 1) / w
    span = cfg.total_iters - w
    if span <= 0:
        return 0.0
    return cfg.base_lr * (1.0 - (it - w) / span) ** cfg.poly_power


class SGD:
    """Momentum SGD with coupled L2 weight decay."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.state, lr,
                 self.momentum, self.weight_decay)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             state: Sequence[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """In place: ``v = m*v + g + wd*p``; ``p -= lr*v``."""
    if not len(params) == len(grads) == len(state):
        raise ShapeError("params, grads and state must have equal length")
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"sgd_step: shapes {p.shape}, {g.shape}, {v.shape} differ")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        if lr:
            p -= lr * v


def _pixel_ce(logits: np.ndarray, labels: np.ndarray, ignore_index: int):
    """Per-pixel softmax probabilities and CE; logits (n, C, H, W)."""
    c = logits.shape[1]
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise DataError(f"label {int(labels[bad][0])} outside [0, {c}) and not ignore_index")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0).astype(np.int64)
    true_logp = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    return logp, -true_logp, valid, safe


def ohem_select(loss: np.ndarray, prob: np.ndarray, valid: np.ndarray,
                thresh: float, min_kept: float) -> np.ndarray:
    """Boolean mask of kept pixels.

    Hard pixels (true-class probability below ``thresh``) are kept; if they
    fall short of ``ceil(min_kept * valid)``, the highest-loss valid pixels
    fill the quota (ties broken by scan order).
    """
    flat_valid = valid.reshape(-1)
    n_valid = int(flat_valid.sum())
    hard = (prob.reshape(-1) < thresh) & flat_valid
    quota = min(n_valid, math.ceil(min_kept * n_valid - 1e-12))
    if hard.sum() >= quota:
        return hard.reshape(valid.shape)
    idx = np.flatnonzero(flat_valid)
    order = np.argsort(-loss.reshape(-1)[idx], kind="stable")
    keep = np.zeros_like(flat_valid)
    keep[idx[order[:quota]]] = True
    return keep.reshape(valid.shape)


def ohem_ce(logits: Tensor, labels: np.ndarray, cfg: TrainConfig | None = None, *,
            ohem: Optional[bool] = None, thresh: float = 0.7, min_kept: float = 1 / 16,
            ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Softmax cross-entropy averaged over OHEM-kept pixels.

    ``logits`` is (C, H, W) or (n, C, H, W); ``labels`` matches without the
    class axis. With ``ohem`` off every valid pixel is kept.
    """
    if cfg is not None:
        thresh, min_kept, ignore_index = cfg.ohem_thresh, cfg.ohem_min_kept, cfg.ignore_index
        if ohem is None:
            ohem = cfg.ohem
    ohem = True if ohem is None else ohem
    x = logits.data
    lab = np.asarray(labels)
    squeeze = x.ndim == 3
    if squeeze:
        x, lab = x[None], lab[None]
    if lab.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    logp, loss, valid, safe = _pixel_ce(x.astype(np.float64), lab, ignore_index)
    if ohem:
        keep = ohem_select(loss, np.exp(-loss), valid, thresh, min_kept)
    else:
        keep = valid
    k = int(keep.sum())
    value = float(loss[keep].sum() / k) if k else 0.0

    def vjp(g):
        if not k:
            return (np.zeros_like(logits.data),)
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * (keep[:, None] * (float(g) / k))
        if squeeze:
            grad = grad[0]
        return (grad.astype(logits.dtype),)

    return record("ohem_ce", np.asarray(value, dtype=logits.dtype), (logits,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return ohem_ce(logits, labels, ohem=False, ignore_index=ignore_index)


def random_crop(sample: SegSample, crop: tuple, seed: int) -> SegSample:
    """Crop image and label at the same uniformly drawn offset."""
    ch, cw = crop
    _, h, w = sample.image.shape
    if ch > h or cw > w:
        raise ShapeError(f"crop {ch}x{cw} larger than image {h}x{w}")
    if (ch, cw) == (h, w):
        return sample
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    return SegSample(sample.image[:, oy:oy + ch, ox:ox + cw],
                     sample.label[oy:oy + ch, ox:ox + cw], sample.id)


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_s: float = 0.0

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _assemble(dataset, idx, it, cfg: TrainConfig):
    crops = [random_crop(dataset[i], cfg.crop, _seed(cfg.seed, it, j)) if cfg.crop else dataset[i]
             for j, i in enumerate(idx)]
    images = np.stack([c.image for c in crops])
    labels = np.stack([c.label for c in crops])
    return images, labels


def _batches(n: int, cfg: TrainConfig):
    """Epoch-shuffled index batches, one per iteration."""
    rng = np.random.default_rng(_seed(cfg.seed, 0x5EED))
    order: list[int] = []
    for _ in range(cfg.total_iters):
        while len(order) < cfg.batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:cfg.batch_size]
        order = order[cfg.batch_size:]


def _prefetch(pool, dataset, batch_iter, cfg):
    pending: deque = deque()
    for it, idx in batch_iter:
        pending.append(pool.submit(_assemble, dataset, idx, it, cfg))
        if len(pending) > cfg.workers:
            yield pending.popleft().result()
    while pending:
        yield pending.popleft().result()


def train_loop(model: SegModel, dataset: Sequence[SegSample], cfg: TrainConfig,
               out_dir: Optional[Path] = None, log=None) -> TrainReport:
    """Run ``cfg.total_iters`` SGD steps; returns the loss curve and metadata.

    ``log`` is an optional callable receiving each JSON record. With
    ``cfg.workers > 1`` batches are assembled on a thread pool.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    model.train()
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    report = TrainReport()
    dtype = model.dtype
    t_start = time.perf_counter()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        batch_iter = enumerate(_batches(len(dataset), cfg))
        if pool is not None:
            batches = _prefetch(pool, dataset, batch_iter, cfg)
        else:
            batches = (_assemble(dataset, idx, it, cfg) for it, idx in batch_iter)
        for it, (images, labels) in enumerate(batches):
            t0 = time.perf_counter()
            lr = lr_at(it, cfg)
            model.zero_grad()
            with GradTape() as tape:
                logits = model(Tensor(images, dtype=dtype), seed=_seed(cfg.seed, it, 1))
                loss = ohem_ce(logits, labels, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericAbort(it, value)
            tape.backward(loss)
            opt.step(lr)
            report.losses.append(value)
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
                rec = {"iter": it, "lr": lr, "loss": value,
                       "wall_ms": (time.perf_counter() - t0) * 1000.0}
                report.records.append(rec)
                if log is not None:
                    log(rec)
            if out_dir is not None and cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
                path = out_dir / f"ckpt_{it + 1:06d}.bdgn"
                save_checkpoint(model, path)
                report.checkpoints.append(str(path))
    finally:
        if pool is not None:
            pool.shutdown(wait=False, cancel_futures=True)
    if out_dir is not None:
        path = out_dir / "final.bdgn"
        save_checkpoint(model, path)
        report.checkpoints.append(str(path))
    report.wall_s = time.perf_counter() - t_start
    model.eval()
    return report
