"""Batch-1 latency measurement and the attention scaling probes.

Only forward computation is timed: inputs are synthesized up front, and a
null model run through the same harness shows how much of a reading is the
harness itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .attention import GuidedAttention, ga_forward, self_attention_naive
from .model import SegModel
from .nn import upsample_bilinear2
from .tensor import Tensor, concat_channels

DEFAULT_RESOLUTIONS = ((256, 512), (512, 1024), (1024, 2048))


@dataclass
class BenchConfig:
    warmup_runs: int = 3
    timed_runs: int = 20
    resolutions: list = field(default_factory=lambda: [list(r) for r in DEFAULT_RESOLUTIONS])
    seed: int = 0

    def __post_init__(self):
        if self.warmup_runs < 0 or self.timed_runs < 1:
            raise ValueError("warmup_runs must be >= 0 and timed_runs >= 1")
        self.resolutions = [list(r) for r in self.resolutions]
        for h, w in self.resolutions:
            if h < 32 or w < 32 or h % 32 or w % 32:
                raise ValueError(f"benchmark resolution {h}x{w} must be a positive multiple of 32")


def summarize(times_ms: Sequence[float]) -> dict:
    t = np.asarray(times_ms, dtype=np.float64)
    med = float(np.median(t))
    return {"mean_ms": float(t.mean()), "median_ms": med,
            "p95_ms": float(np.percentile(t, 95)),
            "fps": 1000.0 / med if med > 0 else float("inf"),
            "runs": int(t.size)}


def time_calls(fn: Callable[[], object], warmup_runs: int, timed_runs: int) -> list[float]:
    """Wall-clock milliseconds of ``timed_runs`` calls after discarding warmups."""
    for _ in range(warmup_runs):
        fn()
    out = []
    for _ in range(timed_runs):
        t0 = time.perf_counter()
        fn()
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def _input(h: int, w: int, dtype, seed: int) -> Tensor:
    rng = np.random.default_rng([seed, h, w])
    return Tensor(rng.standard_normal((1, 3, h, w)).astype(dtype))


def bench_model(model: SegModel, cfg: BenchConfig) -> list[dict]:
    """One report per resolution: total forward latency, GA-stage latency
    (dga mode only), and the null-model baseline."""
    model.eval()
    reports = []
    for h, w in cfg.resolutions:
        x = _input(h, w, model.dtype, cfg.seed)
        rep = {"resolution": [h, w]}
        rep.update(summarize(time_calls(lambda: model(x), cfg.warmup_runs, cfg.timed_runs)))
        null = summarize(time_calls(lambda: x, cfg.warmup_runs, cfg.timed_runs))
        rep["null_median_ms"] = null["median_ms"]
        if model.config.fusion_mode == "dga":
            rep["ga_stage"] = summarize(ga_stage_times(model, x, cfg))
        reports.append(rep)
    return reports


def ga_stage_times(model: SegModel, x: Tensor, cfg: BenchConfig) -> list[float]:
    """Time the two attention units of the fusion block on this input's
    real branch features (computed once, outside the timed region)."""
    f_h = model.high_res_forward(x)
    f_l = model.low_res_forward(x)
    fusion = model.fusion
    cat_hi = concat_channels([f_h, upsample_bilinear2(f_l)])
    cat_lo = concat_channels([fusion.down(f_h), f_l])

    def run():
        fusion.ga_hi.forward_map(cat_hi)
        fusion.ga_lo.forward_map(cat_lo)

    return time_calls(run, cfg.warmup_runs, cfg.timed_runs)


# scaling probes ----------------------------------------------------------------

def ga_scaling_ratio(n: int = 4096, factor: int = 4, s: int = 64, d: int = 64,
                     runs: int = 20, warmup: int = 2, seed: int = 0) -> dict:
    """Median ga_forward time at ``factor * n`` pixels over that at ``n``."""
    ga = GuidedAttention(d, d, s, dropout_rate=0.0, dtype=np.float32)
    rng = np.random.default_rng(seed)
    ga.m_k.data = (rng.standard_normal((s, d)) * 0.02).astype(np.float32)
    ga.m_v.data = (rng.standard_normal((s, d)) * 0.02).astype(np.float32)
    med = []
    for size in (n, factor * n):
        f = Tensor(rng.standard_normal((size, d)).astype(np.float32))
        med.append(np.median(time_calls(lambda: ga_forward(f, ga), warmup, runs)))
    return {"n": n, "factor": factor, "median_ms": [float(m) for m in med],
            "ratio": float(med[1] / med[0])}


def naive_scaling_ratio(n: int = 4096, factor: int = 4, d: int = 64, runs: int = 20,
                        warmup: int = 2, seed: int = 0,
                        block_rows: Optional[int] = 1024) -> dict:
    rng = np.random.default_rng(seed)
    med = []
    for size in (n, factor * n):
        f = rng.standard_normal((size, d)).astype(np.float32)
        med.append(np.median(time_calls(lambda: self_attention_naive(f, block_rows), warmup, runs)))
    return {"n": n, "factor": factor, "median_ms": [float(m) for m in med],
            "ratio": float(med[1] / med[0])}
