"""Batch-1 latency at a few resolutions, with the harness baseline.

Run: python demos/05_latency.py
"""

from bidganet.bench import BenchConfig, bench_model
from bidganet.model import NetworkConfig, build_model

model = build_model(NetworkConfig(version="light", num_classes=19))
cfg = BenchConfig(warmup_runs=1, timed_runs=5, resolutions=[[128, 256], [256, 512]])
for rep in bench_model(model, cfg):
    h, w = rep["resolution"]
    ga = rep["ga_stage"]["median_ms"]
    print(f"{h}x{w}: median {rep['median_ms']:.1f} ms, p95 {rep['p95_ms']:.1f} ms, "
          f"{rep['fps']:.2f} FPS, attention stage {ga:.1f} ms, "
          f"empty harness {rep['null_median_ms'] * 1000:.1f} us")
