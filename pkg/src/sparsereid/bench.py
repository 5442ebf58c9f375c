"""Inference throughput across keep ratios on the physically pruned path."""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import hts, vit
from .numerics import no_grad, precision

RATIOS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
CSV_HEADER = "p,batch,mean_imgs_per_s,std,stage_token_counts"


@dataclass
class BenchResult:
    keep_ratio: float
    batch_size: int
    mean: float  # images / second
    std: float
    token_counts: list = field(default_factory=list)
    warmup: int = 2
    reps: int = 5

    def csv_row(self) -> str:
        counts = "/".join(str(c) for c in self.token_counts)
        return f"{self.keep_ratio},{self.batch_size},{self.mean:.3f},{self.std:.3f},{counts}"


def bench_config(height: int = 256, width: int = 128, patch: int = 16, embed_dim: int = 64,
                 depth: int = 6, heads: int = 4, stage_layers=(2, 3, 5),
                 keep_ratio: float = 0.7) -> vit.ModelConfig:
    """Default benchmark model: 256x128 input, 16-pixel patches (128 tokens)."""
    sched = hts.SparsifySchedule(stage_layers, keep_ratio)
    return vit.ModelConfig(vit.PatchConfig(height, width, 3, patch), embed_dim, depth, heads,
                           4.0, 0, sched, bn_neck=False)


def bench_inputs(cfg: vit.ModelConfig, batch_size: int = 32, seed: int = 0) -> np.ndarray:
    p = cfg.patch
    rng = np.random.default_rng(seed)
    return rng.random((batch_size, p.channels, p.height, p.width), dtype=np.float32)


def measure_throughput(model, p: float, batch_size: int = 32, reps: int = 5, warmup: int = 2,
                       images=None, seed: int = 0) -> BenchResult:
    """Images per second of ``model`` at keep ratio ``p`` (single stream, f32).

    ``images`` defaults to a fixed random batch drawn from ``seed`` so every
    ratio sees the same input. Data generation is outside the timed region.
    """
    if reps < 5 or warmup < 2:
        raise ValueError(f"need reps >= 5 and warmup >= 2, got reps={reps}, warmup={warmup}")
    if model.cfg.sparsify is not None:
        model = model.with_ratio(p)
    elif p != 1.0:
        raise ValueError("an unsparsified model can only be measured at p = 1.0")
    if images is None:
        images = bench_inputs(model.cfg, batch_size, seed)
    images = np.asarray(images, dtype=np.float32)
    counts = []
    rates = []
    with no_grad(), precision("f32"):
        for i in range(warmup + reps):
            t0 = time.perf_counter()
            out = model.forward_features(images, "infer")
            elapsed = time.perf_counter() - t0
            if i >= warmup:
                rates.append(len(images) / elapsed)
            counts = list(out.token_counts)
    rates = np.array(rates)
    return BenchResult(p, len(images), float(rates.mean()), float(rates.std(ddof=1)), counts,
                       warmup, reps)


def sweep(model, ratios=RATIOS, batch_size: int = 32, reps: int = 5, warmup: int = 2,
          seed: int = 0) -> list:
    images = bench_inputs(model.cfg, batch_size, seed)
    return [measure_throughput(model, p, batch_size, reps, warmup, images) for p in ratios]


def append_csv(path, results) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write(CSV_HEADER + "\n")
        for r in results:
            fh.write(r.csv_row() + "\n")


def is_monotone(results, band: float = 0.05) -> bool:
    """Throughput never rises by more than ``band`` as p grows."""
    rs = sorted(results, key=lambda r: r.keep_ratio)
    return all(b.mean <= a.mean * (1.0 + band) for a, b in zip(rs, rs[1:]))


def speedup(results, low: float = 0.5, high: float = 1.0) -> float:
    by_p = {r.keep_ratio: r.mean for r in results}
    return by_p[low] / by_p[high]
