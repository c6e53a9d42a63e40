"""Sampler scalability benchmark: rays/second per (sampler, batch size)."""
import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import config as cfg
from .ris import SamplerConfig, ris_sample_batch
from .samplers import DensityField, OccupancyGrid, grid_sample_batch, uniform_sample_batch
from .synthetic import random_rays

logger = logging.getLogger(__name__)

HEADER = [
    "sampler",
    "batch_size",
    "rays_per_second",
    "mean_samples_per_ray",
    "wall_ms",
    "per_ray_latency_us",
    "memory_bytes",
]
SAMPLERS = ("ris", "uniform", "grid")
DEFAULT_BATCHES = tuple(2 ** power for power in range(6, 17))


@dataclass
class BenchRow:
    sampler: str
    batch_size: int
    rays_per_second: float
    mean_samples_per_ray: float
    wall_ms: float
    per_ray_latency_us: float
    memory_bytes: int

    def as_csv(self):
        return [self.sampler, self.batch_size, f"{self.rays_per_second:.3f}", f"{self.mean_samples_per_ray:.4f}",
                f"{self.wall_ms:.3f}", f"{self.per_ray_latency_us:.4f}", self.memory_bytes]


def parse_batches(text):
    """'2^6..2^16', '64,256,1024' or '64..1024' (powers of two between)."""
    text = text.strip()
    if ".." in text:
        lo_text, hi_text = text.split("..", 1)
        lo, hi = _parse_size(lo_text), _parse_size(hi_text)
        sizes = []
        size = lo
        while size <= hi:
            sizes.append(size)
            size *= 2
        return sizes
    return [_parse_size(part) for part in text.split(",") if part.strip()]


def _parse_size(text):
    text = text.strip()
    if "^" in text:
        base, power = text.split("^", 1)
        return int(base) ** int(power)
    return int(text)


def _timed(fn, repeats):
    best = None
    result = None
    for _ in range(max(1, repeats)):
        started = time.perf_counter()
        result = fn()
        elapsed = time.perf_counter() - started
        best = elapsed if best is None else min(best, elapsed)
    return best, result


def run_benchmark(scene, batches=DEFAULT_BATCHES, samplers=SAMPLERS, repeats=cfg.BENCH_REPEATS, threads=None,
                  baseline_max_batch=cfg.BENCH_BASELINE_MAX_BATCH, sampler_cfg: SamplerConfig = None, seed=0,
                  field: DensityField = None):
    sampler_cfg = sampler_cfg or SamplerConfig()
    anchors = scene.anchors
    bvh = scene.bvh(sampler_cfg.lam)
    bvh_bytes = sum(int(arr.nbytes) for arr in (bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.first,
                                                  bvh.count, bvh.items)) if bvh is not None else 0
    grid = OccupancyGrid(anchors, sampler_cfg.lam) if "grid" in samplers and len(anchors) else None
    if grid is not None and field is None:
        field = DensityField.for_scene(scene)
    rows = []
    for batch in batches:
        rays = random_rays(scene, batch, seed=seed)
        for name in samplers:
            if name != "ris" and batch > baseline_max_batch:
                continue
            if name == "ris":
                wall, stream = _timed(lambda: ris_sample_batch(rays, bvh, anchors, sampler_cfg, threads), repeats)
                mean_samples = len(stream) / batch
                memory = bvh_bytes
            elif name == "uniform":
                wall, result = _timed(lambda: uniform_sample_batch(rays, anchors, sampler_cfg.lam), repeats)
                mean_samples = result.mean_samples_per_ray
                memory = 0
            elif name == "grid":
                if grid is None:
                    continue
                wall, result = _timed(lambda: grid_sample_batch(rays, grid, field), repeats)
                mean_samples = result.mean_samples_per_ray
                memory = grid.memory_bytes
            else:
                raise ValueError(f"unknown sampler {name!r}")
            wall = max(wall, 1e-9)
            row = BenchRow(name, batch, batch / wall, mean_samples, wall * 1e3, wall / batch * 1e6, memory)
            logger.info("%s batch=%s rays/s=%.1f samples/ray=%.2f", name, batch, row.rays_per_second,
                        row.mean_samples_per_ray)
            rows.append(row)
    return rows


def write_bench_csv(rows, handle):
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(HEADER)
    for row in rows:
        writer.writerow(row.as_csv())
