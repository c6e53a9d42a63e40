"""Baseline samplers for the scalability benchmark: a stratified sampler that
tests every anchor at every sample, and an occupancy-grid marcher."""
import logging
from dataclasses import dataclass

import numpy as np

from . import config as cfg
from .bvh import build_proxy_bounds
from .field import FieldModel, trunc_exp

logger = logging.getLogger(__name__)

POINT_CHUNK = 256


@dataclass
class BaselineResult:
    counts: np.ndarray        # accepted samples per ray
    evaluated: int            # sample points examined
    queried: int = 0          # field evaluations at accepted samples

    @property
    def mean_samples_per_ray(self):
        return float(self.counts.mean()) if self.counts.size else 0.0


def _box_interval(origins, directions, lo, hi):
    safe = np.where(np.abs(directions) < 1e-30, 1e-30, directions)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    far = np.minimum(np.maximum(t0, t1).min(axis=1), np.inf)
    return near, far


def scene_box(anchors, lam):
    bounds = build_proxy_bounds(anchors, lam)
    return bounds.aabb_min.min(axis=0), bounds.aabb_max.max(axis=0)


def uniform_sample_batch(rays, anchors, lam=cfg.RIS_LAMBDA, samples_per_ray=cfg.BENCH_UNIFORM_SAMPLES, seed=0):
    """Stratified samples inside the scene box; a sample is kept when any anchor's
    lambda-ellipsoid contains it, found by testing all anchors."""
    rng = np.random.default_rng(seed)
    lo, hi = scene_box(anchors, lam)
    near, far = _box_interval(rays.origins, rays.directions, lo, hi)
    span = np.where(far > near, far - near, 0.0)
    jitter = rng.uniform(0.0, 1.0, size=(len(rays), samples_per_ray))
    t = near[:, None] + span[:, None] * (np.arange(samples_per_ray)[None, :] + jitter) / samples_per_ray
    points = (rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]).reshape(-1, 3)
    live = np.repeat(far > near, samples_per_ray)

    whitening = anchors.whitening()
    inside = np.zeros(points.shape[0], dtype=bool)
    for start in range(0, points.shape[0], POINT_CHUNK):
        chunk = points[start:start + POINT_CHUNK]
        offsets = chunk[:, None, :] - anchors.means[None, :, :]
        y = np.einsum("nij,pnj->pni", whitening, offsets)
        inside[start:start + POINT_CHUNK] = np.any(np.einsum("pni,pni->pn", y, y) <= lam, axis=1)
    counts = (inside & live).reshape(len(rays), samples_per_ray).sum(axis=1)
    return BaselineResult(counts, points.shape[0])


class OccupancyGrid:
    """res^3 occupancy bitmask over the scene box, 8 voxels per byte."""

    def __init__(self, anchors, lam=cfg.RIS_LAMBDA, resolution=cfg.BENCH_GRID_RESOLUTION):
        self.resolution = int(resolution)
        bounds = build_proxy_bounds(anchors, lam)
        self.lo = bounds.aabb_min.min(axis=0)
        self.hi = bounds.aabb_max.max(axis=0)
        self.voxel = (self.hi - self.lo) / self.resolution
        occupied = np.zeros((self.resolution,) * 3, dtype=bool)
        first = self._cell(bounds.aabb_min)
        last = self._cell(bounds.aabb_max)
        for (i0, j0, k0), (i1, j1, k1) in zip(first, last):
            occupied[i0:i1 + 1, j0:j1 + 1, k0:k1 + 1] = True
        self.bits = np.packbits(occupied.reshape(-1))
        self.occupied_voxels = int(occupied.sum())

    @property
    def memory_bytes(self):
        return int(self.bits.nbytes)

    def _cell(self, points):
        cell = np.floor((points - self.lo) / np.where(self.voxel > 0.0, self.voxel, 1.0)).astype(np.int64)
        return np.clip(cell, 0, self.resolution - 1)

    def occupied(self, points):
        cell = self._cell(points)
        flat = (cell[:, 0] * self.resolution + cell[:, 1]) * self.resolution + cell[:, 2]
        return ((self.bits[flat >> 3] >> (7 - (flat & 7))) & 1).astype(bool)


class DensityField:
    """Hash-grid density the grid marcher queries at each occupied sample."""

    def __init__(self, scene, model: FieldModel):
        if model is None or model.hash_grid is None:
            raise ValueError("density field needs a model with a hash grid")
        self.scene = scene
        self.model = model

    @classmethod
    def for_scene(cls, scene, log2_table_size=cfg.BENCH_FIELD_LOG2_TABLE_SIZE, seed=cfg.MODEL_SEED):
        model = scene.model
        if model is None or model.hash_grid is None:
            hidden = model.geometry.layers[0].weight.shape[1] if model is not None else cfg.MLP_HIDDEN
            model = FieldModel.initialize(seed=seed, hidden=hidden, log2_table_size=log2_table_size)
            logger.info("Grid baseline uses a fresh 2^%s hash grid", log2_table_size)
        return cls(scene, model)

    def density(self, points):
        latent = self.model.geometry.forward(self.model.hash_grid.encode(self.scene.to_unit(points)))
        return trunc_exp(latent[:, 0] + self.model.density_bias, self.model.exp_clamp)


def grid_sample_batch(rays, grid: OccupancyGrid, field: DensityField = None, step=None):
    """Fixed-step march through the grid box, keeping samples in occupied voxels
    and querying the density field there when one is given."""
    if step is None:
        positive = grid.voxel[grid.voxel > 0.0]
        step = 0.5 * float(positive.min()) if positive.size else 1.0
    near, far = _box_interval(rays.origins, rays.directions, grid.lo, grid.hi)
    span = np.where(far > near, far - near, 0.0)
    max_steps = int(np.ceil(span.max() / step)) if span.size else 0
    counts = np.zeros(len(rays), dtype=np.int64)
    evaluated = queried = 0
    for start in range(0, len(rays), POINT_CHUNK):
        stop = min(len(rays), start + POINT_CHUNK)
        t = near[start:stop, None] + step * (np.arange(max_steps)[None, :] + 0.5)
        live = t < far[start:stop, None]
        points = rays.origins[start:stop, None, :] + t[..., None] * rays.directions[start:stop, None, :]
        hits = grid.occupied(points.reshape(-1, 3)).reshape(live.shape) & live
        counts[start:stop] = hits.sum(axis=1)
        evaluated += int(live.sum())
        if field is not None and hits.any():
            queried += len(field.density(points[hits]))
    return BaselineResult(counts, evaluated, queried)
