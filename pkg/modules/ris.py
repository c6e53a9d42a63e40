"""Ray Intersection Selector: per-ray, t-sorted maximum-response samples.

Candidates come from the BVH, survive an exact ellipsoid test and are emitted
through a bounded hit buffer that is flushed nearest-first until the ray's
quota is met.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import config as cfg
from .bvh import candidate_pairs
from .errors import InvalidRayError
from .gaussian import Ray, ellipsoid_hits_many

logger = logging.getLogger(__name__)

RAY_CHUNK = 1024


@dataclass
class SamplerConfig:
    lam: float = cfg.RIS_LAMBDA
    quota: int = cfg.RIS_QUOTA
    hit_buffer_capacity: int = cfg.HIT_BUFFER_CAPACITY

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError("sampler lambda must be positive")
        if int(self.quota) < 1:
            raise ValueError("sampler quota must be at least 1")
        if int(self.hit_buffer_capacity) < 2:
            raise ValueError("hit buffer capacity must be at least 2")
        self.quota = int(self.quota)
        self.hit_buffer_capacity = int(self.hit_buffer_capacity)

    @classmethod
    def unbounded(cls, **overrides):
        values = {"lam": cfg.RIS_LAMBDA_UNBOUNDED, "quota": cfg.RIS_QUOTA_UNBOUNDED}
        values.update(overrides)
        return cls(**values)


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    ray_index: np.ndarray = None
    t_min: np.ndarray = None
    t_max: np.ndarray = None

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        count = self.origins.shape[0]
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(count, 3)
        if self.ray_index is None:
            self.ray_index = np.arange(count)
        if self.t_min is None:
            self.t_min = np.zeros(count)
        if self.t_max is None:
            self.t_max = np.full(count, math.inf)
        self.ray_index = np.asarray(self.ray_index, dtype=np.int64).reshape(count)
        self.t_min = np.broadcast_to(np.asarray(self.t_min, dtype=np.float64), (count,)).copy()
        self.t_max = np.broadcast_to(np.asarray(self.t_max, dtype=np.float64), (count,)).copy()
        if count:
            norms = np.linalg.norm(self.directions, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise InvalidRayError("ray direction must be unit length")
            if np.any(self.t_min < 0.0) or np.any(~(self.t_max > self.t_min)):
                raise InvalidRayError("invalid ray interval")

    def __len__(self):
        return int(self.origins.shape[0])

    @classmethod
    def from_rays(cls, rays):
        rays = list(rays)
        if not rays:
            return cls(np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            origins=np.stack([r.origin for r in rays]),
            directions=np.stack([r.direction for r in rays]),
            ray_index=np.array([r.ray_index for r in rays], dtype=np.int64),
            t_min=np.array([r.t_min for r in rays], dtype=np.float64),
            t_max=np.array([r.t_max for r in rays], dtype=np.float64),
        )

    def take(self, rows):
        return RayBatch(self.origins[rows], self.directions[rows], self.ray_index[rows],
                        self.t_min[rows], self.t_max[rows])

    def ray(self, row):
        return Ray(self.origins[row], self.directions[row], int(self.ray_index[row]),
                   float(self.t_min[row]), float(self.t_max[row]))


class IntersectionSample(NamedTuple):
    ray_index: int
    anchor_index: int
    t: float
    position: np.ndarray


@dataclass
class SampleStream:
    """Flat per-sample arrays; samples of batch row r live in offsets[r]:offsets[r+1]."""

    ray_index: np.ndarray
    anchor_index: np.ndarray
    t: np.ndarray
    position: np.ndarray
    offsets: np.ndarray

    def __len__(self):
        return int(self.t.shape[0])

    @property
    def num_rays(self):
        return int(self.offsets.shape[0]) - 1

    @property
    def counts(self):
        return np.diff(self.offsets)

    @property
    def ray_slot(self):
        return np.repeat(np.arange(self.num_rays), self.counts)

    @classmethod
    def empty(cls, num_rays):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(num_rays + 1, dtype=np.int64))

    def slice_rays(self, start, stop):
        """Sub-stream for batch rows [start, stop) with offsets rebased to zero."""
        lo, hi = int(self.offsets[start]), int(self.offsets[stop])
        return SampleStream(self.ray_index[lo:hi], self.anchor_index[lo:hi], self.t[lo:hi],
                            self.position[lo:hi], self.offsets[start:stop + 1] - lo)

    def group(self, row):
        return slice(int(self.offsets[row]), int(self.offsets[row + 1]))

    def samples(self, row):
        span = self.group(row)
        return [IntersectionSample(int(r), int(a), float(t), p) for r, a, t, p in zip(
            self.ray_index[span], self.anchor_index[span], self.t[span], self.position[span])]

    def __iter__(self):
        for k in range(len(self)):
            yield IntersectionSample(int(self.ray_index[k]), int(self.anchor_index[k]),
                                     float(self.t[k]), self.position[k])

    def selected_anchors(self):
        return np.unique(self.anchor_index)


class HitBuffer:
    """Bounded buffer keeping the nearest (t, anchor) keys in ascending order."""

    def __init__(self, capacity=cfg.HIT_BUFFER_CAPACITY):
        self.capacity = int(capacity)
        self.t = np.zeros(0)
        self.anchor = np.zeros(0, dtype=np.int64)
        self.offered = 0

    def __len__(self):
        return int(self.t.shape[0])

    @property
    def full(self):
        return len(self) >= self.capacity

    @property
    def overflowed(self):
        return self.offered > self.capacity

    def offer(self, t, anchor):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        anchor = np.atleast_1d(np.asarray(anchor, dtype=np.int64))
        self.offered += int(t.shape[0])
        merged_t = np.concatenate([self.t, t])
        merged_a = np.concatenate([self.anchor, anchor])
        order = np.lexsort((merged_a, merged_t))[:self.capacity]
        self.t = merged_t[order]
        self.anchor = merged_a[order]

    def flush(self, count):
        count = min(int(count), len(self))
        out_t, out_a = self.t[:count], self.anchor[:count]
        self.t, self.anchor = self.t[count:], self.anchor[count:]
        return out_t, out_a


def drain_hits(t, anchor, quota, capacity):
    """Emit hits nearest-first through a bounded buffer, re-scanning past the last flushed key."""
    out_t, out_a = [], []
    emitted = 0
    resume = None
    while emitted < quota:
        if resume is None:
            pending = np.ones(t.shape[0], dtype=bool)
        else:
            pending = (t > resume[0]) | ((t == resume[0]) & (anchor > resume[1]))
        buffer = HitBuffer(capacity)
        buffer.offer(t[pending], anchor[pending])
        if len(buffer) == 0:
            break
        flush = max(1, capacity // 2) if buffer.overflowed else len(buffer)
        part_t, part_a = buffer.flush(min(flush, quota - emitted))
        out_t.append(part_t)
        out_a.append(part_a)
        emitted += part_t.shape[0]
        if not buffer.overflowed:
            break
        resume = (part_t[-1], part_a[-1])
    if not out_t:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(out_t), np.concatenate(out_a)


def _sample_chunk(rays, start, stop, bvh, anchors, whitening, sampler):
    chunk = rays.take(slice(start, stop))
    rows, anchor_ids = candidate_pairs(bvh, chunk.origins, chunk.directions, chunk.t_min, chunk.t_max)
    if rows.size:
        hit, t_hit = ellipsoid_hits_many(
            chunk.origins[rows], chunk.directions[rows], chunk.t_min[rows], chunk.t_max[rows],
            anchors.means[anchor_ids], whitening[anchor_ids], sampler.lam,
        )
        rows, anchor_ids, t_hit = rows[hit], anchor_ids[hit], t_hit[hit]
    else:
        t_hit = np.zeros(0)

    counts = np.bincount(rows, minlength=len(chunk))
    light = counts[rows] <= sampler.hit_buffer_capacity

    # rays whose hits fit in one buffer flush everything sorted; do those in one pass
    l_rows, l_anchor, l_t = rows[light], anchor_ids[light], t_hit[light]
    order = np.lexsort((l_anchor, l_t, l_rows))
    l_rows, l_anchor, l_t = l_rows[order], l_anchor[order], l_t[order]
    starts = np.concatenate([[0], np.cumsum(np.bincount(l_rows, minlength=len(chunk)))])[:-1]
    rank = np.arange(l_rows.shape[0]) - starts[l_rows]
    keep = rank < sampler.quota
    parts_rows, parts_anchor, parts_t, parts_rank = [l_rows[keep]], [l_anchor[keep]], [l_t[keep]], [rank[keep]]

    heavy = ~light
    if np.any(heavy):
        h_rows, h_anchor, h_t = rows[heavy], anchor_ids[heavy], t_hit[heavy]
        order = np.argsort(h_rows, kind="stable")
        h_rows, h_anchor, h_t = h_rows[order], h_anchor[order], h_t[order]
        bounds = np.flatnonzero(np.diff(h_rows)) + 1
        for g_rows, g_anchor, g_t in zip(np.split(h_rows, bounds), np.split(h_anchor, bounds), np.split(h_t, bounds)):
            d_t, d_anchor = drain_hits(g_t, g_anchor, sampler.quota, sampler.hit_buffer_capacity)
            parts_rows.append(np.full(d_t.shape[0], g_rows[0], dtype=np.int64))
            parts_anchor.append(d_anchor)
            parts_t.append(d_t)
            parts_rank.append(np.arange(d_t.shape[0]))

    out_rows = np.concatenate(parts_rows)
    out_rank = np.concatenate(parts_rank)
    order = np.lexsort((out_rank, out_rows))
    out_rows = out_rows[order]
    out_anchor = np.concatenate(parts_anchor)[order]
    out_t = np.concatenate(parts_t)[order]
    return out_rows + start, out_anchor, out_t


def ris_sample_batch(rays: RayBatch, bvh, anchors, sampler: SamplerConfig = None, threads=None) -> SampleStream:
    sampler = sampler or SamplerConfig()
    count = len(rays)
    if count == 0 or bvh is None or len(anchors) == 0:
        return SampleStream.empty(count)
    threads = max(1, int(threads or cfg.THREADS))
    whitening = anchors.whitening()

    chunk = min(RAY_CHUNK, max(1, math.ceil(count / threads)))
    spans = [(start, min(count, start + chunk)) for start in range(0, count, chunk)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda span: _sample_chunk(rays, span[0], span[1], bvh, anchors, whitening, sampler), spans))
    else:
        results = [_sample_chunk(rays, start, stop, bvh, anchors, whitening, sampler) for start, stop in spans]

    slots = np.concatenate([r[0] for r in results])
    anchor_index = np.concatenate([r[1] for r in results]).astype(np.int64)
    t = np.concatenate([r[2] for r in results])
    offsets = np.concatenate([[0], np.cumsum(np.bincount(slots, minlength=count))]).astype(np.int64)
    position = rays.origins[slots] + t[:, None] * rays.directions[slots]
    return SampleStream(rays.ray_index[slots], anchor_index, t, position, offsets)


def ris_sample(ray: Ray, bvh, anchors, sampler: SamplerConfig = None):
    """Samples of a single ray as a list of IntersectionSample."""
    stream = ris_sample_batch(RayBatch.from_rays([ray]), bvh, anchors, sampler, threads=1)
    return stream.samples(0)
