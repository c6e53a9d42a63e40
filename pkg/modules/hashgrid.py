"""Multi-resolution hash grid: per-level trilinear lookup into float32 tables."""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import config as cfg

logger = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)
# corner c has offset bit a = (c >> a) & 1 along axis a
CORNERS = np.array([[(c >> axis) & 1 for axis in range(3)] for c in range(8)], dtype=np.int64)


class GridCache(NamedTuple):
    indices: np.ndarray       # (L, P, 8) table rows
    weights: np.ndarray       # (L, P, 8)
    weight_grads: np.ndarray  # (L, P, 8, 3) d weight / d unit position
    inside: np.ndarray        # (P, 3) False where the input was clamped


@dataclass
class HashGrid:
    tables: np.ndarray
    levels: int = cfg.HASH_LEVELS
    features_per_level: int = cfg.HASH_FEATURES_PER_LEVEL
    log2_table_size: int = cfg.HASH_LOG2_TABLE_SIZE
    n_min: int = cfg.HASH_N_MIN
    n_max: int = cfg.HASH_N_MAX

    def __post_init__(self):
        self.tables = np.asarray(self.tables, dtype=np.float32)
        expected = (self.levels, self.table_size, self.features_per_level)
        if self.tables.shape != expected:
            raise ValueError(f"hash tables have shape {self.tables.shape}, expected {expected}")

    @classmethod
    def create(cls, seed=cfg.MODEL_SEED, levels=cfg.HASH_LEVELS, features_per_level=cfg.HASH_FEATURES_PER_LEVEL,
               log2_table_size=cfg.HASH_LOG2_TABLE_SIZE, n_min=cfg.HASH_N_MIN, n_max=cfg.HASH_N_MAX,
               init_range=cfg.HASH_INIT_RANGE):
        rng = np.random.default_rng(seed)
        shape = (levels, 1 << log2_table_size, features_per_level)
        tables = rng.uniform(-init_range, init_range, size=shape).astype(np.float32)
        return cls(tables, levels, features_per_level, log2_table_size, n_min, n_max)

    @property
    def table_size(self):
        return 1 << int(self.log2_table_size)

    @property
    def output_dim(self):
        return self.levels * self.features_per_level

    @property
    def growth(self):
        if self.levels <= 1:
            return 1.0
        return float(np.exp(np.log(self.n_max / self.n_min) / (self.levels - 1)))

    @property
    def resolutions(self):
        # the tiny offset keeps n_min * b^(L-1) from flooring below n_max
        scale = self.n_min * self.growth ** np.arange(self.levels)
        return np.floor(scale + 1e-6).astype(np.int64)

    def copy(self):
        return HashGrid(self.tables.copy(), self.levels, self.features_per_level, self.log2_table_size,
                        self.n_min, self.n_max)

    def corner_index(self, coords, resolution):
        """Table row of integer grid coordinates (..., 3) at one level."""
        coords = np.asarray(coords, dtype=np.int64)
        size = self.table_size
        if resolution ** 3 <= size:
            return coords[..., 0] + resolution * (coords[..., 1] + resolution * coords[..., 2])
        c = coords.astype(np.uint64)
        hashed = (c[..., 0] * np.uint64(PRIMES[0])) ^ (c[..., 1] * np.uint64(PRIMES[1])) ^ (c[..., 2] * np.uint64(PRIMES[2]))
        return (hashed & np.uint64(size - 1)).astype(np.int64)

    def encode(self, points, cache=False):
        """(P, 3) unit-cube positions -> (P, levels * features_per_level) features."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = (points >= 0.0) & (points <= 1.0)
        points = np.clip(points, 0.0, 1.0)
        count = points.shape[0]
        out = np.empty((count, self.output_dim))
        if cache:
            indices = np.empty((self.levels, count, 8), dtype=np.int64)
            weights = np.empty((self.levels, count, 8))
            weight_grads = np.empty((self.levels, count, 8, 3))

        for level, resolution in enumerate(self.resolutions):
            scaled = points * (resolution - 1)
            base = np.clip(np.floor(scaled), 0, resolution - 2).astype(np.int64)
            frac = scaled - base
            coords = base[:, None, :] + CORNERS[None, :, :]
            rows = self.corner_index(coords, int(resolution))
            factors = np.where(CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
            w = np.prod(factors, axis=-1)
            values = self.tables[level][rows].astype(np.float64)
            span = slice(level * self.features_per_level, (level + 1) * self.features_per_level)
            out[:, span] = np.einsum("pc,pcf->pf", w, values)
            if cache:
                indices[level] = rows
                weights[level] = w
                signs = np.where(CORNERS == 1, 1.0, -1.0)
                for axis in range(3):
                    others = [a for a in range(3) if a != axis]
                    weight_grads[level, :, :, axis] = (
                        signs[None, :, axis] * factors[:, :, others[0]] * factors[:, :, others[1]] * (resolution - 1)
                    )
        if cache:
            return out, GridCache(indices, weights, weight_grads, inside)
        return out

    def query(self, point):
        return self.encode(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]

    def backward_tables(self, grid_cache: GridCache, grad_out):
        """Gradient of a loss w.r.t. the tables given d loss / d encoded features."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        grad = np.zeros(self.tables.shape, dtype=np.float64)
        fpl = self.features_per_level
        for level in range(self.levels):
            g = grad_out[:, level * fpl:(level + 1) * fpl]
            contrib = grid_cache.weights[level][:, :, None] * g[:, None, :]
            np.add.at(grad[level], grid_cache.indices[level].reshape(-1), contrib.reshape(-1, fpl))
        return grad

    def backward_points(self, grid_cache: GridCache, grad_out):
        """Gradient w.r.t. the unit-cube input positions (zero on clamped axes)."""
        grad_out = np.asarray(grad_out, dtype=np.float64)
        fpl = self.features_per_level
        grad = np.zeros((grad_out.shape[0], 3))
        for level in range(self.levels):
            g = grad_out[:, level * fpl:(level + 1) * fpl]
            values = self.tables[level][grid_cache.indices[level]].astype(np.float64)
            dot = np.einsum("pcf,pf->pc", values, g)
            grad += np.einsum("pc,pca->pa", dot, grid_cache.weight_grads[level])
        return np.where(grid_cache.inside, grad, 0.0)


def hash_query(position, grid: HashGrid):
    """Feature vector of one unit-cube position."""
    return grid.query(position)
