"""Flat-array BVH over per-anchor proxy boxes, with packet traversal that
returns candidate (ray, anchor) pairs for the exact ellipsoid test."""
import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptySceneError
from .gaussian import covariance_diagonal

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
BOX_PAD = 1e-9
_TINY_DIR = 1e-30


@dataclass
class ProxyBounds:
    anchor_index: np.ndarray
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __len__(self):
        return int(self.anchor_index.shape[0])

    def __getitem__(self, item):
        return int(self.anchor_index[item]), self.aabb_min[item], self.aabb_max[item]


def build_proxy_bounds(anchors, lam, min_confidence=None):
    """Tight boxes around each anchor's lambda-ellipsoid: half-width sqrt(lam * Sigma_kk)."""
    keep = np.arange(len(anchors))
    if min_confidence is not None:
        keep = keep[anchors.confidences >= float(min_confidence)]
    half = np.sqrt(float(lam) * covariance_diagonal(anchors.rotations[keep], anchors.scales[keep]))
    means = anchors.means[keep]
    return ProxyBounds(anchor_index=keep.astype(np.int64), aabb_min=means - half, aabb_max=means + half)


@dataclass
class Bvh:
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    items: np.ndarray

    @property
    def node_count(self):
        return int(self.node_min.shape[0])

    def is_leaf(self, node):
        return self.left[node] < 0

    def leaf_anchors(self, node):
        start = self.first[node]
        return self.items[start:start + self.count[node]]

    def depth(self):
        deepest = 0
        stack = [(0, 0)]
        while stack:
            node, level = stack.pop()
            deepest = max(deepest, level)
            if not self.is_leaf(node):
                stack.append((int(self.left[node]), level + 1))
                stack.append((int(self.right[node]), level + 1))
        return deepest


def build_bvh(bounds: ProxyBounds, leaf_size=LEAF_SIZE) -> Bvh:
    if len(bounds) == 0:
        raise EmptySceneError()
    centroids = 0.5 * (bounds.aabb_min + bounds.aabb_max)
    order = np.arange(len(bounds))

    node_min, node_max, left, right, first, count = [], [], [], [], [], []

    def new_node(start, end):
        members = order[start:end]
        lo = bounds.aabb_min[members].min(axis=0)
        hi = bounds.aabb_max[members].max(axis=0)
        pad = BOX_PAD * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        node_min.append(lo - pad)
        node_max.append(hi + pad)
        left.append(-1)
        right.append(-1)
        first.append(start)
        count.append(end - start)
        return len(node_min) - 1

    root = new_node(0, len(bounds))
    stack = [(root, 0, len(bounds))]
    while stack:
        node, start, end = stack.pop()
        if end - start <= leaf_size:
            continue
        members = order[start:end]
        axis = int(np.argmax(node_max[node] - node_min[node]))
        order[start:end] = members[np.argsort(centroids[members, axis], kind="stable")]
        mid = (start + end) // 2
        left_node = new_node(start, mid)
        right_node = new_node(mid, end)
        left[node], right[node] = left_node, right_node
        count[node] = 0
        stack.append((right_node, mid, end))
        stack.append((left_node, start, mid))

    bvh = Bvh(
        node_min=np.asarray(node_min),
        node_max=np.asarray(node_max),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        first=np.asarray(first, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        items=bounds.anchor_index[order].astype(np.int64),
    )
    logger.debug("BVH built: %s anchors, %s nodes", len(bounds), bvh.node_count)
    return bvh


def _slab_hits(bvh, node, origins, inv_dirs, t_min, t_max):
    t0 = (bvh.node_min[node] - origins) * inv_dirs
    t1 = (bvh.node_max[node] - origins) * inv_dirs
    near = np.maximum(np.minimum(t0, t1).max(axis=1), t_min)
    far = np.minimum(np.maximum(t0, t1).min(axis=1), t_max)
    return near <= far


def candidate_pairs(bvh: Bvh, origins, directions, t_min, t_max):
    """Packet traversal: every (ray row, anchor) whose leaf box the ray segment touches.

    Pairs come out grouped per leaf in depth-first, left-first order.
    """
    safe = np.where(np.abs(directions) < _TINY_DIR, np.where(directions < 0.0, -_TINY_DIR, _TINY_DIR), directions)
    inv_dirs = 1.0 / safe
    ray_parts, anchor_parts = [], []
    stack = [(0, np.arange(origins.shape[0]))]
    while stack:
        node, rows = stack.pop()
        hit = _slab_hits(bvh, node, origins[rows], inv_dirs[rows], t_min[rows], t_max[rows])
        rows = rows[hit]
        if rows.size == 0:
            continue
        if bvh.is_leaf(node):
            leaf = bvh.leaf_anchors(node)
            ray_parts.append(np.repeat(rows, leaf.size))
            anchor_parts.append(np.tile(leaf, rows.size))
        else:
            stack.append((int(bvh.right[node]), rows))
            stack.append((int(bvh.left[node]), rows))
    if not ray_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(ray_parts), np.concatenate(anchor_parts)
