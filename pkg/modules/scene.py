import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import config as cfg
from .gaussian import IDENTITY_QUAT, NeuralAnchor, quat_normalize, whitening_matrices

logger = logging.getLogger(__name__)


@dataclass
class AnchorSet:
    """Struct-of-arrays storage for N neural anchors."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray
    confidences: np.ndarray
    deform_rotations: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        count = self.means.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(count, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(count, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(count)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(count, -1)
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(count)
        self.deform_rotations = np.asarray(self.deform_rotations, dtype=np.float64).reshape(count, 4)

    def __len__(self):
        return int(self.means.shape[0])

    @property
    def feature_dim(self):
        return int(self.features.shape[1])

    @classmethod
    def empty(cls, feature_dim=cfg.FEATURE_DIM):
        return cls(
            means=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            features=np.zeros((0, feature_dim)),
            confidences=np.zeros(0),
            deform_rotations=np.zeros((0, 4)),
        )

    @classmethod
    def create(cls, means, rotations=None, scales=None, opacity_logits=None, features=None,
               confidences=None, deform_rotations=None, feature_dim=cfg.FEATURE_DIM):
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        count = means.shape[0]
        identity = np.tile(np.array(IDENTITY_QUAT), (count, 1))
        return cls(
            means=means,
            rotations=quat_normalize(rotations) if rotations is not None else identity.copy(),
            scales=scales if scales is not None else np.full((count, 3), 0.1),
            opacity_logits=opacity_logits if opacity_logits is not None else np.zeros(count),
            features=features if features is not None else np.zeros((count, feature_dim)),
            confidences=confidences if confidences is not None else np.full(count, cfg.INITIAL_CONFIDENCE),
            deform_rotations=deform_rotations if deform_rotations is not None else identity.copy(),
        )

    @classmethod
    def from_anchors(cls, anchors):
        anchors = list(anchors)
        if not anchors:
            return cls.empty()
        return cls(
            means=np.stack([a.mean for a in anchors]),
            rotations=np.stack([a.rotation for a in anchors]),
            scales=np.stack([a.scale for a in anchors]),
            opacity_logits=np.array([a.opacity_logit for a in anchors], dtype=np.float64),
            features=np.stack([a.feature for a in anchors]),
            confidences=np.array([a.confidence for a in anchors], dtype=np.float64),
            deform_rotations=np.stack([a.deform_rotation for a in anchors]),
        )

    def anchor(self, index):
        return NeuralAnchor(
            mean=self.means[index].copy(),
            rotation=self.rotations[index].copy(),
            scale=self.scales[index].copy(),
            opacity_logit=float(self.opacity_logits[index]),
            feature=self.features[index].copy(),
            confidence=float(self.confidences[index]),
            deform_rotation=self.deform_rotations[index].copy(),
        )

    def __iter__(self):
        for index in range(len(self)):
            yield self.anchor(index)

    def subset(self, keep):
        return AnchorSet(
            means=self.means[keep],
            rotations=self.rotations[keep],
            scales=self.scales[keep],
            opacity_logits=self.opacity_logits[keep],
            features=self.features[keep],
            confidences=self.confidences[keep],
            deform_rotations=self.deform_rotations[keep],
        )

    def copy(self):
        return self.subset(np.arange(len(self)))

    def whitening(self):
        return whitening_matrices(self.rotations, self.scales)

    def bounds(self):
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        return self.means.min(axis=0), self.means.max(axis=0)


def fit_normalization(means, margin=cfg.SCENE_MARGIN):
    """3x4 affine mapping the anchors' bounding box into the unit cube with a margin."""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    transform = np.zeros((3, 4))
    if means.shape[0] == 0:
        transform[:, :3] = np.eye(3)
        return transform
    lo, hi = means.min(axis=0), means.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        extent = 1.0
    scale = 1.0 / (extent * (1.0 + 2.0 * margin))
    center = 0.5 * (lo + hi)
    transform[:, :3] = np.eye(3) * scale
    transform[:, 3] = 0.5 - scale * center
    return transform


@dataclass
class Scene:
    anchors: AnchorSet
    model: object
    normalization: np.ndarray = field(default_factory=lambda: fit_normalization(np.zeros((0, 3))))
    baked: bool = False
    edited: bool = False
    _bvh: Optional[object] = field(default=None, repr=False, compare=False)
    _bvh_lambda: Optional[float] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.normalization = np.asarray(self.normalization, dtype=np.float64).reshape(3, 4)

    @property
    def bvh_stale(self):
        return self._bvh is None

    def mark_stale(self):
        self._bvh = None
        self._bvh_lambda = None

    def bvh(self, lam):
        """BVH over the current anchors, rebuilt from scratch whenever stale."""
        from .bvh import build_bvh, build_proxy_bounds

        if len(self.anchors) == 0:
            return None
        if self._bvh is None or self._bvh_lambda != float(lam):
            self._bvh = build_bvh(build_proxy_bounds(self.anchors, lam))
            self._bvh_lambda = float(lam)
        return self._bvh

    def to_unit(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.normalization[:, :3].T + self.normalization[:, 3]

    def anchor_features(self, cache=False):
        """Per-anchor features: stored values when baked, hash-grid lookups otherwise."""
        if self.baked or getattr(self.model, "hash_grid", None) is None:
            return (self.anchors.features, None) if cache else self.anchors.features
        encoded, grid_cache = self.model.hash_grid.encode(self.to_unit(self.anchors.means), cache=True)
        return (encoded, grid_cache) if cache else encoded

    def copy(self):
        model = self.model.copy() if hasattr(self.model, "copy") else self.model
        return replace(self, anchors=self.anchors.copy(), model=model,
                       normalization=self.normalization.copy(), _bvh=None, _bvh_lambda=None)

    def remove_anchors(self, keep):
        self.anchors = self.anchors.subset(keep)
        self.mark_stale()
