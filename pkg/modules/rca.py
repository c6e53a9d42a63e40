"""Ray-coherent aggregation: a masked softmax over a sliding window of the
samples along each ray, standing in for a 3D nearest-neighbour lookup."""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import config as cfg
from .gaussian import gaussian_falloff

logger = logging.getLogger(__name__)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class RcaConfig:
    half_window: int = cfg.RCA_HALF_WINDOW
    tau_dist: Optional[float] = cfg.RCA_TAU_DIST or None
    logit_scale: float = cfg.RCA_LOGIT_SCALE

    def __post_init__(self):
        if int(self.half_window) < 0:
            raise ValueError("half_window must be >= 0")
        if self.tau_dist is not None and not self.tau_dist > 0.0:
            raise ValueError("tau_dist must be positive")
        self.half_window = int(self.half_window)

    @property
    def window(self):
        return 2 * self.half_window + 1

    def resolve(self, anchors):
        """Copy with tau_dist filled in from the anchor scales when unset."""
        if self.tau_dist is not None:
            return self
        return RcaConfig(self.half_window, default_tau_dist(anchors), self.logit_scale)


def default_tau_dist(anchors, multiplier=cfg.RCA_TAU_SCALE_MULT):
    if len(anchors) == 0:
        return 1.0
    return float(multiplier * np.mean(np.max(anchors.scales, axis=1)))


def check_tau_dist(tau_dist, anchors, lam):
    """Warn when a sample can fall outside tau_dist of its own anchor mean."""
    if len(anchors) == 0:
        return True
    limit = math.sqrt(lam) * float(np.max(anchors.scales))
    if tau_dist < limit:
        logger.warning("tau_dist %.6g is below sqrt(lambda) * max scale = %.6g; center samples may be masked",
                       tau_dist, limit)
        return False
    return True


def window_neighbors(k, group, half_window):
    """Indices {k-N..k+N} clipped to the group; `group` is a range or (start, stop)."""
    if isinstance(group, range):
        start, stop = group.start, group.stop
    elif isinstance(group, slice):
        start, stop = group.start, group.stop
    else:
        start, stop = group
    return list(range(max(start, k - half_window), min(stop, k + half_window + 1)))


class AggregatedSample(NamedTuple):
    ray_index: int
    t: float
    position: np.ndarray
    feature_hat: np.ndarray
    alpha_hat: float
    valid: bool


@dataclass
class Aggregation:
    """Batched aggregation result plus the window intermediates backward needs."""

    stream: object
    neighbors: np.ndarray       # (K, W) sample index of each window slot
    anchors: np.ndarray         # (K, W) anchor index of each window slot
    mask: np.ndarray            # (K, W) validity
    whitened: np.ndarray        # (K, W, 3) whitened x_k - mu_j
    diff: np.ndarray            # (K, W, 3) x_k - mu_j
    delta_sq: np.ndarray
    weights: np.ndarray
    falloff: np.ndarray
    opacity: np.ndarray
    alpha_raw: np.ndarray
    window_features: np.ndarray
    feature_hat: np.ndarray
    alpha_hat: np.ndarray
    valid: np.ndarray
    logit_scale: float

    def __len__(self):
        return int(self.alpha_hat.shape[0])

    def __iter__(self):
        for k in range(len(self)):
            yield self.sample(k)

    def sample(self, k):
        return AggregatedSample(int(self.stream.ray_index[k]), float(self.stream.t[k]), self.stream.position[k],
                                self.feature_hat[k], float(self.alpha_hat[k]), bool(self.valid[k]))


def rca_aggregate(stream, anchors, rca: RcaConfig = None, features=None, whitening=None) -> Aggregation:
    rca = (rca or RcaConfig()).resolve(anchors)
    features = anchors.features if features is None else features
    whitening = anchors.whitening() if whitening is None else whitening
    count = len(stream)
    half = rca.half_window

    k = np.arange(count)
    slot = stream.ray_slot
    starts = stream.offsets[slot]
    stops = stream.offsets[slot + 1]
    neighbors = k[:, None] + np.arange(-half, half + 1)[None, :]
    in_group = (neighbors >= starts[:, None]) & (neighbors < stops[:, None])
    neighbors = np.where(in_group, neighbors, k[:, None])

    anchor_ids = stream.anchor_index[neighbors]
    diff = stream.position[:, None, :] - anchors.means[anchor_ids]
    mask = in_group & (np.linalg.norm(diff, axis=-1) < rca.tau_dist)

    whitened = np.einsum("kwij,kwj->kwi", whitening[anchor_ids], diff)
    delta_sq = np.einsum("kwi,kwi->kw", whitened, whitened)
    logits = -rca.logit_scale * delta_sq

    valid = mask.any(axis=1)
    masked = np.where(mask, logits, -np.inf)
    peak = np.where(valid, masked.max(axis=1, initial=-np.inf), 0.0)
    expo = np.exp(np.where(mask, logits - peak[:, None], -np.inf))
    total = expo.sum(axis=1)
    weights = expo / np.where(valid, total, 1.0)[:, None]

    falloff = gaussian_falloff(delta_sq, rca.logit_scale)
    opacity = sigmoid(anchors.opacity_logits[anchor_ids])
    alpha_raw = falloff * opacity
    window_features = features[anchor_ids]
    feature_hat = np.einsum("kw,kwd->kd", weights, window_features)
    alpha_hat = np.clip(np.sum(weights * alpha_raw, axis=1), 0.0, 1.0)

    return Aggregation(
        stream=stream, neighbors=neighbors, anchors=anchor_ids, mask=mask, whitened=whitened, diff=diff,
        delta_sq=delta_sq, weights=weights, falloff=falloff, opacity=opacity, alpha_raw=alpha_raw,
        window_features=window_features, feature_hat=feature_hat, alpha_hat=alpha_hat, valid=valid,
        logit_scale=rca.logit_scale,
    )
