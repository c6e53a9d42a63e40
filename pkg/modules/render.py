"""End-to-end ray rendering: sample -> aggregate -> decode -> composite."""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import config as cfg
from .field import composite_batch, decode_batch
from .rca import RcaConfig, check_tau_dist, rca_aggregate
from .ris import SamplerConfig, ris_sample_batch

logger = logging.getLogger(__name__)

BACKGROUNDS = {"white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0)}
RENDER_CHUNK = 16384


@dataclass
class RenderConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rca: RcaConfig = field(default_factory=RcaConfig)
    background: tuple = BACKGROUNDS["white"]
    threads: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.background, str):
            if self.background not in BACKGROUNDS:
                raise ValueError(f"unknown background {self.background!r}")
            self.background = BACKGROUNDS[self.background]
        self.background = tuple(float(v) for v in self.background)

    def resolved(self, anchors):
        """Copy with tau_dist fixed for this anchor set; warns when it is too small."""
        rca = self.rca.resolve(anchors)
        check_tau_dist(rca.tau_dist, anchors, self.sampler.lam)
        return RenderConfig(self.sampler, rca, self.background, self.threads)


def render_rays(scene, rays, render_cfg: RenderConfig = None):
    """(R, 3) RGB for a RayBatch; an empty scene gives pure background."""
    render_cfg = render_cfg or RenderConfig()
    background = np.asarray(render_cfg.background, dtype=np.float64)
    if len(rays) == 0:
        return np.zeros((0, 3))
    anchors = scene.anchors
    if len(anchors) == 0:
        return np.tile(background, (len(rays), 1))

    bvh = scene.bvh(render_cfg.sampler.lam)
    rca = render_cfg.rca.resolve(anchors)
    features = scene.anchor_features()
    whitening = anchors.whitening()
    out = np.empty((len(rays), 3))
    for start in range(0, len(rays), RENDER_CHUNK):
        chunk = rays.take(slice(start, start + RENDER_CHUNK))
        stream = ris_sample_batch(chunk, bvh, anchors, render_cfg.sampler, render_cfg.threads)
        agg = rca_aggregate(stream, anchors, rca, features, whitening)
        decoded = decode_batch(agg.feature_hat, agg.alpha_hat, chunk.directions[stream.ray_slot],
                               anchors.deform_rotations[stream.anchor_index], scene.model)
        out[start:start + len(chunk)] = composite_batch(decoded.sigma_eff, decoded.alpha, decoded.color,
                                                        stream.offsets, background).rgb
    return out


def render_image(scene, camera, width, height, render_cfg: RenderConfig = None):
    """(H, W, 3) float image in [0, 1]."""
    rays = camera.generate_rays(width, height)
    return render_rays(scene, rays, render_cfg).reshape(height, width, 3)
