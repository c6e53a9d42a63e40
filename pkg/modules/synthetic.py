"""Deterministic fixture scenes: collinear, two-cluster and random-box layouts."""
import logging

import numpy as np

from . import config as cfg
from .cameras import Camera, CameraSet, look_at
from .field import FieldModel
from .gaussian import quat_normalize
from .ris import RayBatch
from .scene import AnchorSet, Scene, fit_normalization

logger = logging.getLogger(__name__)

LAYOUTS = ("collinear", "two-cluster", "random-box")
DEFAULT_FOV = 0.6911112070083618  # NeRF-synthetic camera_angle_x
CLUSTER_CENTERS = ((-3.0, 0.0, 0.0), (3.0, 0.0, 0.0))


def collinear_depths(count):
    """z = 2, 5, 9, 14, ... (gaps grow by one)."""
    depths = [2.0]
    for index in range(1, count):
        depths.append(depths[-1] + 2.0 + index)
    return np.array(depths[:count])


def _orbit_cameras(center, radius, views, fov):
    cameras = []
    for view in range(views):
        angle = 2.0 * np.pi * view / views
        eye = np.asarray(center) + radius * np.array([np.sin(angle), 0.3, np.cos(angle)])
        cameras.append(Camera(look_at(eye, center), fov, f"r_{view}"))
    return cameras


def generate_synthetic_scene(layout, count, seed=0, feature_init="random", opacity_logit=3.0, views=4,
                             fov=DEFAULT_FOV, **model_options):
    if count < 1:
        raise ValueError("anchor count must be at least 1")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {', '.join(LAYOUTS)}")
    rng = np.random.default_rng(seed)

    if layout == "collinear":
        means = np.zeros((count, 3))
        means[:, 2] = collinear_depths(count)
        scales = np.full((count, 3), 0.5)
        rotations = None
        c2w = np.diag([1.0, -1.0, -1.0, 1.0])  # at the origin, looking down +z
        cameras = [Camera(c2w, fov, "r_0")]
    elif layout == "two-cluster":
        sizes = [count - count // 2, count // 2]
        parts = []
        for center, size in zip(CLUSTER_CENTERS, sizes):
            direction = rng.normal(size=(size, 3))
            direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
            radius = 0.5 * rng.uniform(0.0, 1.0, size=(size, 1)) ** (1.0 / 3.0)
            parts.append(np.asarray(center) + direction * radius)
        means = np.concatenate(parts)
        scales = rng.uniform(0.02, 0.1, size=(count, 3))
        rotations = quat_normalize(rng.normal(size=(count, 4)))
        cameras = _orbit_cameras(np.zeros(3), 10.0, views, fov)
    else:
        means = rng.uniform(-1.0, 1.0, size=(count, 3))
        scales = rng.uniform(0.01, 0.05, size=(count, 3))
        rotations = quat_normalize(rng.normal(size=(count, 4)))
        cameras = _orbit_cameras(np.zeros(3), 4.0, views, fov)

    anchors = AnchorSet.create(means, rotations=rotations, scales=scales,
                               opacity_logits=np.full(count, float(opacity_logit)))
    model = FieldModel.initialize(seed=seed, with_hash_grid=feature_init == "hash", **model_options)
    scene = Scene(anchors, model, fit_normalization(means))
    if feature_init != "hash":
        anchors.features = rng.normal(0.0, 1.0, size=(count, anchors.feature_dim))
        scene.baked = True
    logger.debug("Generated %s scene with %s anchors (seed %s)", layout, count, seed)
    return scene, CameraSet(cameras)


def random_rays(scene, count, seed=0, radius_scale=2.0):
    """Rays from a sphere around the anchors aimed at random points inside their bounds."""
    rng = np.random.default_rng(seed)
    lo, hi = scene.anchors.bounds()
    center = 0.5 * (lo + hi)
    radius = radius_scale * max(float(np.linalg.norm(hi - lo)), 1.0)
    start = rng.normal(size=(count, 3))
    start = center + radius * start / np.maximum(np.linalg.norm(start, axis=1, keepdims=True), 1e-12)
    target = rng.uniform(lo, hi, size=(count, 3)) if np.any(hi > lo) else np.tile(center, (count, 1))
    directions = target - start
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return RayBatch(start, directions)
