"""Gaussian anchor math: frames, Mahalanobis distances and the closed-form
ray/Gaussian maximum-response point."""
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import config as cfg
from .errors import DegenerateRayError, InvalidRayError

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.where(norm > 0.0, norm, 1.0)


def quat_to_rotmat(q):
    """(..., 4) quaternions (w, x, y, z) -> (..., 3, 3) rotation matrices."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[..., 0, 1] = 2.0 * (x * y - w * z)
    rot[..., 0, 2] = 2.0 * (x * z + w * y)
    rot[..., 1, 0] = 2.0 * (x * y + w * z)
    rot[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[..., 1, 2] = 2.0 * (y * z - w * x)
    rot[..., 2, 0] = 2.0 * (x * z - w * y)
    rot[..., 2, 1] = 2.0 * (y * z + w * x)
    rot[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


def rotmat_grad_to_quat(q, grad_rot):
    """Backpropagate dL/dR through quat_to_rotmat, including the normalisation."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = grad_rot
    gw = 2.0 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
                - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2.0 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2.0 * x * g[..., 1, 1]
                - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2.0 * x * g[..., 2, 2])
    gy = 2.0 * (-2.0 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
                + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2.0 * y * g[..., 2, 2])
    gz = 2.0 * (-2.0 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
                - 2.0 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    grad_qn = np.stack([gw, gx, gy, gz], axis=-1)
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    radial = np.sum(grad_qn * qn, axis=-1, keepdims=True)
    return (grad_qn - radial * qn) / norm


def quat_multiply(a, b):
    """Hamilton product a*b; the rotation of b is applied first."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def rotmat_to_quat(rot):
    rot = np.asarray(rot, dtype=np.float64)
    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    if trace > 0.0:
        s = 2.0 * math.sqrt(trace + 1.0)
        q = [0.25 * s, (rot[2, 1] - rot[1, 2]) / s, (rot[0, 2] - rot[2, 0]) / s, (rot[1, 0] - rot[0, 1]) / s]
    elif rot[0, 0] > rot[1, 1] and rot[0, 0] > rot[2, 2]:
        s = 2.0 * math.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2])
        q = [(rot[2, 1] - rot[1, 2]) / s, 0.25 * s, (rot[0, 1] + rot[1, 0]) / s, (rot[0, 2] + rot[2, 0]) / s]
    elif rot[1, 1] > rot[2, 2]:
        s = 2.0 * math.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2])
        q = [(rot[0, 2] - rot[2, 0]) / s, (rot[0, 1] + rot[1, 0]) / s, 0.25 * s, (rot[1, 2] + rot[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1])
        q = [(rot[1, 0] - rot[0, 1]) / s, (rot[0, 2] + rot[2, 0]) / s, (rot[1, 2] + rot[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0.0 else -q


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * float(angle)
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def whitening_matrices(rotations, scales):
    """S^-1 R^T per anchor: maps world offsets into the unit-Gaussian frame."""
    rot = quat_to_rotmat(rotations)
    scales = np.asarray(scales, dtype=np.float64)
    return np.swapaxes(rot, -1, -2) / scales[..., :, None]


def covariance(rotations, scales):
    rot = quat_to_rotmat(rotations)
    scales = np.asarray(scales, dtype=np.float64)
    return (rot * (scales * scales)[..., None, :]) @ np.swapaxes(rot, -1, -2)


def covariance_diagonal(rotations, scales):
    rot = quat_to_rotmat(rotations)
    scales = np.asarray(scales, dtype=np.float64)
    return np.sum(rot * rot * (scales * scales)[..., None, :], axis=-1)


@dataclass
class NeuralAnchor:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity_logit: float = 0.0
    feature: np.ndarray = field(default_factory=lambda: np.zeros(cfg.FEATURE_DIM))
    confidence: float = cfg.INITIAL_CONFIDENCE
    deform_rotation: np.ndarray = field(default_factory=lambda: np.array(IDENTITY_QUAT))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.deform_rotation = np.asarray(self.deform_rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("anchor rotation must be a unit quaternion")
        if np.any(self.scale <= 0.0):
            raise ValueError("anchor scale components must be positive")
        if not 0.0 <= float(self.confidence) <= 1.0:
            raise ValueError("anchor confidence must lie in [0, 1]")

    @property
    def rotation_matrix(self):
        return quat_to_rotmat(self.rotation)

    @property
    def whitening(self):
        return whitening_matrices(self.rotation, self.scale)

    @property
    def covariance(self):
        return covariance(self.rotation, self.scale)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    ray_index: int = 0
    t_min: float = 0.0
    t_max: float = math.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise InvalidRayError("ray direction must be unit length")
        if self.t_min < 0.0 or not self.t_max > self.t_min:
            raise InvalidRayError(f"invalid ray interval [{self.t_min}, {self.t_max}]")

    def at(self, t):
        return self.origin + float(t) * self.direction


class ObjectFrameRay(NamedTuple):
    origin_obj: np.ndarray
    dir_obj: np.ndarray

    def to_world(self, anchor):
        rot_scale = anchor.rotation_matrix * anchor.scale[None, :]
        return rot_scale @ self.origin_obj + anchor.mean, rot_scale @ self.dir_obj


def to_object_frame(ray: Ray, anchor: NeuralAnchor) -> ObjectFrameRay:
    whiten = anchor.whitening
    return ObjectFrameRay(whiten @ (ray.origin - anchor.mean), whiten @ ray.direction)


def mahalanobis_sq(x, anchor: NeuralAnchor) -> float:
    y = anchor.whitening @ (np.asarray(x, dtype=np.float64) - anchor.mean)
    return float(y @ y)


def t_sample(ray: Ray, anchor: NeuralAnchor) -> float:
    obj = to_object_frame(ray, anchor)
    vv = float(obj.dir_obj @ obj.dir_obj)
    if vv < cfg.DEGENERATE_DIR_EPS:
        raise DegenerateRayError()
    return -float(obj.origin_obj @ obj.dir_obj) / vv


def ellipsoid_hit(ray: Ray, anchor: NeuralAnchor, lam: float) -> Optional[float]:
    if not lam > 0.0:
        raise ValueError("lambda must be positive")
    obj = to_object_frame(ray, anchor)
    vv = float(obj.dir_obj @ obj.dir_obj)
    if vv < cfg.DEGENERATE_DIR_EPS:
        raise DegenerateRayError()
    t_star = -float(obj.origin_obj @ obj.dir_obj) / vv
    t_hit = min(max(t_star, ray.t_min), ray.t_max)
    y = obj.origin_obj + t_hit * obj.dir_obj
    if float(y @ y) <= lam:
        return t_hit
    return None


def gaussian_falloff(delta_sq, logit_scale=0.5):
    return np.exp(-logit_scale * np.asarray(delta_sq, dtype=np.float64))


def mahalanobis_sq_many(points, means, whitening):
    """Row-wise Delta^2 for matching rows of points/means/whitening."""
    y = np.einsum("pij,pj->pi", whitening, points - means)
    return np.einsum("pi,pi->p", y, y)


def ellipsoid_hits_many(origins, directions, t_min, t_max, means, whitening, lam):
    """Row-wise exact hit test for (ray, anchor) pairs; returns (hit mask, t)."""
    o_obj = np.einsum("pij,pj->pi", whitening, origins - means)
    v_obj = np.einsum("pij,pj->pi", whitening, directions)
    vv = np.einsum("pi,pi->p", v_obj, v_obj)
    if vv.size and float(vv.min()) < cfg.DEGENERATE_DIR_EPS:
        raise DegenerateRayError()
    t_star = -np.einsum("pi,pi->p", o_obj, v_obj) / vv
    t_hit = np.minimum(np.maximum(t_star, t_min), t_max)
    y = o_obj + t_hit[:, None] * v_obj
    delta_sq = np.einsum("pi,pi->p", y, y)
    return delta_sq <= lam, t_hit
