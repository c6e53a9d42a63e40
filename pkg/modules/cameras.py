"""Pinhole cameras in the NeRF-synthetic `transforms.json` convention
(camera looks down -z, +y up in camera space)."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import DatasetError
from .gaussian import quat_to_rotmat
from .ris import RayBatch

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-4


@dataclass
class Camera:
    c2w: np.ndarray
    fov_x: float
    image_path: str = ""

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        self.fov_x = float(self.fov_x)

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def position(self):
        return self.c2w[:3, 3]

    def focal(self, width):
        return 0.5 * width / math.tan(0.5 * self.fov_x)

    def generate_rays(self, width, height) -> RayBatch:
        """One ray per pixel centre, row-major; ray_index = row * width + column."""
        focal = self.focal(width)
        cols, rows = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
        cam_dirs = np.stack([
            (cols + 0.5 - 0.5 * width) / focal,
            -(rows + 0.5 - 0.5 * height) / focal,
            -np.ones_like(cols),
        ], axis=-1).reshape(-1, 3)
        dirs = cam_dirs @ self.rotation.T
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape)
        return RayBatch(origins, dirs, np.arange(width * height))

    def rotated(self, quaternion):
        """Camera rigidly rotated about the world origin."""
        rot = quat_to_rotmat(quaternion)
        c2w = self.c2w.copy()
        c2w[:3, :3] = rot @ self.rotation
        c2w[:3, 3] = rot @ self.position
        return Camera(c2w, self.fov_x, self.image_path)

    def translated(self, offset):
        c2w = self.c2w.copy()
        c2w[:3, 3] = self.position + np.asarray(offset, dtype=np.float64)
        return Camera(c2w, self.fov_x, self.image_path)


@dataclass
class CameraSet:
    cameras: List[Camera] = field(default_factory=list)

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, index):
        return self.cameras[index]


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def load_cameras(path) -> CameraSet:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed transforms manifest {path}: {exc}") from exc
    if not isinstance(data, dict) or "camera_angle_x" not in data or "frames" not in data:
        raise DatasetError(f"transforms manifest {path} needs camera_angle_x and frames")

    fov_x = float(data["camera_angle_x"])
    cameras = []
    for index, frame in enumerate(data["frames"]):
        if "transform_matrix" not in frame:
            raise DatasetError(f"frame {index} has no transform_matrix")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise DatasetError(f"frame {index} transform_matrix is not 4x4")
        rot = c2w[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise DatasetError(f"frame {index} rotation is not orthonormal")
        cameras.append(Camera(c2w, float(frame.get("camera_angle_x", fov_x)), str(frame.get("file_path", ""))))
    logger.info("Loaded %s cameras from %s", len(cameras), path)
    return CameraSet(cameras)


def save_cameras(cameras, path):
    cameras = list(cameras)
    fov_x = cameras[0].fov_x if cameras else 0.0
    frames = []
    for camera in cameras:
        frame = {"file_path": camera.image_path, "transform_matrix": camera.c2w.tolist()}
        if camera.fov_x != fov_x:
            frame["camera_angle_x"] = camera.fov_x
        frames.append(frame)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump({"camera_angle_x": fov_x, "frames": frames}, handle, indent=2)
