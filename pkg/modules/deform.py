"""Per-anchor affine edits read from a JSON deformation file."""
import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import DeformationError
from .gaussian import IDENTITY_QUAT, quat_multiply, quat_to_rotmat

logger = logging.getLogger(__name__)


@dataclass
class AnchorTransform:
    selection: Optional[Tuple[int, int]] = None  # None selects every anchor
    rotation: np.ndarray = field(default_factory=lambda: np.array(IDENTITY_QUAT))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise DeformationError("deformation rotation must be a unit quaternion")
        if not self.scale > 0.0:
            raise DeformationError("deformation scale must be positive")

    def rows(self, count):
        if self.selection is None:
            return slice(0, count)
        start, stop = self.selection
        if start < 0 or stop > count or start > stop:
            raise DeformationError(f"selection [{start}, {stop}) out of range for {count} anchors")
        return slice(start, stop)


@dataclass
class DeformationFile:
    transforms: List[AnchorTransform] = field(default_factory=list)


def _parse_selection(raw, index):
    if raw is None or raw == "all":
        return None
    if isinstance(raw, dict) and "start" in raw and "stop" in raw:
        return int(raw["start"]), int(raw["stop"])
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        return int(raw[0]), int(raw[1])
    raise DeformationError(f"transform {index}: selection must be \"all\" or {{\"start\", \"stop\"}}")


def parse_deformation(data) -> DeformationFile:
    if not isinstance(data, dict) or not isinstance(data.get("transforms"), list):
        raise DeformationError("deformation file needs a \"transforms\" list")
    transforms = []
    for index, item in enumerate(data["transforms"]):
        if not isinstance(item, dict):
            raise DeformationError(f"transform {index} is not an object")
        transforms.append(AnchorTransform(
            selection=_parse_selection(item.get("selection", "all"), index),
            rotation=item.get("rotation", IDENTITY_QUAT),
            translation=item.get("translation", (0.0, 0.0, 0.0)),
            scale=item.get("scale", 1.0),
        ))
    return DeformationFile(transforms)


def load_deformation(path) -> DeformationFile:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise DeformationError(f"malformed deformation file {path}: {exc}") from exc
    return parse_deformation(data)


def save_deformation(deformation: DeformationFile, path):
    items = []
    for transform in deformation.transforms:
        selection = "all" if transform.selection is None else {"start": transform.selection[0],
                                                                "stop": transform.selection[1]}
        items.append({"selection": selection, "rotation": transform.rotation.tolist(),
                      "translation": transform.translation.tolist(), "scale": transform.scale})
    with open(path, "w", encoding="utf-8") as handle:
        json.dump({"transforms": items}, handle, indent=2)


def apply_deformation(scene, deformation: DeformationFile):
    """mu' = s Q mu + t, rotation' = Q rotation, scale' = s scale, R_def' = Q R_def."""
    if not scene.baked:
        raise DeformationError("scene must be baked before editing")
    anchors = scene.anchors
    count = len(anchors)
    for transform in deformation.transforms:
        rows = transform.rows(count)
        rot = quat_to_rotmat(transform.rotation)
        anchors.means[rows] = transform.scale * (anchors.means[rows] @ rot.T) + transform.translation
        anchors.rotations[rows] = quat_multiply(transform.rotation, anchors.rotations[rows])
        anchors.scales[rows] = transform.scale * anchors.scales[rows]
        anchors.deform_rotations[rows] = quat_multiply(transform.rotation, anchors.deform_rotations[rows])
    scene.edited = True
    scene.mark_stale()
    logger.info("Applied %s transforms to %s anchors", len(deformation.transforms), count)
    return scene
