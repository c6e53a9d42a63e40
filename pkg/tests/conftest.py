import numpy as np
import pytest

from modules.cameras import Camera
from modules.field import FieldModel
from modules.ris import RayBatch
from modules.scene import AnchorSet, Scene, fit_normalization
from modules.synthetic import generate_synthetic_scene

SMALL_GRID = {"log2_table_size": 10, "n_min": 4, "n_max": 64}
FORWARD_Z = np.diag([1.0, -1.0, -1.0, 1.0])  # camera at the origin looking down +z


def axis_ray(origin=(0.0, 0.0, 0.0), direction=(0.0, 0.0, 1.0)):
    direction = np.asarray(direction, dtype=np.float64)
    return RayBatch(np.asarray(origin, dtype=np.float64)[None, :], (direction / np.linalg.norm(direction))[None, :])


def cone_rays(count, spread=0.15, seed=0):
    """Rays from the origin inside a narrow cone around +z."""
    rng = np.random.default_rng(seed)
    directions = np.column_stack([rng.uniform(-spread, spread, size=(count, 2)), np.ones(count)])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return RayBatch(np.zeros((count, 3)), directions)


@pytest.fixture
def collinear_scene():
    scene, _ = generate_synthetic_scene("collinear", 3, seed=7, hidden=16)
    return scene


@pytest.fixture
def forward_camera():
    return Camera(FORWARD_Z, 0.6911112070083618, "r_0")


@pytest.fixture
def hash_scene():
    scene, _ = generate_synthetic_scene("collinear", 3, seed=3, feature_init="hash", hidden=16, **SMALL_GRID)
    scene.model.hash_grid.tables[:] = np.random.default_rng(11).uniform(
        -1.0, 1.0, size=scene.model.hash_grid.tables.shape).astype(np.float32)
    return scene


@pytest.fixture
def empty_scene():
    model = FieldModel.initialize(seed=0, hidden=8, with_hash_grid=False)
    return Scene(AnchorSet.empty(), model, fit_normalization(np.zeros((0, 3))), baked=True)
