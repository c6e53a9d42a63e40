import json

import numpy as np
import pytest

from modules.cameras import Camera, load_cameras, look_at, save_cameras
from modules.errors import DatasetError
from modules.gaussian import axis_angle_quat, quat_to_rotmat

from conftest import FORWARD_Z


class TestCamera:
    def test_single_pixel_looks_down_view_axis(self):
        rays = Camera(FORWARD_Z, 0.7).generate_rays(1, 1)
        np.testing.assert_allclose(rays.directions, [[0.0, 0.0, 1.0]], atol=1e-15)
        np.testing.assert_array_equal(rays.origins, [[0.0, 0.0, 0.0]])

    def test_row_major_pixel_order(self):
        rays = Camera(np.eye(4), 1.0).generate_rays(4, 2)
        np.testing.assert_array_equal(rays.ray_index, np.arange(8))
        assert rays.directions[0, 0] < 0.0 < rays.directions[3, 0]
        assert rays.directions[0, 1] > 0.0 > rays.directions[4, 1]

    def test_rotated_camera_rotates_rays(self):
        camera = Camera(look_at([0.0, 1.0, 4.0], [0.0, 0.0, 0.0]), 0.8)
        q = axis_angle_quat([1.0, 2.0, 0.5], 0.7)
        base = camera.generate_rays(3, 3)
        turned = camera.rotated(q).generate_rays(3, 3)
        rot = quat_to_rotmat(q)
        np.testing.assert_allclose(turned.directions, base.directions @ rot.T, atol=1e-12)
        np.testing.assert_allclose(turned.origins, base.origins @ rot.T, atol=1e-12)

    def test_look_at_points_at_target(self):
        camera = Camera(look_at([3.0, 0.0, 0.0], [0.0, 0.0, 0.0]), 0.5)
        np.testing.assert_allclose(camera.generate_rays(1, 1).directions, [[-1.0, 0.0, 0.0]], atol=1e-12)


class TestManifest:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "transforms.json"
        cameras = [Camera(look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0]), 0.69, "./train/r_0"),
                   Camera(FORWARD_Z, 0.5, "./train/r_1")]
        save_cameras(cameras, path)
        loaded = load_cameras(str(path))
        assert len(loaded) == 2
        assert loaded[1].fov_x == 0.5
        assert loaded[0].image_path == "./train/r_0"
        np.testing.assert_allclose(loaded[0].c2w, cameras[0].c2w)

    def test_rejects_non_orthonormal_rotation(self, tmp_path):
        path = tmp_path / "transforms.json"
        matrix = np.eye(4)
        matrix[0, 0] = 2.0
        path.write_text(json.dumps({"camera_angle_x": 0.7, "frames": [{"transform_matrix": matrix.tolist()}]}))
        with pytest.raises(DatasetError, match="orthonormal"):
            load_cameras(str(path))

    def test_rejects_missing_fields(self, tmp_path):
        path = tmp_path / "transforms.json"
        path.write_text(json.dumps({"frames": []}))
        with pytest.raises(DatasetError):
            load_cameras(str(path))

    def test_rejects_malformed_json(self, tmp_path):
        path = tmp_path / "transforms.json"
        path.write_text("{")
        with pytest.raises(DatasetError, match="malformed"):
            load_cameras(str(path))
