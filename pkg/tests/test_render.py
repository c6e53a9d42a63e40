import numpy as np
import pytest

from modules.deform import AnchorTransform, DeformationFile, apply_deformation
from modules.gaussian import axis_angle_quat
from modules.render import RenderConfig, render_image, render_rays
from modules.ris import RayBatch, SamplerConfig
from modules.scene import Scene

from conftest import cone_rays


def _cfg(**sampler):
    return RenderConfig(sampler=SamplerConfig(**sampler), background="black", threads=1)


class TestRenderRays:
    def test_empty_scene_is_background(self, empty_scene, forward_camera):
        image = render_image(empty_scene, forward_camera, 6, 4, RenderConfig(background="white"))
        assert image.shape == (4, 6, 3)
        np.testing.assert_array_equal(image, 1.0)

    def test_output_in_unit_range(self, collinear_scene):
        rgb = render_rays(collinear_scene, cone_rays(64), _cfg())
        assert rgb.shape == (64, 3)
        assert np.all((rgb >= 0.0) & (rgb <= 1.0))

    def test_quota_one_shows_only_nearest_anchor(self, collinear_scene):
        rays = cone_rays(32, spread=0.05)
        front = Scene(collinear_scene.anchors.subset([0]), collinear_scene.model, collinear_scene.normalization,
                      baked=True)
        np.testing.assert_allclose(render_rays(collinear_scene, rays, _cfg(quota=1)),
                                   render_rays(front, rays, _cfg()), atol=1e-12)

    def test_t_max_cuts_far_anchors(self, collinear_scene):
        rays = cone_rays(16, spread=0.02)
        clipped = RayBatch(rays.origins, rays.directions, t_max=3.5)
        front = Scene(collinear_scene.anchors.subset([0]), collinear_scene.model, collinear_scene.normalization,
                      baked=True)
        np.testing.assert_allclose(render_rays(collinear_scene, clipped, _cfg()),
                                   render_rays(front, rays, _cfg()), atol=1e-12)

    def test_transparent_anchors_show_background(self, collinear_scene):
        collinear_scene.anchors.opacity_logits[:] = -60.0
        cfg = RenderConfig(background="white", threads=1)
        np.testing.assert_allclose(render_rays(collinear_scene, cone_rays(16), cfg), 1.0, atol=1e-9)

    def test_deterministic(self, collinear_scene, forward_camera):
        cfg = _cfg()
        first = render_image(collinear_scene, forward_camera, 16, 16, cfg)
        second = render_image(collinear_scene, forward_camera, 16, 16, cfg)
        np.testing.assert_array_equal(first, second)


class TestEquivariance:
    def test_global_rotation_with_camera(self, collinear_scene, forward_camera):
        cfg = _cfg()
        before = render_image(collinear_scene, forward_camera, 16, 16, cfg)
        q = axis_angle_quat([0.2, 1.0, -0.4], 1.1)
        apply_deformation(collinear_scene, DeformationFile([AnchorTransform(rotation=q)]))
        after = render_image(collinear_scene, forward_camera.rotated(q), 16, 16, cfg)
        np.testing.assert_allclose(after, before, atol=1e-6)

    def test_translation_beyond_bounds(self, collinear_scene, forward_camera):
        cfg = _cfg()
        before = render_image(collinear_scene, forward_camera, 16, 16, cfg)
        offset = np.array([100.0, 0.0, 0.0])
        apply_deformation(collinear_scene, DeformationFile([AnchorTransform(translation=offset)]))
        unit = collinear_scene.to_unit(collinear_scene.anchors.means)
        assert np.all(unit[:, 0] > 1.0)
        after = render_image(collinear_scene, forward_camera.translated(offset), 16, 16, cfg)
        np.testing.assert_allclose(after, before, atol=1e-5)
        assert np.any(after > 0.0)


class TestRenderConfig:
    def test_unknown_background(self):
        with pytest.raises(ValueError):
            RenderConfig(background="grey")

    def test_resolved_fills_tau(self, collinear_scene):
        assert RenderConfig().resolved(collinear_scene.anchors).rca.tau_dist == pytest.approx(2.0)
