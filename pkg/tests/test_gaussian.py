import math

import numpy as np
import pytest

from modules.errors import DegenerateRayError, InvalidRayError
from modules.gaussian import (
    NeuralAnchor,
    Ray,
    axis_angle_quat,
    covariance,
    ellipsoid_hit,
    gaussian_falloff,
    mahalanobis_sq,
    mahalanobis_sq_many,
    quat_multiply,
    quat_normalize,
    quat_to_rotmat,
    rotmat_grad_to_quat,
    rotmat_to_quat,
    t_sample,
    to_object_frame,
)


def _anchor(mean=(0.0, 0.0, 0.0), rotation=(1.0, 0.0, 0.0, 0.0), scale=(1.0, 1.0, 1.0)):
    return NeuralAnchor(np.array(mean, dtype=float), np.array(rotation, dtype=float), np.array(scale, dtype=float))


def _random_anchor(rng):
    return _anchor(rng.uniform(-2.0, 2.0, 3), quat_normalize(rng.normal(size=4)), rng.uniform(0.2, 1.5, 3))


def _random_ray_near(rng, anchor, distance=8.0):
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = rng.normal(size=3) * 1.5
    origin = anchor.mean + offset - distance * direction
    return Ray(origin, direction)


class TestQuaternions:
    def test_identity_rotation(self):
        np.testing.assert_array_equal(quat_to_rotmat([1.0, 0.0, 0.0, 0.0]), np.eye(3))

    def test_rotation_is_orthonormal(self):
        rng = np.random.default_rng(0)
        rot = quat_to_rotmat(rng.normal(size=(10, 4)))
        for r in rot:
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0)

    def test_multiply_composes_rotations(self):
        rng = np.random.default_rng(1)
        a, b = quat_normalize(rng.normal(size=4)), quat_normalize(rng.normal(size=4))
        np.testing.assert_allclose(quat_to_rotmat(quat_multiply(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b),
                                   atol=1e-12)

    def test_rotmat_round_trip(self):
        q = axis_angle_quat([1.0, 2.0, 3.0], 0.7)
        np.testing.assert_allclose(rotmat_to_quat(quat_to_rotmat(q)), q, atol=1e-12)

    def test_rotmat_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=4)
        upstream = rng.normal(size=(3, 3))
        analytic = rotmat_grad_to_quat(q, upstream)
        h = 1e-6
        for i in range(4):
            plus, minus = q.copy(), q.copy()
            plus[i] += h
            minus[i] -= h
            numeric = (np.sum(quat_to_rotmat(plus) * upstream) - np.sum(quat_to_rotmat(minus) * upstream)) / (2 * h)
            assert analytic[i] == pytest.approx(numeric, rel=1e-6, abs=1e-9)


class TestAnchorAndRay:
    def test_rejects_non_unit_rotation(self):
        with pytest.raises(ValueError):
            _anchor(rotation=(2.0, 0.0, 0.0, 0.0))

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            _anchor(scale=(1.0, 0.0, 1.0))

    def test_rejects_non_unit_direction(self):
        with pytest.raises(InvalidRayError):
            Ray([0.0, 0.0, 0.0], [0.0, 0.0, 2.0])

    def test_rejects_empty_interval(self):
        with pytest.raises(InvalidRayError):
            Ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], t_min=1.0, t_max=1.0)


class TestObjectFrame:
    def test_identity_transform(self):
        obj = to_object_frame(Ray([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]), _anchor())
        np.testing.assert_allclose(obj.origin_obj, [0.0, 0.0, -5.0])
        np.testing.assert_allclose(obj.dir_obj, [0.0, 0.0, 1.0])

    def test_axis_aligned_diagonal(self):
        obj = to_object_frame(Ray([1.0, 0.0, -4.0], [0.0, 0.0, 1.0]), _anchor(mean=(1.0, 0.0, 0.0), scale=(2.0, 1.0, 1.0)))
        np.testing.assert_allclose(obj.origin_obj, [0.0, 0.0, -4.0])
        np.testing.assert_allclose(obj.dir_obj, [0.0, 0.0, 1.0])

    def test_matches_explicit_quadratic_form(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            anchor = _random_anchor(rng)
            ray = _random_ray_near(rng, anchor)
            obj = to_object_frame(ray, anchor)
            precision = np.linalg.inv(covariance(anchor.rotation, anchor.scale))
            for t in (0.0, 1.0, 2.5):
                offset = ray.at(t) - anchor.mean
                y = obj.origin_obj + t * obj.dir_obj
                assert y @ y == pytest.approx(offset @ precision @ offset, rel=1e-9)

    def test_to_world_inverts(self):
        rng = np.random.default_rng(4)
        anchor = _random_anchor(rng)
        ray = _random_ray_near(rng, anchor)
        origin, direction = to_object_frame(ray, anchor).to_world(anchor)
        np.testing.assert_allclose(origin, ray.origin, atol=1e-12)
        np.testing.assert_allclose(direction, ray.direction, atol=1e-12)


class TestMahalanobis:
    def test_zero_at_mean(self):
        assert mahalanobis_sq([1.0, 2.0, 3.0], _anchor(mean=(1.0, 2.0, 3.0))) == 0.0

    def test_unit_isotropic(self):
        assert mahalanobis_sq([1.0, 0.0, 0.0], _anchor()) == pytest.approx(1.0)

    def test_diagonal(self):
        assert mahalanobis_sq([2.0, 0.0, 0.0], _anchor(scale=(2.0, 1.0, 1.0))) == pytest.approx(1.0)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            anchor = _random_anchor(rng)
            ray = _random_ray_near(rng, anchor)
            q = quat_normalize(rng.normal(size=4))
            rot = quat_to_rotmat(q)
            turned = _anchor(rot @ anchor.mean, quat_multiply(q, anchor.rotation), anchor.scale)
            turned_ray = Ray(rot @ ray.origin, rot @ ray.direction)
            assert t_sample(turned_ray, turned) == pytest.approx(t_sample(ray, anchor), abs=1e-7)
            point = ray.at(1.3)
            assert mahalanobis_sq(rot @ point, turned) == pytest.approx(mahalanobis_sq(point, anchor), abs=1e-7)

    def test_vectorised_rows_match(self):
        rng = np.random.default_rng(6)
        anchors = [_random_anchor(rng) for _ in range(5)]
        points = rng.normal(size=(5, 3))
        rows = mahalanobis_sq_many(points, np.stack([a.mean for a in anchors]), np.stack([a.whitening for a in anchors]))
        np.testing.assert_allclose(rows, [mahalanobis_sq(p, a) for p, a in zip(points, anchors)], rtol=1e-12)


class TestTSample:
    def test_ray_through_center(self):
        assert t_sample(Ray([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]), _anchor()) == pytest.approx(5.0)

    def test_perpendicular_offset(self):
        assert t_sample(Ray([0.0, 2.0, -5.0], [0.0, 0.0, 1.0]), _anchor()) == pytest.approx(5.0)

    def test_degenerate_direction(self):
        with pytest.raises(DegenerateRayError, match="degenerate ray"):
            t_sample(Ray([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]), _anchor(scale=(1e13, 1e13, 1e13)))

    def test_matches_dense_argmax(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            anchor = _random_anchor(rng)
            ray = _random_ray_near(rng, anchor)
            t_star = t_sample(ray, anchor)
            grid = np.linspace(t_star - 10.0, t_star + 10.0, 100_000)
            whitening = anchor.whitening
            y = (ray.origin[None, :] + grid[:, None] * ray.direction[None, :] - anchor.mean) @ whitening.T
            delta_sq = np.einsum("pi,pi->p", y, y)
            spacing = grid[1] - grid[0]
            assert abs(grid[np.argmin(delta_sq)] - t_star) <= spacing
            assert delta_sq.min() >= mahalanobis_sq(ray.at(t_star), anchor) - 1e-9


class TestEllipsoidHit:
    def test_geometric_miss(self):
        assert ellipsoid_hit(Ray([0.0, 3.0, -10.0], [0.0, 0.0, 1.0]), _anchor(), 6.25) is None

    def test_hit(self):
        assert ellipsoid_hit(Ray([0.0, 2.0, -10.0], [0.0, 0.0, 1.0]), _anchor(), 6.25) == pytest.approx(10.0)

    def test_interior_origin_clamps_to_t_min(self):
        ray = Ray([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], t_min=0.0)
        assert ellipsoid_hit(ray, _anchor(), 6.25) == 0.0

    def test_behind_origin_misses(self):
        assert ellipsoid_hit(Ray([0.0, 0.0, 5.0], [0.0, 0.0, 1.0]), _anchor(), 6.25) is None

    def test_lambda_must_be_positive(self):
        with pytest.raises(ValueError):
            ellipsoid_hit(Ray([0.0, 0.0, -5.0], [0.0, 0.0, 1.0]), _anchor(), 0.0)

    @pytest.mark.parametrize("lam", [6.25, 11.3449])
    def test_matches_dense_scan(self, lam):
        rng = np.random.default_rng(int(lam * 100))
        grid = np.linspace(0.0, 30.0, 100_000)
        for _ in range(500):
            anchor = _random_anchor(rng)
            ray = _random_ray_near(rng, anchor, distance=rng.uniform(-2.0, 10.0))
            y = (ray.origin[None, :] + grid[:, None] * ray.direction[None, :] - anchor.mean) @ anchor.whitening.T
            scanned = bool(np.einsum("pi,pi->p", y, y).min() <= lam)
            assert (ellipsoid_hit(ray, anchor, lam) is not None) == scanned


class TestFalloff:
    def test_values(self):
        assert gaussian_falloff(0.0) == 1.0
        assert gaussian_falloff(2.0 * math.log(2.0)) == pytest.approx(0.5)
        assert gaussian_falloff(6.25) == pytest.approx(math.exp(-3.125))
        assert gaussian_falloff(6.25) == pytest.approx(0.04394, abs=1e-5)

    def test_composes_with_mahalanobis(self):
        anchor = _anchor(scale=(2.0, 1.0, 1.0))
        assert gaussian_falloff(mahalanobis_sq([5.0, 0.0, 0.0], anchor)) == pytest.approx(math.exp(-3.125))
