"""Geometry layer: quaternions, cameras, rays, and the ray/splat hit test.

The hit test has a closed form worth pinning by hand. Put a splat at
mu = (0.1, -0.2, 0) with identity orientation (tangent axes +x and +y,
normal +z) and axis lengths (0.5, 0.25). A camera at (0, 0, 2) looking
straight down -z shoots the ray o = (0,0,2), d = (0,0,-1). The plane z = 0
is hit at t = 2, world point (0, 0, 0). In splat coordinates

    u = (hit - mu) . x_axis / 0.5  = (-0.1) / 0.5  = -0.2
    v = (hit - mu) . y_axis / 0.25 = ( 0.2) / 0.25 =  0.8

and the kernel there is exp(-(0.04 + 0.64) / 2) = exp(-0.34). The tests
below assert exactly these numbers, then fuzz the rest of the layer with
property checks against numpy's own linear algebra.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sirensplat.errors import DegenerateScaleError, NoIntersectionError, ShapeMismatchError
from sirensplat.geometry import (
    KERNEL_CUTOFF,
    NEAR_CLIP,
    Camera,
    Ray,
    cross3,
    depth_key,
    gaussian_weight,
    intersect,
    make_ray,
    matrix_to_quaternion,
    normalize,
    normalize_quaternion,
    project_point,
    quaternion_to_matrix,
    ray_grid,
    splat_frame,
)

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


def _unit_quat(values):
    q = np.asarray(values, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-6:
        return None
    return q / n


def _camera(size=8, pos=(0.0, 0.0, 2.0), rot=(1.0, 0.0, 0.0, 0.0)) -> Camera:
    return Camera(
        width=size, height=size, fx=float(size), fy=float(size),
        cx=size / 2.0, cy=size / 2.0,
        position=np.array(pos), rotation=np.array(rot),
    )


# ---------------------------------------------------------------- quaternions


class TestQuaternions:
    def test_identity_quaternion_gives_identity_matrix(self):
        np.testing.assert_allclose(
            quaternion_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3), atol=0
        )

    def test_quarter_turn_about_z(self):
        # cos(45 deg) = sin(45 deg) = sqrt(1/2) gives a 90 degree rotation.
        c = math.sqrt(0.5)
        m = quaternion_to_matrix(np.array([c, 0.0, 0.0, c]))
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(m, expected, atol=1e-15)

    def test_negated_quaternion_same_rotation(self):
        q = normalize_quaternion(np.array([0.3, -0.5, 0.7, 0.2]))
        np.testing.assert_array_equal(quaternion_to_matrix(q), quaternion_to_matrix(-q))

    def test_unnormalized_input_is_normalized_first(self):
        q = np.array([0.3, -0.5, 0.7, 0.2])
        np.testing.assert_allclose(
            quaternion_to_matrix(q * 7.3), quaternion_to_matrix(q), atol=1e-14
        )

    @settings(max_examples=200, derandomize=True)
    @given(st.tuples(finite, finite, finite, finite))
    def test_rotation_matrices_are_orthonormal(self, values):
        q = _unit_quat(values)
        if q is None:
            return
        m = quaternion_to_matrix(q)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, derandomize=True)
    @given(st.tuples(finite, finite, finite, finite))
    def test_matrix_roundtrip_recovers_rotation(self, values):
        q = _unit_quat(values)
        if q is None:
            return
        m = quaternion_to_matrix(q)
        q2 = matrix_to_quaternion(m)
        assert q2[0] >= 0.0
        np.testing.assert_allclose(quaternion_to_matrix(q2), m, atol=1e-12)

    def test_matrix_to_quaternion_covers_all_branches(self):
        # Half-turns about each axis have trace -1 and force the three
        # non-trace branches; identity exercises the trace branch.
        for axis in range(3):
            ang = math.pi
            axis_vec = np.zeros(3)
            axis_vec[axis] = 1.0
            q = np.concatenate([[math.cos(ang / 2)], math.sin(ang / 2) * axis_vec])
            m = quaternion_to_matrix(q)
            q2 = matrix_to_quaternion(m)
            np.testing.assert_allclose(quaternion_to_matrix(q2), m, atol=1e-12)
        np.testing.assert_allclose(
            matrix_to_quaternion(np.eye(3)), [1.0, 0, 0, 0], atol=0
        )

    def test_matrix_to_quaternion_rejects_bad_shape(self):
        with pytest.raises(ShapeMismatchError):
            matrix_to_quaternion(np.eye(4))


def test_normalize_zero_vector_raises():
    with pytest.raises(DegenerateScaleError):
        normalize(np.zeros(3))


@settings(max_examples=200, derandomize=True)
@given(
    st.tuples(finite, finite, finite),
    st.tuples(finite, finite, finite),
)
def test_cross3_matches_numpy(a, b):
    np.testing.assert_array_equal(cross3(a, b), np.cross(np.array(a), np.array(b)))


# -------------------------------------------------------------------- cameras


class TestCamera:
    def test_forward_of_identity_rotation_is_minus_z(self):
        cam = _camera()
        np.testing.assert_array_equal(cam.forward(), [0.0, 0.0, -1.0])

    def test_camera_to_world_layout(self):
        cam = _camera(pos=(1.0, 2.0, 3.0))
        m = cam.camera_to_world()
        np.testing.assert_array_equal(m[:3, 3], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(m[:3, :3], cam.rotation_matrix())
        np.testing.assert_array_equal(m[3], [0.0, 0.0, 0.0, 1.0])

    def test_rejects_nonpositive_resolution_and_focal(self):
        with pytest.raises(ShapeMismatchError):
            _camera(size=0)
        with pytest.raises(ShapeMismatchError):
            Camera(width=4, height=4, fx=-1.0, fy=1.0, cx=2, cy=2,
                   position=np.zeros(3), rotation=np.array([1.0, 0, 0, 0]))

    def test_center_ray_looks_down_minus_z(self):
        cam = _camera(size=8)
        ray = make_ray(cam, 4.0, 4.0)  # cx, cy
        np.testing.assert_allclose(ray.dir, [0.0, 0.0, -1.0], atol=0)
        np.testing.assert_array_equal(ray.origin, cam.position)

    def test_ray_grid_matches_make_ray_per_pixel(self):
        cam = _camera(size=5, pos=(0.3, -0.2, 1.7), rot=(0.9, 0.1, -0.3, 0.2))
        grid = ray_grid(cam)
        assert grid.shape == (5, 5, 3)
        for py in range(5):
            for px in range(5):
                ray = make_ray(cam, px + 0.5, py + 0.5)
                np.testing.assert_allclose(grid[py, px], ray.dir, atol=1e-15)

    def test_pixel_y_axis_points_down(self):
        cam = _camera(size=8)
        top = make_ray(cam, 4.0, 0.5)
        bottom = make_ray(cam, 4.0, 7.5)
        assert top.dir[1] > 0 > bottom.dir[1]


class TestProjectPoint:
    def test_point_on_axis_lands_on_principal_point(self):
        cam = _camera(size=8)
        px, py, depth = project_point(cam, np.array([0.0, 0.0, 0.0]))
        assert (px, py) == (4.0, 4.0)
        assert depth == pytest.approx(2.0)

    def test_projection_inverts_ray_march(self):
        cam = _camera(size=9, pos=(0.2, 0.4, 2.2), rot=(0.8, -0.2, 0.4, 0.1))
        for target in [(1.3, 6.7), (0.5, 0.5), (8.2, 3.4)]:
            ray = make_ray(cam, *target)
            point = ray.origin + 1.7 * ray.dir
            px, py, depth = project_point(cam, point)
            assert px == pytest.approx(target[0], abs=1e-9)
            assert py == pytest.approx(target[1], abs=1e-9)
            assert depth > 0

    def test_point_behind_camera_reports_nan(self):
        cam = _camera()
        px, py, depth = project_point(cam, np.array([0.0, 0.0, 5.0]))
        assert math.isnan(px) and math.isnan(py)
        assert depth < 0


# ----------------------------------------------------------- splat hit test


class TestIntersect:
    def _frame(self, mu=(0.1, -0.2, 0.0), scale=(0.5, 0.25)):
        return splat_frame(np.array(mu), np.array([1.0, 0, 0, 0]), np.array(scale))

    def test_hand_computed_axis_hit(self):
        # Numbers derived in the module docstring.
        frame = self._frame()
        ray = Ray(origin=np.array([0.0, 0.0, 2.0]), dir=np.array([0.0, 0.0, -1.0]))
        u, v, t = intersect(ray, frame)
        assert t == pytest.approx(2.0, abs=1e-14)
        assert u == pytest.approx(-0.2, abs=1e-14)
        assert v == pytest.approx(0.8, abs=1e-14)
        assert gaussian_weight(u, v) == pytest.approx(math.exp(-0.34), rel=1e-14)

    def test_oblique_hit_reconstructs_world_point(self):
        frame = splat_frame(
            np.array([0.2, -0.1, 0.3]),
            normalize_quaternion(np.array([0.7, 0.3, -0.4, 0.5])),
            np.array([0.6, 0.3]),
        )
        ray = Ray(
            origin=np.array([0.5, 0.4, 2.0]),
            dir=normalize(np.array([-0.2, -0.25, -1.0])),
        )
        u, v, t = intersect(ray, frame)
        on_ray = ray.origin + t * ray.dir
        on_splat = frame.mu + u * frame.s_u + v * frame.s_v
        np.testing.assert_allclose(on_ray, on_splat, atol=1e-12)

    def test_parallel_ray_raises(self):
        frame = self._frame()
        ray = Ray(origin=np.array([0.0, 0.0, 1.0]), dir=np.array([1.0, 0.0, 0.0]))
        with pytest.raises(NoIntersectionError):
            intersect(ray, frame)

    def test_hit_behind_near_clip_raises(self):
        frame = self._frame()
        # Looking away from the plane: the hit is at negative t.
        ray = Ray(origin=np.array([0.0, 0.0, 2.0]), dir=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(NoIntersectionError):
            intersect(ray, frame)
        # A hit inside the clip distance is also rejected.
        close = Ray(
            origin=np.array([0.0, 0.0, NEAR_CLIP / 2]), dir=np.array([0.0, 0.0, -1.0])
        )
        with pytest.raises(NoIntersectionError):
            intersect(close, frame)

    def test_degenerate_scale_raises(self):
        with pytest.raises(DegenerateScaleError):
            splat_frame(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array([0.0, 0.1]))


def test_gaussian_weight_truncates_at_cutoff():
    inside = KERNEL_CUTOFF - 1e-6
    assert gaussian_weight(inside, 0.0) > 0.0
    assert gaussian_weight(KERNEL_CUTOFF + 1e-9, 0.0) == 0.0
    assert gaussian_weight(0.0, 0.0) == 1.0
    assert gaussian_weight(1.0, 1.0) == pytest.approx(math.exp(-1.0), rel=1e-15)


def test_depth_key_orders_by_forward_distance():
    cam = _camera(pos=(0.0, 0.0, 2.0))
    mu = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -3.0], [0.0, 0.0, 0.0]])
    keys = depth_key(mu, cam)
    # Camera looks down -z, so z = 1 is nearest and z = -3 farthest.
    np.testing.assert_allclose(keys, [1.0, 5.0, 2.0])
    assert list(np.argsort(keys)) == [0, 2, 1]
