import dataclasses
import math

import numpy as np
import pytest

from irs_vlp.errors import GeometryError
from irs_vlp.scene import (
    WALL_NORMALS,
    Box,
    PhongParameters,
    SphericalAngles,
    build_irs_array,
    is_unit,
    perturb_wall_orientations,
    scene_validate,
    spherical_to_unit,
    unit_to_spherical,
    wall_assumed_angles,
)

from tests.helpers import RECEIVER, ROOM, make_scene


class TestSphericalAngles:
    def test_polar_axis(self):
        """theta = 0 is +z whatever phi is."""
        np.testing.assert_allclose(spherical_to_unit(SphericalAngles(0.0, 1.234)), [0, 0, 1], atol=1e-15)

    def test_equator_quarter_turn(self):
        np.testing.assert_allclose(
            spherical_to_unit(SphericalAngles(math.pi / 2, math.pi / 2)), [0, 1, 0], atol=1e-15
        )

    def test_hand_evaluated_convention(self):
        theta, phi = math.pi / 3, math.pi / 6
        expected = [math.cos(phi) * math.sin(theta), math.sin(phi) * math.sin(theta), math.cos(theta)]
        np.testing.assert_allclose(spherical_to_unit(SphericalAngles(theta, phi)), expected, rtol=1e-15)

    def test_south_pole_canonicalized(self):
        angles = unit_to_spherical([0.0, 0.0, -1.0])
        assert angles.theta == pytest.approx(math.pi)
        assert angles.phi == 0.0

    def test_x_axis(self):
        angles = unit_to_spherical([1.0, 0.0, 0.0])
        assert angles.theta == pytest.approx(math.pi / 2)
        assert angles.phi == 0.0

    def test_round_trip_random_unit_vectors(self):
        """unit -> angles -> unit is the identity."""
        rng = np.random.default_rng(7)
        vectors = rng.standard_normal((1000, 3))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        for v in vectors:
            np.testing.assert_allclose(spherical_to_unit(unit_to_spherical(v)), v, atol=1e-12)

    def test_output_is_unit(self):
        rng = np.random.default_rng(3)
        for theta, phi in rng.uniform([0, -math.pi], [math.pi, math.pi], size=(1000, 2)):
            assert is_unit(spherical_to_unit(SphericalAngles(theta, phi)))


class TestBuildIrsArray:
    def test_full_layout(self):
        elements = build_irs_array(441, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())
        assert len(elements) == 1764
        assert all(e.area == pytest.approx(8e-4) for e in elements)

    def test_single_element_sits_at_wall_center(self):
        elements = build_irs_array(1, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())
        centers = [e.center.tolist() for e in elements]
        assert centers == [[0.0, -2.0, 1.5], [0.0, 2.0, 1.5], [-2.0, 0.0, 1.5], [2.0, 0.0, 1.5]]

    def test_desk_layout_does_not_overlap(self):
        elements = build_irs_array(49, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())
        assert len(elements) == 196
        for wall in WALL_NORMALS:
            on_wall = [e for e in elements if e.wall_id == wall]
            for i, a in enumerate(on_wall):
                for b in on_wall[i + 1:]:
                    delta = b.center - a.center
                    apart_u = abs(float(delta @ a.tangent_u)) >= a.width - 1e-12
                    apart_v = abs(float(delta @ a.tangent_v)) >= a.height - 1e-12
                    assert apart_u or apart_v

    def test_total_area(self):
        elements = build_irs_array(49, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())
        assert sum(e.area for e in elements) == pytest.approx(4 * 49 * 0.04 * 0.02, rel=1e-12)

    def test_centers_on_wall_planes(self):
        for e in build_irs_array(49, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters()):
            normal = np.asarray(WALL_NORMALS[e.wall_id])
            axis = int(np.argmax(np.abs(normal)))
            plane = ROOM.lower[axis] if normal[axis] > 0 else ROOM.upper[axis]
            assert abs(e.center[axis] - plane) <= 1e-12

    def test_non_square_count_rejected(self):
        with pytest.raises(GeometryError, match="perfect square"):
            build_irs_array(50, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())

    def test_overflowing_grid_rejected(self):
        with pytest.raises(GeometryError, match="overflows"):
            build_irs_array(441, 0.5, 0.5, 0.1, 0.1, ROOM, PhongParameters())

    def test_assumed_orientations_point_inward(self):
        elements = build_irs_array(1, 0.04, 0.02, 0.02, 0.01, ROOM, PhongParameters())
        for e in elements:
            assert float(e.assumed_orientation @ (ROOM.center - e.center)) > 0


class TestPerturbWallOrientations:
    def test_zero_half_width_is_identity(self):
        assumed = wall_assumed_angles()
        walls = perturb_wall_orientations(assumed, 0.0, np.random.default_rng(1))
        for angles, vector in zip(assumed, walls):
            assert np.array_equal(vector, spherical_to_unit(angles))

    def test_deterministic_for_a_seed(self):
        first = perturb_wall_orientations(wall_assumed_angles(), 0.5, np.random.default_rng(11))
        second = perturb_wall_orientations(wall_assumed_angles(), 0.5, np.random.default_rng(11))
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_draws_stay_within_half_width(self):
        rng = np.random.default_rng(5)
        assumed = wall_assumed_angles()
        for _ in range(200):
            for base, vector in zip(assumed, perturb_wall_orientations(assumed, 0.5, rng)):
                # Wall normals are horizontal, so theta stays inside (0, pi).
                assert abs(unit_to_spherical(vector).theta - base.theta) <= 0.5 + 1e-12

    def test_theta_offsets_are_uniform(self):
        """Mean and median of 10^4 theta offsets at k = 1 match U(-1, 1)."""
        rng = np.random.default_rng(2024)
        base = wall_assumed_angles()[0]
        offsets = np.array([
            unit_to_spherical(perturb_wall_orientations([base], 1.0, rng)[0]).theta - base.theta
            for _ in range(10_000)
        ])
        assert offsets.min() >= -1.0 - 1e-12 and offsets.max() <= 1.0 + 1e-12
        # 5 standard errors
        assert abs(offsets.mean()) < 5 * (1 / math.sqrt(3)) / 100
        assert abs(np.mean(offsets < 0) - 0.5) < 5 * 0.5 / 100
        assert abs(np.var(offsets) - 1 / 3) < 0.02

    def test_negative_half_width_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            perturb_wall_orientations(wall_assumed_angles(), -0.1, np.random.default_rng(0))


class TestSceneValidate:
    def test_desk_scene_is_valid(self, desk_scene):
        assert scene_validate(desk_scene, RECEIVER) == []

    def test_reflectance_out_of_range(self):
        scene = make_scene(per_wall_count=1, phong=PhongParameters(reflectance=1.2))
        violations = scene_validate(scene)
        assert any("reflectance" in v for v in violations)

    def test_zero_volume_search_region(self, tiny_scene):
        flat = Box(lower=(-1.0, -1.0, 1.0), upper=(1.0, 1.0, 1.0))
        scene = dataclasses.replace(tiny_scene, search_region=flat)
        assert any("search region" in v for v in scene_validate(scene))

    def test_zero_noise_variance(self, tiny_scene):
        violations = scene_validate(tiny_scene.with_noise_variance(0.0))
        assert any("noise variance" in v for v in violations)

    def test_receiver_outside_region(self, tiny_scene):
        assert any("outside" in v for v in scene_validate(tiny_scene, [5.0, 0.0, 1.0]))


class TestScene:
    def test_with_noise_variance_scalar(self, tiny_scene):
        scene = tiny_scene.with_noise_variance(1e-19)
        assert scene.noise_variances == (1e-19,) * 4

    def test_with_true_wall_orientations_keeps_assumed(self, tiny_scene):
        walls = [np.array([0.0, 0.0, 1.0])] * 4
        scene = tiny_scene.with_true_wall_orientations(walls)
        assert np.array_equal(scene.element_arrays["assumed"], tiny_scene.element_arrays["assumed"])
        assert np.array_equal(scene.element_arrays["true"], np.tile([0.0, 0.0, 1.0], (4, 1)))

    def test_layout_digest_ignores_orientations_and_noise(self, tiny_scene):
        other = tiny_scene.with_noise_variance(1e-13).with_true_wall_orientations([np.array([0.0, 0.0, 1.0])] * 4)
        assert other.layout_digest == tiny_scene.layout_digest
