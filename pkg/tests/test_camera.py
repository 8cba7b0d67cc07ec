import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ray_march_capsule
from humansynth.camera import (
    Box3,
    CameraConstraints,
    CameraError,
    CameraIntrinsics,
    CameraRig,
    CapsuleProxy,
    cast_capsules,
    check_camera,
    distance_bounds,
    look_at,
    occlusion_ratio,
    place_cameras,
    ray_box_hits,
    ray_capsule_hits,
    ray_capsule_intersect,
    sample_capsule_surface,
)
from humansynth.kinematics import Transform
from humansynth.placement import Footprint, SceneLayout


def standing(x, y, radius=0.2):
    return CapsuleProxy([[x, y, 0.3]], [[x, y, 1.6]], radius)


def point_segment_distance(p, a, b):
    ab = b - a
    s = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[..., None] * ab), axis=-1)


class TestIntrinsics:
    def test_focal(self):
        assert CameraIntrinsics(math.pi / 2, 200, 100).focal == pytest.approx(100.0)

    def test_default_principal_point(self):
        k = CameraIntrinsics(1.0, 64, 48)
        assert (k.cx, k.cy) == (32.0, 24.0)

    @pytest.mark.parametrize("fov, w, h", [(0.0, 10, 10), (math.pi, 10, 10), (1.0, 0, 10)])
    def test_invalid(self, fov, w, h):
        with pytest.raises(CameraError):
            CameraIntrinsics(fov, w, h)


class TestLookAt:
    def test_direction(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pos, tgt = rng.normal(size=3) * 5, rng.normal(size=3)
            rig = CameraRig(CameraIntrinsics(1.0, 10, 10), Transform(look_at(pos, tgt), pos))
            d = (tgt - pos) / np.linalg.norm(tgt - pos)
            np.testing.assert_allclose(rig.look_direction, d, atol=1e-12)
            # camera x axis stays horizontal, so there is no roll
            assert abs(rig.pose.rotation.as_matrix()[2, 0]) < 1e-12

    def test_pitch(self):
        rig = CameraRig(CameraIntrinsics(1.0, 10, 10), Transform(look_at((0, -1, 1), (0, 0, 0)), (0, -1, 1)))
        assert rig.pitch == pytest.approx(-math.pi / 4)

    def test_vertical_rejected(self):
        with pytest.raises(CameraError):
            look_at((0, 0, 5), (0, 0, 0))

    def test_rig_json_roundtrip(self):
        rig = CameraRig(CameraIntrinsics(1.1, 64, 32), Transform(look_at((3, 2, 1.5), (0, 0, 1)), (3, 2, 1.5)))
        back = CameraRig.from_dict(json.loads(json.dumps(rig.to_dict())))
        np.testing.assert_allclose(back.pose.as_matrix(), rig.pose.as_matrix(), atol=1e-15)
        assert back.intrinsics == rig.intrinsics


class TestRayCapsule:
    def test_sphere(self):
        assert ray_capsule_intersect((0, 0, 0), (1, 0, 0), (5, 0, 0), (5, 0, 0), 1.0) == pytest.approx(4.0)

    def test_cylinder_side(self):
        t = ray_capsule_intersect((0, 0, 0), (1, 0, 0), (5, 0, -2), (5, 0, 2), 0.5)
        assert t == pytest.approx(4.5)

    def test_end_cap(self):
        t = ray_capsule_intersect((0, 0, 0), (0, 0, 1), (0, 0, 3), (0, 0, 6), 0.5)
        assert t == pytest.approx(2.5)

    def test_parallel_miss(self):
        assert ray_capsule_intersect((0, 0, 0), (0, 0, 1), (1, 0, 3), (1, 0, 6), 0.5) is None

    def test_behind_origin(self):
        assert ray_capsule_intersect((0, 0, 0), (1, 0, 0), (-5, 0, 0), (-5, 0, 1), 0.5) is None

    def test_matches_ray_march(self):
        rng = np.random.default_rng(1)
        checked = 0
        while checked < 40:
            a, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
            r = float(rng.uniform(0.1, 0.5))
            o = rng.normal(size=3)
            o = o / np.linalg.norm(o) * 4.0
            if point_segment_distance(o, a, b) <= r:
                continue
            d = rng.uniform(-1, 1, 3) * 0.4 - o / 4.0
            d /= np.linalg.norm(d)
            expected = ray_march_capsule(o, d, a, b, r, t_max=10.0, steps=4000)
            got = ray_capsule_intersect(o, d, a, b, r)
            if expected is None:
                assert got is None
            else:
                assert got == pytest.approx(expected, abs=1e-6)
            checked += 1

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_hit_lies_on_surface(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        r = float(rng.uniform(0.05, 0.6))
        o = rng.normal(size=3) * 3
        d = rng.uniform(-1, 1, 3) - o
        d /= np.linalg.norm(d)
        t = ray_capsule_intersect(o, d, a, b, r)
        if t is not None:
            assert abs(point_segment_distance(o + t * d, a, b) - r) < 1e-7

    def test_batched_agrees_with_scalar(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, (5, 3))
        o = np.array([[0.0, 0.0, 5.0]])
        dirs = rng.normal(size=(50, 3)) * 0.3 + [0, 0, -1]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        hits = ray_capsule_hits(o[:, None, :], dirs[:, None, :], a[None], b[None], 0.3)
        t, idx = cast_capsules(o, dirs, a, b, 0.3)
        for i, d in enumerate(dirs):
            scalar = [ray_capsule_intersect(o[0], d, a[k], b[k], 0.3) for k in range(5)]
            scalar = [np.inf if s is None else s for s in scalar]
            np.testing.assert_allclose(hits[i], scalar, atol=1e-9)
            assert t[i] == pytest.approx(min(scalar)) or (np.isinf(t[i]) and np.isinf(min(scalar)))
            if np.isfinite(t[i]):
                assert idx[i] == int(np.argmin(scalar))


class TestRayBox:
    def test_hit_and_miss(self):
        o = np.array([[0.0, 0.0, 0.0], [0.0, 5.0, 0.0]])
        d = np.array([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        t = ray_box_hits(o, d, np.array([2.0, -1.0, -1.0]), np.array([3.0, 1.0, 1.0]))
        assert t[0] == pytest.approx(2.0) and np.isinf(t[1])


class TestDistanceBounds:
    def test_two_subjects_right_angle(self):
        l_min, l_max = distance_bounds([[1, 0, 0], [-1, 0, 0]], math.pi / 2, 1.0, 10.0)
        assert l_min == pytest.approx(math.sqrt(2), abs=1e-12) and l_max == 10.0

    def test_single_subject(self):
        assert distance_bounds([[3, 4, 5]], 1.0, 1.1, 10.0)[0] == 0.0

    def test_scaling_and_translation(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=(4, 3))
        base = distance_bounds(p, 1.0, 1.1, 10.0)[0]
        assert distance_bounds(p, 1.0, 2.2, 10.0)[0] == pytest.approx(2 * base, rel=1e-12)
        assert distance_bounds(p * 3, 1.0, 1.1, 10.0)[0] == pytest.approx(3 * base, rel=1e-12)
        assert distance_bounds(p + [10, -4, 2], 1.0, 1.1, 10.0)[0] == pytest.approx(base, rel=1e-9)

    def test_errors(self):
        with pytest.raises(CameraError):
            distance_bounds(np.zeros((0, 3)), 1.0, 1.0, 1.0)
        with pytest.raises(CameraError):
            distance_bounds([[0, 0, 0]], 0.0, 1.0, 1.0)


class TestSurfaceSampling:
    def test_points_on_surface(self):
        cap = CapsuleProxy([[0, 0, 0], [1, 1, 1]], [[0, 0, 2], [1, 1, 1]], 0.3)
        pts = sample_capsule_surface(cap, 2000, np.random.default_rng(4))
        d = np.minimum(point_segment_distance(pts, cap.a[0], cap.b[0]), point_segment_distance(pts, cap.a[1], cap.b[1]))
        assert np.max(np.abs(d - 0.3)) < 1e-9

    def test_area_weighting(self):
        # long cylinder (area 2*pi*r*h + 4*pi*r^2) versus a sphere of the same radius
        cap = CapsuleProxy([[0, 0, 0], [10, 0, 0]], [[0, 0, 3], [10, 0, 0]], 0.25)
        pts = sample_capsule_surface(cap, 40000, np.random.default_rng(5))
        share = np.mean(pts[:, 0] < 5)
        areas = cap.surface_area()
        assert share == pytest.approx(areas[0] / areas.sum(), abs=0.01)

    def test_axial_coordinate_uniform_including_caps(self):
        # equal-width axial bands of a capsule carry equal area (sphere zones included)
        cap = CapsuleProxy([[0, 0, 0]], [[0, 0, 1]], 0.5)
        pts = sample_capsule_surface(cap, 20000, np.random.default_rng(6))
        counts, _ = np.histogram(pts[:, 2], bins=10, range=(-0.5, 1.5))
        assert np.all(np.abs(counts - 2000) <= 60)

    def test_sphere_points_isotropic(self):
        cap = CapsuleProxy([[1, 2, 3]], [[1, 2, 3]], 0.4)
        pts = sample_capsule_surface(cap, 50000, np.random.default_rng(7)) - [1, 2, 3]
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.4, atol=1e-12)
        np.testing.assert_allclose(pts.mean(axis=0), 0.0, atol=0.01)
        np.testing.assert_allclose(np.cov(pts.T), np.eye(3) * 0.16 / 3, atol=0.002)


class TestOcclusion:
    target = CapsuleProxy([[-1, 0, 0]], [[1, 0, 0]], 0.2)
    cam = np.array([0.0, 0.0, 100.0])

    def test_unobstructed(self):
        assert occlusion_ratio(self.cam, self.target, [], [], 512) == 0.0

    def test_fully_blocked(self):
        slab = Box3((-50, -50, 5), (50, 50, 6))
        assert occlusion_ratio(self.cam, self.target, [], [slab], 512) == 1.0

    def test_half_slab(self):
        slab = Box3((-50, -50, 5), (0, 50, 6))
        assert occlusion_ratio(self.cam, self.target, [], [slab], 4096, np.random.default_rng(6)) == pytest.approx(0.5, abs=0.03)

    def test_capsule_blocker(self):
        blocker = CapsuleProxy([[-5, 0, 10]], [[5, 0, 10]], 2.0)
        assert occlusion_ratio(self.cam, self.target, [blocker], [], 256) == 1.0

    def test_monotone_in_slab_width(self):
        prev = 0.0
        for edge in np.linspace(-1.5, 1.5, 13):
            slab = Box3((-50, -50, 5), (edge, 50, 6))
            r = occlusion_ratio(self.cam, self.target, [], [slab], 256, np.random.default_rng(7))
            assert r >= prev
            prev = r
        assert prev == 1.0

    def test_self_occlusion_ignored(self):
        body = CapsuleProxy([[0, 0, 0], [0, 0, 1.5]], [[0, 0, 1.5], [0.5, 0, 1.5]], 0.2)
        assert occlusion_ratio((5.0, 0.0, 1.0), body, [], [], 512) == 0.0


def single_actor_scene(objects=()):
    return SceneLayout((-10.0, -10.0, 10.0, 10.0), list(objects))


class TestPlaceCameras:
    intr = CameraIntrinsics(math.radians(60), 64, 64)

    def test_all_conditions_hold(self):
        actors = [[standing(0, 0)], [standing(1.5, 0.5)], [standing(-1, 1)]]
        scene = single_actor_scene([Footprint(4, 4, 1, 1)])
        cons = CameraConstraints()
        res = place_cameras(scene, actors, 4, cons, self.intr, np.random.default_rng(8))
        assert len(res.cameras) == 4 and not res.exhausted
        for rig, occ in zip(res.cameras, res.occlusion):
            assert check_camera(rig, scene, actors, res.center, res.l_min, res.l_max, cons) is None
            assert res.l_min <= np.linalg.norm(rig.position - res.center) <= res.l_max
            assert cons.pitch_min - 1e-9 <= rig.pitch <= cons.pitch_max + 1e-9
            assert max(occ) <= cons.max_occlusion

    def test_seeded(self):
        actors = [[standing(0, 0)], [standing(2, 0)]]

        def run():
            res = place_cameras(single_actor_scene(), actors, 3, CameraConstraints(), self.intr, np.random.default_rng(9))
            return [c.to_dict() for c in res.cameras]

        assert run() == run()

    def test_penetration_detected(self):
        actors = [[standing(0, 0)]]
        scene = single_actor_scene([Footprint(0, -3, 2, 2, 3.0)])
        rig = CameraRig(self.intr, Transform(look_at((0, -3, 1), (0, 0, 0.3)), (0, -3, 1)))
        assert check_camera(rig, scene, actors, np.array([0, 0, 0.3]), 0.0, 10.0, CameraConstraints()) == "penetration"

    def test_walled_subjects_exhaust(self):
        # tall walls hug two subjects; the shell radius keeps cameras outside, where the walls block every ray
        walls = [Footprint(0, 1, 2.5, 0.5, 20), Footprint(0, -1, 2.5, 0.5, 20), Footprint(1, 0, 0.5, 2.5, 20), Footprint(-1, 0, 0.5, 2.5, 20)]
        actors = [[standing(-0.6, 0, 0.1)], [standing(0.6, 0, 0.1)]]
        res = place_cameras(single_actor_scene(walls), actors, 1, CameraConstraints(attempts_per_camera=200), self.intr,
                            np.random.default_rng(10))
        assert res.l_min > 1.06
        assert res.exhausted and not res.cameras
        assert res.rejections["occlusion"] > 0
        assert sum(v for k, v in res.rejections.items() if k != "exhausted") == 200

    def test_infeasible_distance(self):
        actors = [[standing(-8, 0)], [standing(8, 0)]]
        res = place_cameras(single_actor_scene(), actors, 1, CameraConstraints(l_max=3.0), self.intr, np.random.default_rng(11))
        assert res.exhausted and res.rejections["distance_bounds"] == 1

    def test_constraints_from_dict(self):
        c = CameraConstraints.from_dict({"pitch_min_deg": -20, "pitch_max_deg": 5, "lambda": 1.5})
        assert c.pitch_min == pytest.approx(math.radians(-20)) and c.lam == 1.5
        with pytest.raises(CameraError):
            CameraConstraints(pitch_min=0.5, pitch_max=0.1)
