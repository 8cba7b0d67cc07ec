"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also repeated in the terminal summary. The module also runs as a
script.
"""

import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import enumerate_cells, matrix_fk, random_pose, random_skeleton, rodrigues
from humansynth.annotation import read_ndjson, read_pfm, read_pgm, reproject_record
from humansynth.body import builtin_variant, posed_joints, shaped_skeleton
from humansynth.camera import Box3, CameraRig, CapsuleProxy, distance_bounds, object_volumes, occlusion_ratio, ray_box_hits, ray_capsule_hits
from humansynth.fitting import beta_jacobian, fit_pose_frame, fit_shape_tpose, pose_jacobian
from humansynth.kinematics import Bone, PoseFrame, Rotation, Skeleton, fk_joint_positions
from humansynth.pipeline import RunConfig, load_resources, run_generate, sample_spec
from humansynth.placement import Footprint, PlacementConfig, SceneLayout, feasible_cells, overlap_area, place_actor
from humansynth.retarget import MotionClip, bone_map_by_name, retarget_clip


def _tree_digest(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


# -- 1 -------------------------------------------------------------------------


def test_c1_kinematics_oracle(acceptance):
    rng = np.random.default_rng(101)
    cases = []
    for _ in range(1000):
        n = int(rng.integers(1, 17))
        skel = random_skeleton(rng, n, chain=bool(rng.integers(2)))
        pose, mats = random_pose(rng, n)
        cases.append((skel, pose, mats))
    start = time.perf_counter()
    joints = [fk_joint_positions(skel, pose) for skel, pose, _ in cases]
    elapsed = time.perf_counter() - start
    worst = max(float(np.max(np.abs(j - matrix_fk(skel, pose.root_translation, mats)[1]))) for j, (skel, pose, mats) in zip(joints, cases))
    ok = acceptance(1, "quaternion FK vs matrix-chain oracle", worst < 1e-9 and elapsed < 5.0, f"max error {worst:.2e}, {elapsed:.2f} s")
    assert ok


# -- 2 -------------------------------------------------------------------------


def _random_clip(rng, n_bones, n_frames):
    frames = [PoseFrame.tpose(n_bones, rng.normal(size=3))]
    for _ in range(n_frames - 1):
        frames.append(random_pose(rng, n_bones)[0])
    return MotionClip(30.0, tuple(frames))


def _model_rotations(skel, frame):
    mats = [rodrigues(*_axis_angle(r)) for r in frame.local_rotations]
    return matrix_fk(skel, frame.root_translation, mats)[0]


def _axis_angle(r: Rotation):
    w, x, y, z = r.as_tuple()
    s = math.sqrt(x * x + y * y + z * z)
    if s == 0:
        return (1.0, 0.0, 0.0), 0.0
    return (x / s, y / s, z / s), 2 * math.atan2(s, w)


def test_c2_retarget_identity(acceptance):
    rng = np.random.default_rng(202)
    rot_err = 0.0
    tpose_ok = exact_same = exact_double = True
    ratio_err = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 17))
        skel = random_skeleton(rng, n)
        clip = _random_clip(rng, n, int(rng.integers(2, 8)))
        out = retarget_clip(skel, clip, skel, bone_map_by_name(skel, skel))
        tpose_ok &= out.frames[0].is_tpose()
        for fs, ft in zip(clip.frames, out.frames):
            gs, gt = _model_rotations(skel, fs), _model_rotations(skel, ft)
            rot_err = max(rot_err, max(float(np.max(np.abs(a - b))) for a, b in zip(gs, gt)))
            exact_same &= np.array_equal(ft.root_translation, fs.root_translation)
        # doubled skeleton: pelvis ratio is exactly 2
        double = Skeleton([Bone(b.name, b.parent, tuple(2.0 * np.asarray(b.rest_offset))) for b in skel.bones])
        out2 = retarget_clip(skel, clip, double, bone_map_by_name(skel, double))
        tpose_ok &= out2.frames[0].is_tpose()
        exact_double &= all(np.array_equal(ft.root_translation, 2.0 * fs.root_translation) for fs, ft in zip(clip.frames, out2.frames))
        # general ratio against an independent evaluation of t * h_tgt / h_src
        other = Skeleton([Bone(b.name, b.parent, tuple(np.asarray(b.rest_offset) * rng.uniform(0.5, 1.5, 3))) for b in skel.bones])
        out3 = retarget_clip(skel, clip, other, bone_map_by_name(skel, other))
        h_src, h_tgt = skel.bones[0].rest_offset[2], other.bones[0].rest_offset[2]
        for fs, ft in zip(clip.frames, out3.frames):
            ratio_err = max(ratio_err, float(np.max(np.abs(ft.root_translation - fs.root_translation * (h_tgt / h_src)))))
    ok = rot_err < 1e-9 and tpose_ok and exact_same and exact_double and ratio_err < 1e-12
    detail = f"rotation error {rot_err:.2e}, frame0 T-pose {tpose_ok}, x2 bit-exact {exact_double}, ratio error {ratio_err:.1e}"
    assert acceptance(2, "retarget onto identical skeleton", ok, detail)


# -- 3 -------------------------------------------------------------------------


def test_c3_placement_sound_and_complete(acceptance):
    rng = np.random.default_rng(303)
    scenes = placements = agree = checks = 0
    overlaps = 0
    for _ in range(500):
        cells = rng.integers(4, 41, size=2)
        step = 0.25
        x0, y0 = rng.uniform(-3, 3, 2).round(2)
        bounds = (float(x0), float(y0), float(x0 + (cells[0] - 1) * step), float(y0 + (cells[1] - 1) * step))
        objs = []
        for _ in range(int(rng.integers(0, 7))):
            cx, cy = rng.uniform(bounds[:2], bounds[2:])
            objs.append(Footprint(float(cx), float(cy), float(rng.uniform(0.2, 2.5)), float(rng.uniform(0.2, 2.5))))
        scene = SceneLayout(bounds, objs)
        cfg = PlacementConfig(grid_step=step, dispersal_radius=float(rng.uniform(0.5, 6)))
        scenes += 1
        for _ in range(int(rng.integers(1, 6))):
            l, w = (float(v) for v in rng.uniform(0.2, 2.0, 2))
            oracle = enumerate_cells(scene.bounds, scene.objects, scene.placed_actors, l, w, step, cfg.dispersal_radius)
            got = feasible_cells(scene, l, w, cfg)
            same = sorted(map(tuple, np.round(got, 9))) == sorted((round(x, 9), round(y, 9)) for x, y in oracle)
            spot = place_actor(scene, l, w, cfg, rng)
            if spot is None:
                same &= not oracle
            else:
                placements += 1
                same &= (round(spot[0], 9), round(spot[1], 9)) in {(round(x, 9), round(y, 9)) for x, y in oracle}
                new = scene.placed_actors[-1]
                overlaps += sum(overlap_area(new, b) != 0.0 for b in scene.objects + scene.placed_actors[:-1])
            checks += 1
            agree += bool(same)
    ok = overlaps == 0 and agree == checks
    detail = f"{scenes} scenes, {placements} placements, {overlaps} overlaps, enumeration agreement {agree}/{checks}"
    assert acceptance(3, "placement soundness and completeness", ok, detail)


# -- 4 -------------------------------------------------------------------------


def test_c4_distance_bounds_formula(acceptance):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        p = rng.normal(scale=rng.uniform(0.1, 10), size=(n, 3))
        alpha = float(rng.uniform(0.05, math.pi - 0.05))
        lam = float(rng.uniform(0.1, 3))
        cx, cy, cz = (sum(row[c] for row in p.tolist()) / n for c in range(3))
        spread = max(math.sqrt((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) for x, y, z in p.tolist())
        expected = lam / math.sin(alpha / 2) * spread
        got, l_max = distance_bounds(p, alpha, lam, 10.0)
        worst = max(worst, abs(got - expected) / max(1.0, expected))
    sqrt2, _ = distance_bounds([[-1, 0, 0], [1, 0, 0]], math.pi / 2, 1.0, 10.0)
    ok = worst < 1e-12 and abs(sqrt2 - math.sqrt(2)) < 1e-12
    assert acceptance(4, "camera distance bound formula", ok, f"max rel error {worst:.1e}, sqrt2 case error {abs(sqrt2 - math.sqrt(2)):.1e}")


# -- 5 -------------------------------------------------------------------------


def _slab_scene(rng):
    """Capsule on a principal axis, camera high above, slab covering one side.

    Capsule area is uniform along its axis (caps included), so the blocked
    fraction is the slab's share of the axial extent, up to ray obliquity.
    """
    axis = int(rng.integers(2))
    sign = float(rng.choice([-1.0, 1.0]))
    half = float(rng.uniform(0.25, 1.0))
    r = float(rng.uniform(0.1, 0.3))
    center = np.array([*rng.uniform(-2, 2, 2), 0.0])
    u = np.zeros(3)
    u[axis] = sign
    target = CapsuleProxy([center - half * u], [center + half * u], r)
    frac = float(rng.uniform(0.02, 0.98))
    edge = -half - r + frac * (2 * half + 2 * r)  # axial coordinate of the slab edge
    height = 200.0
    cam = center + [0.0, 0.0, height]
    # slab at z in [5, 6]: the ray to a point crosses its top at axial coordinate s * (height - 6) / height
    s_edge = edge * (height - 6) / height
    lo = np.array([-1e3, -1e3, 5.0])
    hi = np.array([1e3, 1e3, 6.0])
    if sign > 0:
        hi[axis] = center[axis] + s_edge
    else:
        lo[axis] = center[axis] - s_edge
    return cam, target, Box3(tuple(lo), tuple(hi)), frac


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def test_c5_occlusion_estimator(acceptance):
    rng = np.random.default_rng(505)
    within = 0
    sanity = 0.0
    for k in range(50):
        cam, target, slab, frac = _slab_scene(rng)
        est = occlusion_ratio(cam, target, [], [slab], 256, np.random.default_rng([505, k, 0]))
        oracle = occlusion_ratio(cam, target, [], [slab], 16384, np.random.default_rng([505, k, 1]))
        within += abs(est - oracle) <= 0.05
        sanity = max(sanity, abs(oracle - frac))

    monotone = increased = 0
    def blocker(cam, mid):
        # random capsule or box somewhere along the camera-to-target sight line
        c = cam + rng.uniform(0.2, 0.8) * (mid - cam) + rng.normal(scale=0.3, size=3)
        if rng.uniform() < 0.5:
            half = rng.normal(scale=0.4, size=3)
            return CapsuleProxy([c - half], [c + half], float(rng.uniform(0.05, 0.3))), None
        size = rng.uniform(0.1, 0.8, 3)
        return None, Box3(tuple(c - size / 2), tuple(c + size / 2))

    for k in range(200):
        tgt_a = rng.normal(size=3)
        target = CapsuleProxy([tgt_a], [tgt_a + rng.normal(scale=0.5, size=3)], float(rng.uniform(0.05, 0.3)))
        mid = (target.a[0] + target.b[0]) / 2
        cam = mid + _unit(rng) * rng.uniform(3, 8)
        caps, boxes = [], []
        for _ in range(int(rng.integers(0, 3))):
            c, bx = blocker(cam, mid)
            caps += [c] if c is not None else []
            boxes += [bx] if bx is not None else []
        before = occlusion_ratio(cam, target, caps, boxes, 16384, np.random.default_rng([5050, k]))
        c, bx = blocker(cam, mid)
        extra_caps = caps + ([c] if c is not None else [])
        extra_boxes = boxes + ([bx] if bx is not None else [])
        after = occlusion_ratio(cam, target, extra_caps, extra_boxes, 16384, np.random.default_rng([5050, k]))
        monotone += after >= before
        increased += after > before
    ok = within >= 48 and monotone == 200 and sanity < 0.02
    detail = f"256-ray within 0.05 of oracle in {within}/50 scenes, oracle vs analytic max gap {sanity:.3f}, monotone {monotone}/200 ({increased} strictly increased)"
    assert acceptance(5, "occlusion estimator", ok, detail)


# -- 6 -------------------------------------------------------------------------


def test_c6_fitting_recovery(acceptance):
    full = builtin_variant("full")
    rng = np.random.default_rng(606)
    beta_err = mpjpe = 0.0
    limit = math.radians(30)
    for _ in range(100):
        beta_true = rng.uniform(-2, 2, full.n_shapes)
        rots = tuple(Rotation.from_axis_angle(rng.normal(size=3), float(rng.uniform(-limit, limit))) for _ in range(full.n_joints))
        theta = PoseFrame(rng.normal(scale=0.5, size=3), rots)
        beta_fit = fit_shape_tpose(full, beta_true, full)
        beta_err = max(beta_err, float(np.max(np.abs(beta_fit - beta_true))))
        fit = fit_pose_frame(full, beta_fit, posed_joints(full, beta_true, theta))
        mpjpe = max(mpjpe, fit.mpjpe)

    jac_err = 0.0
    h = 1e-6
    for probe in range(1000):
        beta = rng.normal(size=full.n_shapes)
        pose, mats = random_pose(rng, full.n_joints, 1.5)
        mats = np.stack(mats)
        if probe % 5 == 0:
            col = int(rng.integers(full.n_shapes))
            e = np.zeros(full.n_shapes)
            e[col] = h
            fd = (posed_joints(full, beta + e, pose) - posed_joints(full, beta - e, pose)) / (2 * h)
            an = beta_jacobian(full, beta, pose)[:, :, col]
        else:
            skel = shaped_skeleton(full, beta)
            n = len(skel)
            col = int(rng.integers(3 + 3 * n))
            delta = np.zeros(3 + 3 * n)
            delta[col] = h

            def perturbed(sign):
                d = sign * delta
                m = mats.copy()
                j = (col - 3) // 3
                if col >= 3:
                    m[j] = rodrigues(delta[3 + 3 * j:6 + 3 * j], sign * h) @ mats[j]
                return pose_jacobian(skel, pose.root_translation + d[:3], m)[0]

            fd = (perturbed(1) - perturbed(-1)) / (2 * h)
            an = pose_jacobian(skel, pose.root_translation, mats)[1][:, :, col]
        jac_err = max(jac_err, float(np.max(np.abs(an - fd))) / max(float(np.max(np.abs(fd))), 1e-3))
    ok = beta_err < 1e-6 and mpjpe < 1e-3 and jac_err < 1e-4
    detail = f"max beta error {beta_err:.1e}, max MPJPE {mpjpe:.1e}, max Jacobian rel error {jac_err:.1e} over 1000 probes"
    assert acceptance(6, "two-stage fitting recovery", ok, detail)


# -- 7 -------------------------------------------------------------------------


def _oracle_maps(cam: CameraRig, capsules, owners, boxes, radius, width, height):
    """Per-pixel ray cast rebuilt from the pinhole model with bounding-sphere culling."""
    k = cam.intrinsics
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    d_cam = np.stack([(cols + 0.5 - k.cx) / k.focal, -(rows + 0.5 - k.cy) / k.focal, -np.ones((height, width))], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(d_cam, axis=1)
    d = (d_cam / norm[:, None]) @ cam.pose.rotation.as_matrix().T
    a, b = capsules
    center = (a + b) / 2
    reach = np.linalg.norm(b - a, axis=1) / 2 + radius + 1e-6
    rel = center - cam.position
    along = d @ rel.T
    perp2 = np.sum(rel * rel, axis=1)[None] - along**2
    ri, ci = np.nonzero(perp2 <= reach[None] ** 2)
    t_all = np.full((len(d), len(a)), np.inf)
    t_all[ri, ci] = ray_capsule_hits(cam.position[None], d[ri], a[ci], b[ci], radius)
    first = np.argmin(t_all, axis=1)
    t_best = t_all[np.arange(len(d)), first]
    t_box = np.full(len(d), np.inf)
    for bx in boxes:
        t_box = np.minimum(t_box, ray_box_hits(cam.position[None], d, bx.lo, bx.hi))
    fg = np.isfinite(t_best) & (t_best < t_box)
    instance = np.where(fg, owners[first], 0).reshape(height, width)
    depth = np.where(fg, t_best / norm, np.inf).reshape(height, width)
    return instance, depth


def test_c7_annotation_coherence(acceptance, tmp_path):
    # frame_stride 30 keeps every 30th frame (one per second) to bound runtime
    cfg = RunConfig(seed=707, sequences=20, out=str(tmp_path), resolution=(256, 256), frame_stride=30)
    summary = run_generate(cfg)
    res = load_resources(cfg)
    parents = res.source.skeleton.parents
    bones = [i for i, p in enumerate(parents) if p is not None]
    scenes = {s.name: s for s in res.scenes}
    ok_seqs = [s["sequence_id"] for s in summary if s["status"] == "ok"]
    records = reproj_bad = bbox_bad = 0
    maps = pixels = pixel_bad = missing = 0
    depth_err = 0.0
    for k in ok_seqs:
        seq = tmp_path / f"seq_{k:05d}"
        manifest = json.loads((seq / "manifest.json").read_text())
        cams = [CameraRig.from_dict(d) for d in json.loads((seq / "cameras.json").read_text())]
        joints = {}
        for rec in read_ndjson(seq / "annotations.ndjson"):
            records += 1
            reproj_bad += reproject_record(cams[rec["camera_id"]], rec) != rec["keypoints_2d"]
            box = rec["bbox"]
            for u, v, vis in rec["keypoints_2d"]:
                if vis and not (box["x_min"] <= u <= box["x_max"] and box["y_min"] <= v <= box["y_max"]):
                    bbox_bad += 1
            joints[(rec["frame_index"], rec["actor_id"])] = np.asarray(rec["joints_3d"])
        placed = [p["actor_id"] for p in manifest["placements"]]
        boxes = object_volumes(scenes[manifest["scene"]])
        for mask_path in sorted(seq.glob("cam*/frame*_mask.pgm")):
            c, f = int(mask_path.parent.name[3:]), int(mask_path.name[5:9])
            mask = read_pgm(mask_path)
            depth = read_pfm(Path(str(mask_path).replace("_mask.pgm", "_depth.pfm")))
            if any((f, a) not in joints for a in placed):
                missing += 1
                continue
            a = np.concatenate([joints[(f, act)][[parents[i] for i in bones]] for act in placed])
            b = np.concatenate([joints[(f, act)][bones] for act in placed])
            owners = np.repeat([act + 1 for act in placed], len(bones))
            inst, dep = _oracle_maps(cams[c], (a, b), owners, boxes, cfg.capsule_radius, *mask.shape[::-1])
            fg = inst > 0
            maps += 1
            pixels += mask.size
            pixel_bad += int(np.count_nonzero(inst != mask)) + int(np.count_nonzero((depth < 1e29) != fg))
            if fg.any():
                depth_err = max(depth_err, float(np.max(np.abs(depth[fg] - dep[fg]) / dep[fg])))
    ok = len(ok_seqs) == 20 and records > 0 and reproj_bad == 0 and bbox_bad == 0 and maps > 0 and missing == 0 and pixel_bad == 0 and depth_err < 1e-6
    detail = (
        f"{len(ok_seqs)}/20 sequences ok, {records} records, {reproj_bad} reprojection mismatches, {bbox_bad} bbox misses, "
        f"{maps} maps / {pixels} pixels with {pixel_bad} mismatches, {missing} maps without joints, depth rel error {depth_err:.1e}"
    )
    assert acceptance(7, "annotation coherence at 256x256", ok, detail)


# -- 8 -------------------------------------------------------------------------


def test_c8_sampling_ranges(acceptance):
    cfg = RunConfig(seed=808)
    res = load_resources(cfg)
    violations = 0
    for k in range(10_000):
        spec = sample_spec(cfg, res, k)
        violations += (not 1 <= len(spec.actors) <= 4) + (not 2.0 <= spec.duration <= 10.0)
    assert acceptance(8, "sequence spec ranges", violations == 0, f"{violations} violations over 10000 specs")


# -- 9 -------------------------------------------------------------------------


@pytest.mark.slow
def test_c9_end_to_end_determinism(acceptance, tmp_path):
    times = {}
    for w in (1, 8):
        start = time.perf_counter()
        run_generate(RunConfig(seed=909, sequences=10, out=str(tmp_path / f"w{w}"), resolution=(64, 64), workers=w))
        times[w] = time.perf_counter() - start
    one, eight = _tree_digest(tmp_path / "w1"), _tree_digest(tmp_path / "w8")
    ok = one == eight and len(one) > 10 and max(times.values()) < 120.0
    detail = f"{len(one)} files, identical {one == eight}, 1 worker {times[1]:.1f} s, 8 workers {times[8]:.1f} s"
    assert acceptance(9, "end-to-end determinism across worker counts", ok, detail)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
