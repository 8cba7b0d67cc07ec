"""Batch orchestration: sample, retarget, place, film, fit and emit one directory per sequence."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotation import (
    AnnotationRecord,
    bbox_from_keypoints,
    filter_occluded,
    keypoints_2d,
    read_ndjson,
    render_proxy_maps,
    round9,
    write_ndjson,
    write_pfm,
    write_pgm,
)
from .assets import AssetCatalog, SequenceSpec, sample_sequence_spec
from .body import LbsBodyModel, builtin_variant, layout_for, posed_joints, shaped_skeleton
from .camera import (
    CameraConstraints,
    CameraIntrinsics,
    CameraRig,
    CapsuleProxy,
    object_volumes,
    occlusion_ratio,
    place_cameras,
)
from .fitting import FitConfig, fit_pose_sequence, fit_shape_tpose, name_correspondence, shape_residual
from .kinematics import PoseFrame, Rotation, Skeleton, Transform, fk_joint_positions
from .placement import (
    Footprint,
    Heightfield,
    PlacementConfig,
    SceneLayout,
    joints_footprint,
    place_actor,
    swept_footprint,
)
from .retarget import MotionClip, bone_map_by_name, loop_to_length, retarget_clip, synthetic_clip, to_world_pose

logger = logging.getLogger(__name__)

CAMERA_PROBE_FRAMES = 8
ACTOR_MARGIN = 0.1


class ConfigError(ValueError):
    pass


class SequenceError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    sequences: int = 1
    out: str = "out"
    scenes: list[str] = field(default_factory=list)
    catalog: str | None = None
    source_model: str = "full"
    fit_model: str = "reduced"
    motion_skeleton: str | None = None
    motions: list[str] = field(default_factory=list)
    library_size: int = 8
    library_seed: int = 7
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    camera: CameraConstraints = field(default_factory=CameraConstraints)
    fit: FitConfig = field(default_factory=FitConfig)
    resolution: tuple[int, int] = (256, 256)
    fov_deg: float = 60.0
    fps: float = 30.0
    n_cameras: int = 4
    frame_stride: int = 1
    duration_range: tuple[float, float] = (2.0, 10.0)
    capsule_radius: float = 0.08
    workers: int = 1

    def __post_init__(self):
        if self.sequences < 1:
            raise ConfigError("sequence count must be >= 1")
        if self.workers < 1:
            raise ConfigError("worker count must be >= 1")
        if self.frame_stride < 1:
            raise ConfigError("frame_stride must be >= 1")
        if self.n_cameras < 1:
            raise ConfigError("n_cameras must be >= 1")
        if self.library_size < 1 and not self.motions:
            raise ConfigError("motion library is empty")
        if not (0 < self.fov_deg < 180):
            raise ConfigError("fov_deg must lie in (0, 180)")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        w, h = self.resolution
        if w < 1 or h < 1:
            raise ConfigError("resolution must be positive")
        if self.capsule_radius <= 0:
            raise ConfigError("capsule_radius must be positive")
        for p in [*self.scenes, *self.motions, self.catalog, self.motion_skeleton, self.source_model, self.fit_model]:
            if p is not None and not _is_builtin_model(p) and not Path(p).is_file():
                raise ConfigError(f"file not found: {p}")

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def rel(p):
            if p is None or _is_builtin_model(p) or base is None:
                return p
            return str((base / p)) if not Path(p).is_absolute() else p

        try:
            for k in ("scenes", "motions"):
                if k in d:
                    d[k] = [rel(p) for p in d[k]]
            for k in ("catalog", "motion_skeleton", "source_model", "fit_model"):
                if k in d:
                    d[k] = rel(d[k])
            if "placement" in d:
                d["placement"] = PlacementConfig.from_dict(d["placement"])
            if "camera" in d:
                d["camera"] = CameraConstraints.from_dict(d["camera"])
            if "fit" in d:
                d["fit"] = FitConfig.from_dict(d["fit"])
            for k in ("resolution", "duration_range"):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d, path.parent)

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.resolution
        return CameraIntrinsics(math.radians(self.fov_deg), int(w), int(h))


def _is_builtin_model(name: str) -> bool:
    return name in ("full", "reduced")


# -- built-in resources -----------------------------------------------------------


def default_scenes() -> list[SceneLayout]:
    rooms = [
        SceneLayout((-8.0, -8.0, 8.0, 8.0), [Footprint(3.0, 2.5, 1.2, 0.8, 0.9), Footprint(-4.0, -3.0, 2.0, 1.0, 1.8)], name="courtyard"),
        SceneLayout(
            (-6.0, -6.0, 6.0, 6.0),
            [Footprint(0.0, 4.5, 3.0, 0.6, 1.0), Footprint(-3.5, 0.0, 0.8, 0.8, 2.2), Footprint(3.5, -2.0, 1.0, 2.0, 0.8)],
            name="hall",
        ),
    ]
    xs = np.linspace(0.0, 1.0, 5)
    hills = Heightfield((-10.0, -10.0), 5.0, 0.4 * np.outer(xs, xs))
    rooms.append(SceneLayout((-10.0, -10.0, 10.0, 10.0), [Footprint(-5.0, 5.0, 1.5, 1.5, 2.5)], heightfield=hills, name="slope"))
    return rooms


def default_motion_skeleton() -> Skeleton:
    """22-bone source skeleton (no hands), about 8% taller than the body layout."""
    names, parents, positions = layout_for(22)
    return Skeleton.from_joint_positions(names, parents, positions * 1.08)


def load_model(name: str) -> LbsBodyModel:
    return builtin_variant(name) if _is_builtin_model(name) else LbsBodyModel.load(name)


@dataclass
class Resources:
    catalog: AssetCatalog
    scenes: list[SceneLayout]
    source: LbsBodyModel
    fit: LbsBodyModel
    motion_skeleton: Skeleton
    library: list[MotionClip]


def load_resources(cfg: RunConfig) -> Resources:
    try:
        catalog = AssetCatalog.load(cfg.catalog) if cfg.catalog else AssetCatalog()
        scenes = [SceneLayout.load(p) for p in cfg.scenes] if cfg.scenes else default_scenes()
        source = load_model(cfg.source_model)
        fit = load_model(cfg.fit_model)
        skel = Skeleton.load(cfg.motion_skeleton) if cfg.motion_skeleton else default_motion_skeleton()
        if cfg.motions:
            library = [MotionClip.load(p) for p in cfg.motions]
        else:
            rng = np.random.default_rng(cfg.library_seed)
            library = [synthetic_clip(skel, rng, n_frames=int(round(10 * cfg.fps)) + 1, fps=cfg.fps) for _ in range(cfg.library_size)]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot load resources: {exc}") from exc
    for clip in library:
        if clip.n_bones != len(skel):
            raise ConfigError("motion clip does not match the motion skeleton")
    if not scenes:
        raise ConfigError("scene list is empty")
    if not name_correspondence(source.skeleton, fit.skeleton):
        raise ConfigError("source and fit models share no joint names")
    return Resources(catalog, scenes, source, fit, skel, library)


# -- one sequence -------------------------------------------------------------------


def sequence_rng(seed: int, k: int) -> np.random.Generator:
    """Independent stream for sequence ``k``; depends only on (seed, k)."""
    return np.random.default_rng([seed, k])


def sample_spec(cfg: RunConfig, res: Resources, k: int, rng: np.random.Generator | None = None) -> SequenceSpec:
    rng = rng or sequence_rng(cfg.seed, k)
    return sample_sequence_spec(
        rng,
        res.catalog,
        len(res.library),
        len(res.scenes),
        n_shapes=res.source.n_shapes,
        fps=cfg.fps,
        n_cameras=cfg.n_cameras,
        duration_range=cfg.duration_range,
    )


def _yaw(angle: float) -> Rotation:
    return Rotation.from_axis_angle((0.0, 0.0, 1.0), angle)


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.vectorize(round9, otypes=[float])(a)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pose_dict(p: PoseFrame) -> dict:
    return {
        "root_translation": [round9(c) for c in p.root_translation],
        "local_rotations": [[round9(c) for c in r.as_tuple()] for r in p.local_rotations],
    }


@dataclass
class _Actor:
    actor_id: int
    beta: np.ndarray
    skeleton: Skeleton
    world: list[PoseFrame]
    joints: np.ndarray  # (F, J, 3) quantized world joints


def _build_actors(cfg: RunConfig, res: Resources, spec: SequenceSpec, scene: SceneLayout, rng, manifest: dict) -> list[_Actor]:
    actors = []
    for a, (clip_id, beta) in enumerate(zip(spec.clip_ids, spec.betas)):
        beta = np.asarray(beta, dtype=float)
        skel = shaped_skeleton(res.source, beta)
        clip = loop_to_length(res.library[clip_id], spec.n_frames)
        motion = retarget_clip(res.motion_skeleton, clip, skel, bone_map_by_name(res.motion_skeleton, skel))
        yaw = float(rng.uniform(0.0, 2 * math.pi))
        R = _yaw(yaw)
        local_joints = [fk_joint_positions(skel, f) @ R.as_matrix().T for f in motion.frames]
        q = swept_footprint(joints_footprint(j, ACTOR_MARGIN) for j in local_joints)
        spot = place_actor(scene, q.l, q.w, cfg.placement, rng)
        if spot is None:
            manifest["dropped_actors"].append(a)
            continue
        x, y, z = spot
        placement = Transform(R, (x - q.x, y - q.y, z))
        world = [to_world_pose(beta, f, placement, skel.offsets[0]).theta_w for f in motion.frames]
        joints = np.stack([posed_joints(res.source, beta, w) for w in world])
        actors.append(_Actor(a, beta, skel, world, _quantize(joints)))
        manifest["placements"].append(
            {"actor_id": a, "yaw": round9(yaw), "translation": [round9(c) for c in placement.translation], "footprint": scene.placed_actors[-1].to_dict()}
        )
    return actors


def _fit_actor(cfg: RunConfig, res: Resources, actor: _Actor, frames: list[int]):
    pairs = name_correspondence(res.source.skeleton, res.fit.skeleton)
    src_ids = [i for i, _ in pairs]
    fit_ids = [j for _, j in pairs]
    beta_fit = fit_shape_tpose(res.source, actor.beta, res.fit, cfg.fit, joint_map=pairs)
    fit_names = res.fit.skeleton.names
    src_index = {n: i for i, n in enumerate(actor.skeleton.names)}
    fit_root = shaped_skeleton(res.fit, beta_fit).offsets[0]
    track, inits = [], []
    for f in frames:
        w = actor.world[f]
        target = actor.joints[f][src_ids]
        rots = tuple(w.local_rotations[src_index[n]] if n in src_index else Rotation.identity() for n in fit_names)
        root = target[fit_ids.index(0)] - fit_root if 0 in fit_ids else w.root_translation
        track.append(target)
        inits.append(PoseFrame(root, rots))
    fits = fit_pose_sequence(res.fit, beta_fit, track, cfg.fit, fit_ids, inits)
    return beta_fit, shape_residual(res.source, actor.beta, res.fit, beta_fit, pairs), fits


def _proxy(actor: _Actor, f: int, radius: float) -> CapsuleProxy:
    return CapsuleProxy.from_joints(actor.joints[f], actor.skeleton.parents, radius)


def generate_sequence(cfg: RunConfig, res: Resources, k: int, seq_dir: Path) -> dict:
    """Produce every file of sequence ``k`` in ``seq_dir``; returns the manifest."""
    rng = sequence_rng(cfg.seed, k)
    spec = sample_spec(cfg, res, k, rng)
    scene = res.scenes[spec.scene_id].fresh()
    manifest: dict = {"sequence_id": k, "status": "ok", "spec": spec.to_dict(), "scene": scene.name, "placements": [], "dropped_actors": []}

    actors = _build_actors(cfg, res, spec, scene, rng, manifest)
    if not actors:
        raise SequenceError("no actor could be placed")

    n = spec.n_frames
    probe = sorted({int(round(i * (n - 1) / (CAMERA_PROBE_FRAMES - 1))) for i in range(CAMERA_PROBE_FRAMES)})
    proxies = [[_proxy(a, f, cfg.capsule_radius) for f in probe] for a in actors]
    roots = [a.joints[probe, 0].mean(axis=0) for a in actors]
    intr = cfg.intrinsics()
    placed = place_cameras(scene, proxies, spec.n_cameras, cfg.camera, intr, rng, roots)
    manifest["cameras"] = placed.diagnostic()
    if not placed.cameras:
        raise SequenceError("no camera satisfied the constraints")
    # round-trip so emitted keypoints are reproducible from cameras.json
    cam_dicts = [json.loads(json.dumps(c.to_dict())) for c in placed.cameras]
    cameras = [CameraRig.from_dict(d) for d in cam_dicts]

    frames = list(range(0, n, cfg.frame_stride))
    fits = {}
    manifest["fit"] = []
    for a in actors:
        beta_fit, shape_err, per_frame = _fit_actor(cfg, res, a, frames)
        fits[a.actor_id] = (beta_fit, per_frame)
        errs = [p.mpjpe for p in per_frame]
        manifest["fit"].append(
            {
                "actor_id": a.actor_id,
                "beta": [round9(b) for b in beta_fit],
                "shape_residual": round9(shape_err),
                "mean_mpjpe": round9(float(np.mean(errs))),
                "max_mpjpe": round9(float(np.max(errs))),
                "converged": all(p.converged for p in per_frame),
            }
        )

    boxes = object_volumes(scene)
    ids = [a.actor_id + 1 for a in actors]
    records: list[AnnotationRecord] = []
    seq_dir.mkdir(parents=True, exist_ok=True)
    for c in range(len(cameras)):
        (seq_dir / f"cam{c}").mkdir(exist_ok=True)
    for f in frames:
        frame_proxies = [_proxy(a, f, cfg.capsule_radius) for a in actors]
        for c, cam in enumerate(cameras):
            maps = render_proxy_maps(cam, frame_proxies, boxes, cfg.resolution, ids)
            write_pgm(seq_dir / f"cam{c}" / f"frame{f:04d}_mask.pgm", maps.instance)
            write_pfm(seq_dir / f"cam{c}" / f"frame{f:04d}_depth.pfm", maps.depth)
        for i, a in enumerate(actors):
            blockers = frame_proxies[:i] + frame_proxies[i + 1 :]
            for c, cam in enumerate(cameras):
                kp = keypoints_2d(cam, a.joints[f])
                occ_rng = np.random.default_rng([cfg.seed, k, f, a.actor_id, c])
                occ = occlusion_ratio(cam.position, frame_proxies[i], blockers, boxes, cfg.camera.n_rays, occ_rng)
                records.append(
                    AnnotationRecord(k, f, a.actor_id, c, a.beta, a.world[f], a.joints[f], kp, bbox_from_keypoints(kp, 0.05, *cfg.resolution), occ)
                )
    kept = filter_occluded(records, cfg.camera.max_occlusion)
    manifest["records"] = {"total": len(records), "kept": len(kept)}

    write_ndjson(seq_dir / "annotations.ndjson", kept)
    (seq_dir / "cameras.json").write_text(json.dumps(cam_dicts, indent=1) + "\n")
    with open(seq_dir / "fitted.ndjson", "w") as fh:
        for fi, f in enumerate(frames):
            for a in actors:
                beta_fit, per_frame = fits[a.actor_id]
                p = per_frame[fi]
                row = {
                    "frame_index": f,
                    "actor_id": a.actor_id,
                    "beta": [round9(b) for b in beta_fit],
                    "theta": _pose_dict(p.theta),
                    "mpjpe": round9(p.mpjpe),
                    "iterations": p.iterations,
                    "converged": p.converged,
                }
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return manifest


def _digest_tree(seq_dir: Path) -> dict:
    files = sorted(p for p in seq_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    return {p.relative_to(seq_dir).as_posix(): _sha256(p) for p in files}


def write_sequence(cfg: RunConfig, res: Resources, k: int, out: Path) -> dict:
    """Generate sequence ``k`` into a scratch directory and move it into place.

    A failing sequence leaves only its manifest with the error message.
    """
    final = out / f"seq_{k:05d}"
    tmp = out / f".seq_{k:05d}.partial"
    for d in (final, tmp):
        if d.exists():
            shutil.rmtree(d)
    try:
        manifest = generate_sequence(cfg, res, k, tmp)
    except Exception as exc:  # noqa: BLE001 - isolate any per-sequence failure
        logger.warning("sequence %d failed: %s", k, exc)
        if tmp.exists():
            shutil.rmtree(tmp)
        manifest = {"sequence_id": k, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        tmp.mkdir(parents=True)
    manifest["files"] = _digest_tree(tmp)
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.rename(final)
    return {"sequence_id": k, "status": manifest["status"]}


_WORKER: dict = {}


def _worker_init(cfg: RunConfig):
    _WORKER["cfg"] = cfg
    _WORKER["res"] = load_resources(cfg)


def _worker_run(k: int) -> dict:
    cfg = _WORKER["cfg"]
    return write_sequence(cfg, _WORKER["res"], k, Path(cfg.out))


def run_generate(cfg: RunConfig) -> list[dict]:
    """Generate ``cfg.sequences`` sequences; output bytes do not depend on the worker count."""
    res = load_resources(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ks = range(cfg.sequences)
    if cfg.workers == 1:
        summary = [write_sequence(cfg, res, k, out) for k in ks]
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=(cfg,)) as pool:
            summary = list(pool.map(_worker_run, ks))
    run = {"seed": cfg.seed, "sequences": cfg.sequences, "failed": [s["sequence_id"] for s in summary if s["status"] != "ok"]}
    (out / "run.json").write_text(json.dumps(run, indent=1) + "\n")
    return summary


# -- reports -----------------------------------------------------------------------


def validate_scene(path) -> list[str]:
    """Named violations of a scene file; an empty list means the scene is usable."""
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scene {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"scene {path} must hold a JSON object")
    out = []
    bounds = d.get("bounds")
    if not (isinstance(bounds, list) and len(bounds) == 4 and all(isinstance(b, (int, float)) for b in bounds)):
        out.append("schema: bounds must be [xmin, ymin, xmax, ymax]")
        bounds = None
    elif not all(math.isfinite(b) for b in bounds) or not (bounds[0] < bounds[2] and bounds[1] < bounds[3]):
        out.append("bounds: empty or non-finite extent")
        bounds = None
    for i, o in enumerate(d.get("objects", [])):
        try:
            fp = Footprint.from_dict(o)
        except (KeyError, TypeError, ValueError) as exc:
            out.append(f"object[{i}]: schema ({exc})")
            continue
        if not all(math.isfinite(v) for v in (fp.x, fp.y, fp.l, fp.w, fp.h)):
            out.append(f"object[{i}]: non-finite footprint")
        elif bounds and not (bounds[0] <= fp.xmin and fp.xmax <= bounds[2] and bounds[1] <= fp.ymin and fp.ymax <= bounds[3]):
            out.append(f"object[{i}]: footprint outside bounds")
    hf = d.get("heightfield", {"constant": 0.0})
    try:
        field_ = Heightfield.from_dict(hf)
    except (KeyError, TypeError, ValueError) as exc:
        out.append(f"heightfield: schema ({exc})")
    else:
        vals = np.asarray(field_.constant if field_.values is None else field_.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            out.append("heightfield: non-finite height")
    return out


def fit_report(seq_dir) -> dict:
    """Mean and max per-frame MPJPE of the annotation-model fit in one sequence directory."""
    seq_dir = Path(seq_dir)
    path = seq_dir / "fitted.ndjson"
    if not path.is_file():
        raise FileNotFoundError(f"no fit results in {seq_dir}")
    rows = read_ndjson(path)
    if not rows:
        raise FileNotFoundError(f"fit results in {seq_dir} are empty")
    errs = np.array([r["mpjpe"] for r in rows], dtype=float)
    return {
        "frames": len(rows),
        "mean_mpjpe": float(errs.mean()),
        "max_mpjpe": float(errs.max()),
        "converged": all(r["converged"] for r in rows),
    }
