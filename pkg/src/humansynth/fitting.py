"""Two-stage parameter refitting: shape at T-pose, then pose with shape fixed."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .body import LbsBodyModel, rest_joints, shaped_skeleton
from .kinematics import PoseFrame, Rotation, Skeleton, Transform

SHAPE_DAMPING = 1e-8


class FittingError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 200
    convergence_tol: float = 1e-10
    step_damping: float = 1e-3
    joint_weight: float = 1.0
    vertex_weight: float = 0.1
    pose_prior_weight: float = 1e-4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FitConfig":
        return cls(**(d or {}))


@dataclass(frozen=True, eq=False)
class PoseFit:
    theta: PoseFrame
    mpjpe: float
    iterations: int
    converged: bool

    def report(self) -> dict:
        return {"residual": self.mpjpe, "iterations": self.iterations, "converged": self.converged}


def name_correspondence(a: Skeleton, b: Skeleton) -> list[tuple[int, int]]:
    """Index pairs ``(i_a, i_b)`` of joints sharing a name."""
    idx = {n: i for i, n in enumerate(b.names)}
    return [(i, idx[n]) for i, n in enumerate(a.names) if n in idx]


# -- rotation helpers -------------------------------------------------------


def _skew_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _exp_batch(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1)[..., None, None]
    K = _skew_batch(w)
    KK = K @ K
    small = th < 1e-8
    safe = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1 - np.cos(safe)) / (safe * safe))
    return np.eye(3) + a * K + b * KK


def _log_batch(R: np.ndarray) -> np.ndarray:
    """Rotation vectors of a stack of rotation matrices via Shepperd's quaternion extraction."""
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    pick = np.argmax(np.stack([tr, R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]], axis=-1), axis=-1)
    q = np.empty(R.shape[:-2] + (4,))
    for k in range(4):
        m = pick == k
        if not np.any(m):
            continue
        r = R[m]
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s, (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], -1)
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2])
            q[m] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s, (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], -1)
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2])
            q[m] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s, 0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], -1)
        else:
            s = 2.0 * np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1])
            q[m] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s, (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], -1)
    q *= np.where(q[..., :1] < 0, -1.0, 1.0)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    safe = np.where(n > 0, n, 1.0)
    scale = np.where(n > 1e-12, 2.0 * np.arctan2(n, q[..., 0]) / safe, 2.0 / q[..., 0])
    return v * scale[..., None]


def _left_jacobian_inv_batch(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1)[..., None, None]
    K = _skew_batch(w)
    small = th < 1e-6
    safe = np.where(small, 1.0, th)
    c = np.where(small, 1.0 / 12.0, 1.0 / (safe * safe) - (1 + np.cos(safe)) / (2 * safe * np.sin(safe)))
    return np.eye(3) - 0.5 * K + c * (K @ K)


# -- forward map and Jacobians ----------------------------------------------


def _fk(skel: Skeleton, root_translation: np.ndarray, local_mats: np.ndarray):
    n = len(skel)
    glob = np.empty((n, 3, 3))
    pos = np.empty((n, 3))
    offs = skel.offsets
    for i, p in enumerate(skel.parents):
        if p is None:
            glob[i] = local_mats[i]
            pos[i] = root_translation + offs[i]
        else:
            glob[i] = glob[p] @ local_mats[i]
            pos[i] = pos[p] + glob[p] @ offs[i]
    return glob, pos


def pose_jacobian(skel: Skeleton, root_translation, local_mats, desc: np.ndarray | None = None):
    """Joint positions and their Jacobian w.r.t. ``[dT, delta_0, ..., delta_{J-1}]``.

    Bone i is perturbed as ``R_i <- exp(delta_i) R_i``. Returns ``(pos (J,3), jac (J,3,3+3J))``.
    """
    n = len(skel)
    if desc is None:
        desc = skel.descendants_mask()
    glob, pos = _fk(skel, np.asarray(root_translation, dtype=float), np.asarray(local_mats, dtype=float))
    parent_glob = np.stack([np.eye(3) if p is None else glob[p] for p in skel.parents])
    jac = np.zeros((n, 3, 3 + 3 * n))
    jac[:, :, :3] = np.eye(3)
    lever = pos[None, :, :] - pos[:, None, :]  # [i, d] = p_d - p_i
    blocks = -np.einsum("idab,ibc->idac", _skew_batch(lever), parent_glob)
    blocks[~desc] = 0.0
    jac[:, :, 3:] = blocks.transpose(1, 2, 0, 3).reshape(n, 3, 3 * n)
    return pos, jac


def beta_jacobian(model: LbsBodyModel, beta, pose: PoseFrame) -> np.ndarray:
    """``d posed_joints / d beta``, shape ``(J, 3, K)``; exact since joints are linear in beta."""
    skel = shaped_skeleton(model, beta)
    glob, _ = _fk(skel, pose.root_translation, np.stack([r.as_matrix() for r in pose.local_rotations]))
    d_rest = np.einsum("jv,kvc->kjc", model.joint_regressor, model.shape_blendshapes)  # (K, J, 3)
    out = np.zeros((model.n_joints, 3, model.n_shapes))
    for i, p in enumerate(skel.parents):
        if p is None:
            out[i] = d_rest[:, i, :].T
        else:
            out[i] = out[p] + glob[p] @ (d_rest[:, i, :] - d_rest[:, p, :]).T
    return out


# -- stage 1: shape -----------------------------------------------------------


def _shape_system(model: LbsBodyModel, joint_ids, vertex_ids):
    """Affine map beta -> stacked (joints, vertices) of ``model`` at T-pose."""
    S = model.shape_blendshapes
    jA = np.einsum("jv,kvc->jck", model.joint_regressor, S)[joint_ids]
    jb = rest_joints(model, np.zeros(model.n_shapes))[joint_ids]
    vA = S.transpose(1, 2, 0)[vertex_ids]
    vb = model.template_vertices[vertex_ids]
    return jA, jb, vA, vb


def fit_shape_tpose(
    target_model: LbsBodyModel,
    target_beta,
    fit_model: LbsBodyModel,
    cfg: FitConfig | None = None,
    joint_map: list[tuple[int, int]] | None = None,
    vertex_map: list[tuple[int, int]] | None = None,
    placement: Transform | None = None,
) -> np.ndarray:
    """Closed-form shape fit at T-pose.

    ``joint_map`` pairs (target joint, fit joint), defaulting to name matches;
    ``vertex_map`` optionally adds corresponding-vertex rows. ``placement``
    applies the same rigid transform to both bodies before fitting.
    """
    cfg = cfg or FitConfig()
    target_beta = np.asarray(target_beta, dtype=float)
    if target_beta.shape != (target_model.n_shapes,):
        raise FittingError("target beta does not match the target model")
    if joint_map is None:
        joint_map = name_correspondence(target_model.skeleton, fit_model.skeleton)
    if not joint_map:
        raise FittingError("no joint correspondences")
    vertex_map = vertex_map or []
    tj = [a for a, _ in joint_map]
    fj = [b for _, b in joint_map]
    tv = [a for a, _ in vertex_map]
    fv = [b for _, b in vertex_map]

    y_joints = rest_joints(target_model, target_beta)[tj]
    y_verts = (target_model.template_vertices + np.tensordot(target_beta, target_model.shape_blendshapes, axes=1))[tv]
    jA, jb, vA, vb = _shape_system(fit_model, fj, fv)
    if placement is not None:
        R, t = placement.rotation.as_matrix(), placement.translation
        y_joints, y_verts = y_joints @ R.T + t, y_verts @ R.T + t
        jb, vb = jb @ R.T + t, vb @ R.T + t
        jA = np.einsum("ab,jbk->jak", R, jA)
        vA = np.einsum("ab,jbk->jak", R, vA)

    rows, rhs = [], []
    wj = math.sqrt(cfg.joint_weight)
    rows.append(wj * jA.reshape(-1, fit_model.n_shapes))
    rhs.append(wj * (y_joints - jb).ravel())
    if tv:
        wv = math.sqrt(cfg.vertex_weight)
        rows.append(wv * vA.reshape(-1, fit_model.n_shapes))
        rhs.append(wv * (y_verts - vb).ravel())
    A = np.concatenate(rows)
    b = np.concatenate(rhs)
    N = A.T @ A + SHAPE_DAMPING * np.eye(fit_model.n_shapes)
    if np.linalg.cond(N) > 1e14:
        raise FittingError("shape system is singular beyond damping")
    return np.linalg.solve(N, A.T @ b)


def shape_residual(target_model, target_beta, fit_model, beta, joint_map=None) -> float:
    """Mean squared distance between corresponding T-pose joints."""
    if joint_map is None:
        joint_map = name_correspondence(target_model.skeleton, fit_model.skeleton)
    a = rest_joints(target_model, target_beta)[[i for i, _ in joint_map]]
    b = rest_joints(fit_model, beta)[[j for _, j in joint_map]]
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


# -- stage 2: pose --------------------------------------------------------------


class _PoseProblem:
    def __init__(self, skel: Skeleton, targets, ids, cfg: FitConfig, anchor_mats):
        self.skel = skel
        self.targets = np.asarray(targets, dtype=float)
        self.ids = np.asarray(ids, dtype=int)
        self.cfg = cfg
        self.anchor_T = np.transpose(anchor_mats, (0, 2, 1))
        self.desc = skel.descendants_mask()
        self.n = len(skel)

    def residual(self, T, mats, with_jac: bool):
        cfg, n = self.cfg, self.n
        if with_jac:
            pos, jac = pose_jacobian(self.skel, T, mats, self.desc)
        else:
            pos = _fk(self.skel, T, mats)[1]
        sj = math.sqrt(cfg.joint_weight)
        sp = math.sqrt(cfg.pose_prior_weight)
        prior_vecs = _log_batch(mats @ self.anchor_T)
        prior = prior_vecs.ravel()
        r = np.concatenate([sj * (pos[self.ids] - self.targets).ravel(), sp * prior])
        if not with_jac:
            return r, pos, None
        J = np.zeros((r.size, 3 + 3 * n))
        J[: 3 * len(self.ids)] = sj * jac[self.ids].reshape(-1, 3 + 3 * n)
        base = 3 * len(self.ids)
        blocks = sp * _left_jacobian_inv_batch(prior_vecs)
        for i in range(n):
            J[base + 3 * i : base + 3 * i + 3, 3 + 3 * i : 6 + 3 * i] = blocks[i]
        return r, pos, J


def _mats(pose: PoseFrame) -> np.ndarray:
    return np.stack([r.as_matrix() for r in pose.local_rotations])


def _mpjpe(pos, targets, ids) -> float:
    return float(np.mean(np.linalg.norm(pos[ids] - targets, axis=1)))


def fit_pose_frame(
    fit_model: LbsBodyModel,
    beta_fixed,
    target_joints,
    init_pose: PoseFrame | None = None,
    cfg: FitConfig | None = None,
    joint_ids=None,
) -> PoseFit:
    """Damped Gauss-Newton on root translation plus per-bone axis-angle increments.

    Minimizes ``joint_weight * sum ||joint - target||^2 + pose_prior_weight *
    sum ||log(R_i R_i,init^-1)||^2``; with the default T-pose initialisation
    the prior is the plain axis-angle magnitude of each local rotation.
    ``joint_ids`` names the fit-model joints the targets belong to.
    """
    cfg = cfg or FitConfig()
    beta_fixed = np.asarray(beta_fixed, dtype=float)
    skel = shaped_skeleton(fit_model, beta_fixed)
    n = len(skel)
    ids = np.arange(n) if joint_ids is None else np.asarray(joint_ids, dtype=int)
    targets = np.asarray(target_joints, dtype=float).reshape(-1, 3)
    if len(targets) != len(ids):
        raise FittingError(f"{len(targets)} targets for {len(ids)} joints")
    if init_pose is None:
        init_pose = PoseFrame.tpose(n)
        if 0 in ids:
            root_target = targets[list(ids).index(0)]
            init_pose = PoseFrame(root_target - skel.offsets[0], init_pose.local_rotations)
    if len(init_pose) != n:
        raise FittingError("initial pose does not match the fit model")

    T = np.array(init_pose.root_translation, dtype=float)
    mats = _mats(init_pose)
    prob = _PoseProblem(skel, targets, ids, cfg, mats)
    r, pos, J = prob.residual(T, mats, True)
    f = float(r @ r)
    if not math.isfinite(f):
        raise FittingError("non-finite objective")
    mu = cfg.step_damping
    increases = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        g = J.T @ r
        if f == 0.0 or np.max(np.abs(g)) < 1e-15:
            converged = True
            it -= 1
            break
        H = J.T @ J
        step = np.linalg.solve(H + mu * np.eye(H.shape[0]), -g)
        T_new = T + step[:3]
        mats_new = _exp_batch(step[3:].reshape(n, 3)) @ mats
        r_new, _, _ = prob.residual(T_new, mats_new, False)
        f_new = float(r_new @ r_new)
        if math.isfinite(f_new) and f_new < f:
            decrease = f - f_new
            T, mats = T_new, mats_new
            r, pos, J = prob.residual(T, mats, True)
            f = float(r @ r)
            mu = max(mu / 10.0, 1e-15)
            increases = 0
            if decrease < cfg.convergence_tol:
                converged = True
                break
        else:
            if math.isfinite(f_new) and f_new - f <= cfg.convergence_tol:
                converged = True
                break
            increases += 1
            if increases >= 10:
                raise FittingError("pose fit diverged: objective increased for 10 consecutive damped steps")
            mu *= 10.0
    theta = PoseFrame(T, tuple(Rotation.from_matrix(m) for m in mats))
    return PoseFit(theta, _mpjpe(pos, targets, ids), it, converged)


def fit_pose_sequence(
    fit_model: LbsBodyModel,
    beta_fixed,
    target_joint_track,
    cfg: FitConfig | None = None,
    joint_ids=None,
    init_poses: list[PoseFrame] | None = None,
) -> list[PoseFit]:
    """Fit every frame; each frame warm-starts from the previous fit unless
    ``init_poses`` supplies a per-frame initialisation."""
    track = list(target_joint_track)
    if not track:
        raise FittingError("empty target track")
    if init_poses is not None and len(init_poses) != len(track):
        raise FittingError("init_poses must match the track length")
    out: list[PoseFit] = []
    for t, target in enumerate(track):
        if init_poses is not None:
            init = init_poses[t]
        else:
            init = out[-1].theta if out else None
        out.append(fit_pose_frame(fit_model, beta_fixed, target, init, cfg, joint_ids))
    return out
