"""System bootstrap: SfM window, camera-IMU calibration, alignment.

The pipeline mirrors the classic monocular-inertial recipe, worked in
bearing space throughout: pick a well-separated frame pair, build an
up-to-scale structure, calibrate the camera-IMU rotation from rotation
streams, estimate the gyro bias, then solve the linear visual-inertial
alignment for velocities, gravity, and metric scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    DegenerateGeometryError,
    InitializationError,
    InsufficientDataError,
    LowParallaxError,
    NotReadyError,
)
from .geometry import (
    epnp_unit,
    ransac_essential,
    tangent_basis,
    triangulate_rays,
)
from .imu import GRAVITY, ImuNoise, correct_for_bias, preintegrate, slice_samples
from .so3 import (
    quat_conj,
    quat_exp,
    quat_left,
    quat_log,
    quat_mul,
    quat_right,
    quat_to_rot,
    rot_exp,
    rot_to_quat,
    rot_z,
    rot_to_euler_zyx,
    skew,
)


@dataclass
class SfmResult:
    """Up-to-scale structure over a window, world = reference camera."""

    poses: dict  # frame index -> (R_wc, p_wc)
    landmarks: dict  # track id -> 3-vector
    ref_index: int
    mean_angular_error: float
    scale_status: str = "metric-unknown"


@dataclass
class AlignmentResult:
    scale: float
    gravity_w: np.ndarray  # (0, 0, -9.81) once aligned
    velocities: dict  # frame index -> world-frame body velocity, m/s
    gyro_bias: np.ndarray
    gravity_ref: np.ndarray  # refined gravity in the SfM reference frame
    R_w_ref: np.ndarray  # world-from-reference-camera rotation
    body_poses: dict  # frame index -> (R_wb, p_wb), metric + gravity-aligned
    landmarks_w: dict  # track id -> metric world point


def mean_parallax_deg(b1: np.ndarray, b2: np.ndarray) -> float:
    dots = np.clip(np.einsum("ij,ij->i", b1, b2), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(dots))))


def pick_init_pair(frames, min_parallax_deg: float = 1.5, min_common: int = 30):
    """Farthest-apart frame pair with enough shared, moved features."""
    if len(frames) < 2:
        raise NotReadyError("need at least two frames")
    for sep in range(len(frames) - 1, 0, -1):
        for a in range(len(frames) - sep):
            fi, fj = frames[a], frames[a + sep]
            common, ii, jj = np.intersect1d(fi.ids, fj.ids, return_indices=True)
            if len(common) < min_common:
                continue
            if mean_parallax_deg(fi.bearings[ii], fj.bearings[jj]) >= min_parallax_deg:
                return fi.index, fj.index
    raise NotReadyError("no frame pair with sufficient parallax yet")


def _observations_by_track(frames):
    obs: dict = {}
    for f in frames:
        for tid, bearing in zip(f.ids, f.bearings):
            obs.setdefault(int(tid), {})[f.index] = bearing
    return obs


def _pose_from_rel(rel) -> tuple[np.ndarray, np.ndarray]:
    # rel: X_second = R X_first + t, first camera is the world frame.
    return rel.R.T, -rel.R.T @ rel.t


def _try_triangulate(obs_dict, poses, min_angle_rad=2e-3):
    """Multi-ray midpoint over all posed observations of one track."""
    items = [(k, b) for k, b in obs_dict.items() if k in poses]
    if len(items) < 2:
        return None
    origins = np.array([poses[k][1] for k, _ in items])
    dirs = np.array([poses[k][0] @ b for k, b in items])
    cross = np.cross(dirs[:1], dirs)
    if np.max(np.linalg.norm(cross, axis=1)) < min_angle_rad:
        return None
    try:
        return triangulate_rays(origins, dirs)
    except LowParallaxError:
        return None


def run_sfm(frames, init_pair, refine_iters: int = 15, seed: int = 0) -> SfmResult:
    """Structure over the window, anchored at the init pair.

    Order of attack: essential + cheirality on the pair, triangulate
    their shared tracks, localize remaining frames by bearing EPnP
    working outward, triangulate what each new pose makes visible, then
    one joint damped-least-squares refinement of everything.
    """
    frames = sorted(frames, key=lambda f: f.index)
    by_index = {f.index: f for f in frames}
    ia, ib = init_pair
    fa, fb = by_index[ia], by_index[ib]
    obs = _observations_by_track(frames)

    common, ii, jj = np.intersect1d(fa.ids, fb.ids, return_indices=True)
    if len(common) < 8:
        raise InitializationError(f"init pair shares only {len(common)} tracks")
    try:
        rel, inliers = ransac_essential(fa.bearings[ii], fb.bearings[jj], seed=seed)
    except DegenerateGeometryError as exc:
        raise InitializationError(f"essential estimation failed: {exc}") from exc

    poses = {ia: (np.eye(3), np.zeros(3)), ib: _pose_from_rel(rel)}
    landmarks: dict = {}
    for tid in common[inliers]:
        p = _try_triangulate(obs[int(tid)], poses)
        if p is not None:
            landmarks[int(tid)] = p

    # Localize the rest outward from the pair, closest frames first.
    remaining = [f.index for f in frames if f.index not in poses]
    remaining.sort(key=lambda k: min(abs(k - ia), abs(k - ib)))
    for k in remaining:
        f = by_index[k]
        known = [(landmarks[int(t)], b) for t, b in zip(f.ids, f.bearings)
                 if int(t) in landmarks]
        if len(known) < 6:
            continue
        pts = np.array([p for p, _ in known])
        brs = np.array([b for _, b in known])
        try:
            poses[k] = _pose_from_rel(epnp_unit(pts, brs))
        except (DegenerateGeometryError, InsufficientDataError):
            continue
        for tid, _ in zip(f.ids, f.bearings):
            tid = int(tid)
            if tid not in landmarks:
                p = _try_triangulate(obs[tid], poses)
                if p is not None:
                    landmarks[tid] = p

    if len(poses) < max(2, len(frames) // 2):
        raise InitializationError(
            f"only {len(poses)}/{len(frames)} frames localized"
        )

    err = _refine_sfm(poses, landmarks, obs, ia, refine_iters)
    return SfmResult(poses, landmarks, ia, err)


def _sfm_residuals(poses, landmarks, samples):
    r = np.zeros(3 * len(samples))
    for n, (tid, k, bearing) in enumerate(samples):
        R, p = poses[k]
        X = R.T @ (landmarks[tid] - p)
        r[3 * n : 3 * n + 3] = bearing - X / np.linalg.norm(X)
    return r


def _refine_sfm(poses, landmarks, obs, ref_index, iters):
    """Joint damped LS on sum ||bearing - unit(R^T (L - p))||^2.

    The reference pose stays fixed (frame gauge); the scale gauge is
    left to the damping.  Poses and landmarks are updated in place.
    """
    samples = [
        (tid, k, bearing)
        for tid, track in obs.items()
        if tid in landmarks
        for k, bearing in track.items()
        if k in poses
    ]
    pose_ids = [k for k in sorted(poses) if k != ref_index]
    lm_ids = sorted(landmarks)
    pcol = {k: 6 * i for i, k in enumerate(pose_ids)}
    lcol = {t: 6 * len(pose_ids) + 3 * i for i, t in enumerate(lm_ids)}
    dim = 6 * len(pose_ids) + 3 * len(lm_ids)

    lam = 1e-6
    r = _sfm_residuals(poses, landmarks, samples)
    cost = float(r @ r)
    for _ in range(iters):
        J = np.zeros((len(r), dim))
        for n, (tid, k, _) in enumerate(samples):
            R, p = poses[k]
            X = R.T @ (landmarks[tid] - p)
            nX = np.linalg.norm(X)
            u = X / nX
            dr_dX = -(np.eye(3) - np.outer(u, u)) / nX
            rows = slice(3 * n, 3 * n + 3)
            if k != ref_index:
                J[rows, pcol[k] : pcol[k] + 3] = dr_dX @ skew(X)
                J[rows, pcol[k] + 3 : pcol[k] + 6] = dr_dX @ (-R.T)
            J[rows, lcol[tid] : lcol[tid] + 3] = dr_dX @ R.T
        g = J.T @ r
        H = J.T @ J
        diag = np.maximum(np.diag(H), 1e-8)
        for _ in range(6):
            try:
                step = np.linalg.solve(H + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            new_poses = {
                k: (
                    (R @ rot_exp(step[pcol[k] : pcol[k] + 3]),
                     p + step[pcol[k] + 3 : pcol[k] + 6])
                    if k != ref_index
                    else (R, p)
                )
                for k, (R, p) in poses.items()
            }
            new_lms = {
                t: landmarks[t] + step[lcol[t] : lcol[t] + 3] for t in lm_ids
            }
            r_new = _sfm_residuals(new_poses, new_lms, samples)
            cost_new = float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                poses.update(new_poses)
                landmarks.update(new_lms)
                r, cost = r_new, cost_new
                lam = max(lam / 10.0, 1e-9)
                break
            lam *= 10.0
        if float(np.linalg.norm(g)) < 1e-10:
            break

    dots = 1.0 - 0.5 * np.sum(r.reshape(-1, 3) ** 2, axis=1)
    return float(np.degrees(np.mean(np.arccos(np.clip(dots, -1.0, 1.0)))))


def calibrate_extrinsic_rotation(rel_rot_pairs) -> tuple[np.ndarray, np.ndarray]:
    """Camera-from-body rotation from paired relative-rotation streams.

    Each pair is (q_body, q_cam): the same inter-frame rotation seen by
    the IMU and by the camera.  Stacks q_cb * q_body = q_cam * q_cb as
    (R(q_body) - L(q_cam)) q_cb = 0 and takes the least-singular vector.
    Returns (quaternion, rotation matrix), both camera-from-body.
    """
    pairs = list(rel_rot_pairs)
    if len(pairs) < 5:
        raise InsufficientDataError(f"extrinsic calibration needs >= 5 pairs, got {len(pairs)}")
    axes = []
    for qb, _ in pairs:
        v = quat_log(np.asarray(qb, dtype=float))
        n = np.linalg.norm(v)
        if n > 1e-6:
            axes.append(v / n)
    if len(axes) < 2:
        raise DegenerateGeometryError("not enough rotation to observe the extrinsic")
    s = np.linalg.svd(np.array(axes), compute_uv=False)
    if s[1] < 1e-3 * s[0]:
        raise DegenerateGeometryError(
            "rotation axes span a single direction; extrinsic unobservable about it"
        )
    A = np.vstack([
        quat_right(np.asarray(qb, dtype=float)) - quat_left(np.asarray(qc, dtype=float))
        for qb, qc in pairs
    ])
    _, _, Vt = np.linalg.svd(A)
    q = Vt[-1]
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q, quat_to_rot(q)


def calibrate_gyro_bias(body_rel_quats, preintegrations, iterations: int = 3) -> np.ndarray:
    """Gyro bias from visual vs preintegrated rotation disagreement.

    Solves the linearized normal equations in the bias increment using
    the preintegrations' rotation-bias Jacobians, iterating the
    first-order correction a few times.
    """
    quats = [np.asarray(q, dtype=float) for q in body_rel_quats]
    if len(quats) != len(preintegrations):
        raise ValueError("one visual rotation per preintegration required")
    if len(quats) < 3:
        raise InsufficientDataError(f"gyro calibration needs >= 3 constraints, got {len(quats)}")
    bias = np.asarray(preintegrations[0].bias_lin[1], dtype=float).copy()
    ba = preintegrations[0].bias_lin[0]
    for _ in range(iterations):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for q_vis, pre in zip(quats, preintegrations):
            cor = correct_for_bias(pre, (ba, bias))
            Jq = pre.J_bias[6:9, 3:6]
            r = 2.0 * quat_mul(quat_conj(cor.delta_q), q_vis)[1:]
            A += Jq.T @ Jq
            b += Jq.T @ r
        eig = np.linalg.eigvalsh(A)
        if eig[0] < 1e-9 * max(eig[-1], 1e-12):
            raise DegenerateGeometryError("degenerate motion: gyro bias unobservable")
        bias = bias + np.linalg.solve(A, b)
    return bias


def align_visual_inertial(
    sfm: SfmResult,
    preintegrations,
    extrinsic,
    gyro_bias: Optional[np.ndarray] = None,
) -> AlignmentResult:
    """Linear alignment: per-frame velocities, gravity, metric scale.

    `preintegrations` has one entry per consecutive pair of localized
    frames.  `extrinsic` is (R_bc, p_bc) with X_body = R_bc X_cam + p_bc.
    After solving, gravity is refined on its 2-dof tangent space with
    the magnitude pinned, and the world frame is rotated so gravity
    points along -Z with the first body frame at yaw 0 and the origin.
    """
    R_bc, p_bc = extrinsic
    R_cb = np.asarray(R_bc, dtype=float).T
    p_bc = np.asarray(p_bc, dtype=float)
    keys = sorted(sfm.poses)
    if len(keys) < 3 or len(preintegrations) != len(keys) - 1:
        raise InitializationError("need one preintegration per consecutive frame pair")
    R = {k: sfm.poses[k][0] @ R_cb for k in keys}  # ref-from-body_k
    pbar = {k: sfm.poses[k][1] for k in keys}

    n = len(keys)
    rows = 6 * (n - 1)
    A = np.zeros((rows, 3 * n + 4))
    b = np.zeros(rows)
    g_col = 3 * n
    s_col = 3 * n + 3
    for m, (k0, k1) in enumerate(zip(keys[:-1], keys[1:])):
        pre = preintegrations[m]
        T = pre.dt_total
        R0T = R[k0].T
        rp = slice(6 * m, 6 * m + 3)
        rv = slice(6 * m + 3, 6 * m + 6)
        A[rp, 3 * m : 3 * m + 3] = -T * np.eye(3)
        A[rp, g_col : g_col + 3] = -0.5 * T * T * R0T
        A[rp, s_col] = R0T @ (pbar[k1] - pbar[k0])
        b[rp] = pre.delta_p + R0T @ R[k1] @ p_bc - p_bc
        A[rv, 3 * m : 3 * m + 3] = -np.eye(3)
        A[rv, 3 * (m + 1) : 3 * (m + 1) + 3] = R0T @ R[k1]
        A[rv, g_col : g_col + 3] = -T * R0T
        b[rv] = pre.delta_v

    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    g_ref = x[g_col : g_col + 3]
    scale = float(x[s_col])
    if scale <= 0:
        raise InitializationError(f"alignment produced non-positive scale {scale:.4f}")
    if abs(np.linalg.norm(g_ref) - GRAVITY) > 0.1 * GRAVITY:
        raise InitializationError(
            f"gravity magnitude {np.linalg.norm(g_ref):.3f} too far from {GRAVITY}"
        )

    # Refine on the gravity tangent space with the magnitude fixed.
    for _ in range(4):
        g_hat = g_ref / np.linalg.norm(g_ref)
        b1, b2 = tangent_basis(g_hat)
        Aw = np.zeros((rows, 3 * n + 3))
        bw = b.copy()
        Aw[:, : 3 * n] = A[:, : 3 * n]
        Aw[:, 3 * n] = A[:, g_col : g_col + 3] @ b1
        Aw[:, 3 * n + 1] = A[:, g_col : g_col + 3] @ b2
        Aw[:, 3 * n + 2] = A[:, s_col]
        bw = bw - A[:, g_col : g_col + 3] @ (GRAVITY * g_hat)
        xw, *_ = np.linalg.lstsq(Aw, bw, rcond=None)
        g_ref = GRAVITY * g_hat + xw[3 * n] * b1 + xw[3 * n + 1] * b2
        g_ref = GRAVITY * g_ref / np.linalg.norm(g_ref)
        scale = float(xw[3 * n + 2])
        vels_body = xw[: 3 * n].reshape(n, 3)
    if scale <= 0:
        raise InitializationError(f"refined scale non-positive: {scale:.4f}")

    # World frame: gravity to -Z, first body frame at yaw 0, origin at
    # the first body position.
    g_hat = g_ref / np.linalg.norm(g_ref)
    target = np.array([0.0, 0.0, -1.0])
    axis = np.cross(g_hat, target)
    sin_a = np.linalg.norm(axis)
    cos_a = float(g_hat @ target)
    if sin_a < 1e-12:
        R_w_ref = np.eye(3) if cos_a > 0 else rot_exp(np.array([np.pi, 0.0, 0.0]))
    else:
        R_w_ref = rot_exp(axis / sin_a * np.arctan2(sin_a, cos_a))
    yaw0 = rot_to_euler_zyx(R_w_ref @ R[keys[0]])[2]
    R_w_ref = rot_z(-yaw0) @ R_w_ref

    p_body_ref = {k: scale * pbar[k] - R[k] @ p_bc for k in keys}
    origin = p_body_ref[keys[0]]
    body_poses = {
        k: (R_w_ref @ R[k], R_w_ref @ (p_body_ref[k] - origin)) for k in keys
    }
    velocities = {
        k: R_w_ref @ R[k] @ vels_body[i] for i, k in enumerate(keys)
    }
    landmarks_w = {
        t: R_w_ref @ (scale * p - origin) for t, p in sfm.landmarks.items()
    }
    return AlignmentResult(
        scale=scale,
        gravity_w=np.array([0.0, 0.0, -GRAVITY]),
        velocities=velocities,
        gyro_bias=(np.zeros(3) if gyro_bias is None else np.asarray(gyro_bias, dtype=float)),
        gravity_ref=g_ref,
        R_w_ref=R_w_ref,
        body_poses=body_poses,
        landmarks_w=landmarks_w,
    )


def _refine_extrinsic_bias(chunks, q_cam_rels, R_cb0, bias0, noise, fix_extrinsic=False):
    """Joint nonlinear fit of camera-from-body rotation and gyro bias.

    The two are coupled through the same rotation constraints, and with
    short weakly-excited windows the alternating linear solves contract
    too slowly; a joint solve with exact re-preintegration inside the
    residual recovers both to numerical precision on clean data.
    """
    q0 = rot_to_quat(np.asarray(R_cb0, dtype=float))
    bias0 = np.asarray(bias0, dtype=float)

    def residual(x):
        bg = bias0 + x[-3:]
        q_cb = q0 if fix_extrinsic else quat_mul(q0, quat_exp(x[:3]))
        out = np.zeros(3 * len(chunks))
        for m, (chunk, qc) in enumerate(zip(chunks, q_cam_rels)):
            pre = preintegrate(chunk, bias=(np.zeros(3), bg), noise=noise)
            q_err = quat_mul(
                quat_mul(quat_mul(q_cb, pre.delta_q), quat_conj(q_cb)),
                quat_conj(qc),
            )
            if q_err[0] < 0:
                q_err = -q_err
            out[3 * m : 3 * m + 3] = 2.0 * q_err[1:]
        return out

    n = 3 if fix_extrinsic else 6
    fit = least_squares(lambda x: residual(np.concatenate([np.zeros(6 - n), x])),
                        np.zeros(n), method="lm", xtol=1e-14, ftol=1e-14)
    x = np.concatenate([np.zeros(6 - n), fit.x])
    q_cb = q0 if fix_extrinsic else quat_mul(q0, quat_exp(x[:3]))
    return quat_to_rot(q_cb), bias0 + x[-3:]


@dataclass
class InitializerConfig:
    min_parallax_deg: float = 1.5
    min_common_tracks: int = 30
    sfm_refine_iters: int = 15
    seed: int = 0
    noise: ImuNoise = field(default_factory=ImuNoise)
    # Known body-from-camera rotation; None calibrates it from motion.
    extrinsic_R_bc: Optional[np.ndarray] = None
    extrinsic_p_bc: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class InitializationResult:
    sfm: SfmResult
    alignment: AlignmentResult
    R_bc: np.ndarray
    p_bc: np.ndarray
    gyro_bias: np.ndarray
    preintegrations: list
    frame_indices: list


def initialize(frames, imu_samples, config: InitializerConfig = InitializerConfig()) -> InitializationResult:
    """Full bootstrap over a window of TrackedFrames + an IMU stream.

    Extrinsic rotation and gyro bias are mutually dependent: biased
    gyro rotations corrupt the extrinsic fit and the bias fit needs the
    extrinsic to compare against vision.  A few alternation rounds with
    exact re-preintegration at the latest bias converge both.
    """
    frames = sorted(frames, key=lambda f: f.index)
    pair = pick_init_pair(frames, config.min_parallax_deg, config.min_common_tracks)
    sfm = run_sfm(frames, pair, config.sfm_refine_iters, seed=config.seed)

    by_index = {f.index: f for f in frames}
    keys = sorted(sfm.poses)
    chunks = [
        slice_samples(imu_samples, by_index[k0].timestamp, by_index[k1].timestamp)
        for k0, k1 in zip(keys[:-1], keys[1:])
    ]
    q_cam_rels = [
        rot_to_quat(sfm.poses[k0][0].T @ sfm.poses[k1][0])
        for k0, k1 in zip(keys[:-1], keys[1:])
    ]

    # Seed: SVD extrinsic from raw preintegrations, then a linear bias
    # solve; finish with the joint fit, which untangles the coupling.
    preints = [preintegrate(c, noise=config.noise) for c in chunks]
    known = config.extrinsic_R_bc is not None
    if known:
        R_bc = np.asarray(config.extrinsic_R_bc, dtype=float)
    else:
        _, R_cb = calibrate_extrinsic_rotation(
            [(p.delta_q, qc) for p, qc in zip(preints, q_cam_rels)]
        )
        R_bc = R_cb.T
    body_rels = [rot_to_quat(R_bc @ quat_to_rot(qc) @ R_bc.T) for qc in q_cam_rels]
    gyro_bias = calibrate_gyro_bias(body_rels, preints)
    R_cb, gyro_bias = _refine_extrinsic_bias(
        chunks, q_cam_rels, R_bc.T, gyro_bias, config.noise, fix_extrinsic=known
    )
    R_bc = R_cb.T

    preints = [
        preintegrate(c, bias=(np.zeros(3), gyro_bias), noise=config.noise)
        for c in chunks
    ]
    alignment = align_visual_inertial(
        sfm, preints, (R_bc, config.extrinsic_p_bc), gyro_bias=gyro_bias
    )
    return InitializationResult(
        sfm=sfm,
        alignment=alignment,
        R_bc=R_bc,
        p_bc=np.asarray(config.extrinsic_p_bc, dtype=float),
        gyro_bias=gyro_bias,
        preintegrations=preints,
        frame_indices=keys,
    )
