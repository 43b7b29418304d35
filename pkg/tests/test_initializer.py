"""Bootstrap pipeline: init pair, SfM, calibration, alignment."""

import numpy as np
import pytest

from panoslam.camera import unproject
from panoslam.errors import (
    DegenerateGeometryError,
    InitializationError,
    InsufficientDataError,
    NotReadyError,
)
from panoslam.frontend import TrackedFrame
from panoslam.imu import preintegrate, slice_samples
from panoslam.initializer import (
    InitializerConfig,
    SfmResult,
    align_visual_inertial,
    calibrate_extrinsic_rotation,
    calibrate_gyro_bias,
    initialize,
    mean_parallax_deg,
    pick_init_pair,
    run_sfm,
)
from panoslam.sim import (
    AnalyticTrajectory,
    Channel,
    SceneConfig,
    camera_pose,
    generate_world,
    observe,
    sample_imu,
)
from panoslam.so3 import rot_log, rot_to_quat, rot_z, yaw_of_rot

GYRO_BIAS = np.array([0.02, -0.01, 0.005])
FRAME_TIMES = np.arange(12) * 0.1

WORLD = generate_world(SceneConfig(seed=3))


def tracked_frames(pixel_noise=0.0, seed=0, fov_override=None):
    out = []
    for f in observe(WORLD, FRAME_TIMES, pixel_noise=pixel_noise,
                     fov_override=fov_override, seed=seed):
        # the real frontend only ever sees pixels; unproject when noisy
        bearings = unproject(WORLD.intrinsics, f.pixels) if pixel_noise else f.bearings_true
        out.append(TrackedFrame(f.index, f.t, f.ids, f.pixels, bearings))
    return out


def preintegrations(imu, indices=None):
    keys = list(range(len(FRAME_TIMES))) if indices is None else list(indices)
    return [
        preintegrate(slice_samples(imu, FRAME_TIMES[a], FRAME_TIMES[b]))
        for a, b in zip(keys[:-1], keys[1:])
    ]


def max_gauge_rot_err(sfm):
    R_ref, _ = camera_pose(WORLD, FRAME_TIMES[sfm.ref_index])
    errs = []
    for k, (R_est, _) in sfm.poses.items():
        R_wc, _ = camera_pose(WORLD, FRAME_TIMES[k])
        errs.append(np.linalg.norm(rot_log(R_est.T @ R_ref.T @ R_wc)))
    return max(errs)


class TestPickInitPair:
    def test_mean_parallax_zero_for_identical(self):
        b = np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]])
        assert mean_parallax_deg(b, b) == pytest.approx(0.0, abs=1e-9)

    def test_picks_farthest_qualifying_pair(self):
        frames = tracked_frames()
        ia, ib = pick_init_pair(frames)
        assert (ia, ib) == (0, 11)

    def test_repeated_frame_raises_not_ready(self):
        f0 = tracked_frames()[0]
        clones = [
            TrackedFrame(i, 0.1 * i, f0.ids, f0.pixels, f0.bearings)
            for i in range(6)
        ]
        with pytest.raises(NotReadyError):
            pick_init_pair(clones)

    def test_disjoint_tracks_raise_not_ready(self):
        frames = tracked_frames()[:2]
        shifted = TrackedFrame(
            frames[1].index,
            frames[1].timestamp,
            frames[1].ids + 10000,
            frames[1].pixels,
            frames[1].bearings,
        )
        with pytest.raises(NotReadyError):
            pick_init_pair([frames[0], shifted])


class TestRunSfm:
    def test_noise_free_poses_exact(self):
        frames = tracked_frames()
        sfm = run_sfm(frames, pick_init_pair(frames))
        assert len(sfm.poses) == len(frames)
        assert max_gauge_rot_err(sfm) < 1e-12
        assert sfm.mean_angular_error < 1e-9
        assert sfm.scale_status == "metric-unknown"

    def test_noise_free_scale_consistent(self):
        # up-to-scale: per-frame |p_est| / |p_true| must agree to rounding
        frames = tracked_frames()
        sfm = run_sfm(frames, pick_init_pair(frames))
        R_ref, p_ref = camera_pose(WORLD, FRAME_TIMES[sfm.ref_index])
        ratios = []
        for k, (_, p_est) in sfm.poses.items():
            _, p_wc = camera_pose(WORLD, FRAME_TIMES[k])
            d_true = np.linalg.norm(p_wc - p_ref)
            if d_true > 1e-9:
                ratios.append(np.linalg.norm(p_est) / d_true)
        ratios = np.array(ratios)
        assert ratios.max() / ratios.min() - 1 < 1e-10

    def test_noise_free_landmarks_match_truth(self):
        frames = tracked_frames()
        sfm = run_sfm(frames, pick_init_pair(frames))
        R_ref, p_ref = camera_pose(WORLD, FRAME_TIMES[sfm.ref_index])
        far = max(sfm.poses, key=lambda k: np.linalg.norm(sfm.poses[k][1]))
        _, p_far = camera_pose(WORLD, FRAME_TIMES[far])
        s = np.linalg.norm(sfm.poses[far][1]) / np.linalg.norm(p_far - p_ref)
        assert len(sfm.landmarks) > 100
        for tid, L_est in sfm.landmarks.items():
            L_true = s * (R_ref.T @ (WORLD.landmarks[tid] - p_ref))
            np.testing.assert_allclose(L_est, L_true, atol=1e-8)

    def test_one_pixel_noise_reprojection(self):
        frames = tracked_frames(pixel_noise=1.0, seed=100)
        sfm = run_sfm(frames, pick_init_pair(frames))
        assert sfm.mean_angular_error < 0.35
        assert max_gauge_rot_err(sfm) < 5e-3

    def test_positive_half_plane_only(self):
        # restricting to zenith 40..80 still reconstructs exactly
        frames = tracked_frames(fov_override=(40.0, 80.0))
        sfm = run_sfm(frames, pick_init_pair(frames))
        assert max_gauge_rot_err(sfm) < 1e-12
        assert sfm.mean_angular_error < 1e-9


class TestExtrinsicRotation:
    @staticmethod
    def exact_pairs(n=11):
        traj = WORLD.trajectory
        pairs = []
        for a, b in zip(FRAME_TIMES[: n], FRAME_TIMES[1 : n + 1]):
            rel_b = traj.rotation(a).T @ traj.rotation(b)
            rel_c = WORLD.R_bc.T @ rel_b @ WORLD.R_bc
            pairs.append((rot_to_quat(rel_b), rot_to_quat(rel_c)))
        return pairs

    def test_recovers_mount_rotation(self):
        _, R_cb = calibrate_extrinsic_rotation(self.exact_pairs())
        assert np.linalg.norm(rot_log(R_cb.T @ WORLD.R_bc.T)) < 1e-12

    def test_identity_mount(self):
        traj = WORLD.trajectory
        pairs = []
        for a, b in zip(FRAME_TIMES[:-1], FRAME_TIMES[1:]):
            q = rot_to_quat(traj.rotation(a).T @ traj.rotation(b))
            pairs.append((q, q))
        _, R_cb = calibrate_extrinsic_rotation(pairs)
        np.testing.assert_allclose(R_cb, np.eye(3), atol=1e-12)

    def test_single_axis_motion_degenerate(self):
        angles = np.linspace(0.05, 0.5, 8)
        pairs = []
        for a in angles:
            rel = rot_z(a)
            pairs.append((rot_to_quat(rel), rot_to_quat(WORLD.R_bc.T @ rel @ WORLD.R_bc)))
        with pytest.raises(DegenerateGeometryError):
            calibrate_extrinsic_rotation(pairs)

    def test_too_few_pairs(self):
        with pytest.raises(InsufficientDataError):
            calibrate_extrinsic_rotation(self.exact_pairs(n=4))


class TestGyroBias:
    @staticmethod
    def body_rel_quats():
        traj = WORLD.trajectory
        return [
            rot_to_quat(traj.rotation(a).T @ traj.rotation(b))
            for a, b in zip(FRAME_TIMES[:-1], FRAME_TIMES[1:])
        ]

    def test_recovers_injected_bias(self):
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 500.0, gyro_bias=GYRO_BIAS)
        bias = calibrate_gyro_bias(self.body_rel_quats(), preintegrations(imu))
        np.testing.assert_allclose(bias, GYRO_BIAS, atol=2e-5)

    def test_zero_bias_stays_zero(self):
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 500.0)
        bias = calibrate_gyro_bias(self.body_rel_quats(), preintegrations(imu))
        np.testing.assert_allclose(bias, 0.0, atol=1e-7)

    def test_too_few_constraints(self):
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 500.0)
        with pytest.raises(InsufficientDataError):
            calibrate_gyro_bias(self.body_rel_quats()[:2], preintegrations(imu)[:2])


class TestAlignment:
    @staticmethod
    def truth_sfm(scale_divisor):
        R_ref, p_ref = camera_pose(WORLD, FRAME_TIMES[0])
        poses = {}
        for i, t in enumerate(FRAME_TIMES):
            R_wc, p_wc = camera_pose(WORLD, t)
            poses[i] = (R_ref.T @ R_wc, (R_ref.T @ (p_wc - p_ref)) / scale_divisor)
        return SfmResult(poses=poses, landmarks={}, ref_index=0, mean_angular_error=0.0)

    def test_recovers_injected_scale(self):
        sfm = self.truth_sfm(2.5)
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 1000.0)
        al = align_visual_inertial(sfm, preintegrations(imu), (WORLD.R_bc, WORLD.p_bc))
        assert abs(al.scale / 2.5 - 1) < 1e-5

    def test_gravity_direction_and_world_frame(self):
        sfm = self.truth_sfm(2.5)
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 1000.0)
        al = align_visual_inertial(sfm, preintegrations(imu), (WORLD.R_bc, WORLD.p_bc))
        R_ref, _ = camera_pose(WORLD, FRAME_TIMES[0])
        g_true = R_ref.T @ np.array([0.0, 0.0, -9.81])
        cosang = al.gravity_ref @ g_true / (np.linalg.norm(al.gravity_ref) * 9.81)
        assert np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))) < 0.01
        # aligned world: gravity along -Z, first body at origin with yaw 0
        np.testing.assert_allclose(al.R_w_ref @ al.gravity_ref, [0, 0, -9.81], atol=1e-9)
        np.testing.assert_allclose(al.body_poses[0][1], 0.0, atol=1e-12)
        assert abs(yaw_of_rot(al.body_poses[0][0])) < 1e-12

    def test_velocities_match_truth(self):
        sfm = self.truth_sfm(2.5)
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 1000.0)
        al = align_visual_inertial(sfm, preintegrations(imu), (WORLD.R_bc, WORLD.p_bc))
        traj = WORLD.trajectory
        dyaw = yaw_of_rot(traj.rotation(0.0) @ al.body_poses[0][0].T)
        v_est = np.array([rot_z(dyaw) @ al.velocities[i] for i in range(len(FRAME_TIMES))])
        v_true = np.array([traj.velocity(t) for t in FRAME_TIMES])
        rms = np.sqrt(np.mean(np.sum((v_est - v_true) ** 2, axis=1)))
        assert rms / np.sqrt(np.mean(np.sum(v_true**2, axis=1))) < 1e-5

    def test_zero_excitation_rejected(self):
        # constant velocity, no rotation: scale/gravity/velocity unobservable
        lin = AnalyticTrajectory(
            x=Channel(0.0, 0.4), y=Channel(0.0), z=Channel(1.0),
            roll=Channel(0.0), pitch=Channel(0.0), yaw=Channel(0.0),
        )
        imu = sample_imu(lin, -0.1, 1.3, 500.0)
        poses = {
            i: (np.eye(3), lin.position(t) - lin.position(0.0))
            for i, t in enumerate(FRAME_TIMES)
        }
        sfm = SfmResult(poses=poses, landmarks={}, ref_index=0, mean_angular_error=0.0)
        with pytest.raises(InitializationError):
            align_visual_inertial(sfm, preintegrations(imu), (np.eye(3), np.zeros(3)))


class TestInitializeEndToEnd:
    def metrics(self, res):
        traj = WORLD.trajectory
        al = res.alignment
        keys = res.frame_indices
        p_est = np.array([al.body_poses[k][1] for k in keys])
        p_true = np.array([traj.position(FRAME_TIMES[k]) for k in keys])
        dyaw = yaw_of_rot(traj.rotation(FRAME_TIMES[keys[0]]) @ al.body_poses[keys[0]][0].T)
        Rz = rot_z(dyaw)
        p_fit = (Rz @ p_est.T).T + (p_true[0] - Rz @ p_est[0])
        d_est = np.linalg.norm(p_est[1:] - p_est[0], axis=1)
        d_true = np.linalg.norm(p_true[1:] - p_true[0], axis=1)
        return {
            "extrinsic": np.linalg.norm(rot_log(res.R_bc.T @ WORLD.R_bc)),
            "bias": np.abs(res.gyro_bias - GYRO_BIAS).max(),
            "scale": np.abs(d_est / d_true - 1).max(),
            "ate": np.sqrt(np.mean(np.sum((p_fit - p_true) ** 2, axis=1))),
        }

    def test_noise_free_self_calibrating(self):
        frames = tracked_frames()
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 500.0, gyro_bias=GYRO_BIAS)
        res = initialize(frames, imu, InitializerConfig(extrinsic_p_bc=WORLD.p_bc))
        m = self.metrics(res)
        assert m["extrinsic"] < 1e-6
        assert m["bias"] < 1e-6
        assert m["scale"] < 1e-4
        assert m["ate"] < 1e-4

    def test_noisy_with_known_extrinsic(self):
        frames = tracked_frames(pixel_noise=1.0, seed=102)
        imu = sample_imu(WORLD.trajectory, -0.1, 1.3, 500.0, gyro_noise=0.004,
                         accel_noise=0.08, gyro_bias=GYRO_BIAS, seed=202)
        cfg = InitializerConfig(extrinsic_R_bc=WORLD.R_bc, extrinsic_p_bc=WORLD.p_bc)
        res = initialize(frames, imu, cfg)
        m = self.metrics(res)
        assert m["extrinsic"] < 1e-12  # provided, not estimated
        assert m["bias"] < 2e-3
        assert m["scale"] < 0.04
        assert m["ate"] < 0.05
        assert res.sfm.mean_angular_error < 0.35

    def test_imu_not_covering_window(self):
        frames = tracked_frames()
        imu = sample_imu(WORLD.trajectory, -0.05, 0.5, 500.0)
        with pytest.raises(InsufficientDataError):
            initialize(frames, imu, InitializerConfig())
