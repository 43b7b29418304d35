"""Simulator self-consistency tests.

The simulator is the oracle for everything downstream, so its own
internal consistency is checked the hard way: analytic derivatives
against finite differences, observations against the epipolar
constraint of the true poses, and IMU synthesis against basic physics.
"""

import warnings

import numpy as np
import pytest

from panoslam.geometry import epipolar_residual, RelativePose
from panoslam.sim import (
    AnalyticTrajectory,
    Channel,
    EnvTexture,
    SceneConfig,
    camera_pose,
    circle_trajectory,
    figure_eight_trajectory,
    generate_world,
    make_trajectory,
    observe,
    render_view,
    sample_imu,
    sinusoid_trajectory,
)
from panoslam.so3 import rot_log, skew


class TestChannel:
    def test_derivatives_match_finite_differences(self):
        ch = Channel(offset=1.2, slope=-0.3, sines=((0.5, 2.1, 0.4), (0.2, 5.0, 1.0)))
        t = np.linspace(0.0, 4.0, 17)
        h = 1e-6
        d1_fd = (ch.val(t + h) - ch.val(t - h)) / (2 * h)
        d2_fd = (ch.d1(t + h) - ch.d1(t - h)) / (2 * h)
        assert np.abs(ch.d1(t) - d1_fd).max() < 1e-7
        assert np.abs(ch.d2(t) - d2_fd).max() < 1e-6

    def test_vectorized(self):
        ch = Channel(sines=((1.0, 1.0, 0.0),))
        assert ch.val(np.array([0.0, np.pi / 2])) == pytest.approx([0.0, 1.0])


class TestTrajectories:
    @pytest.mark.parametrize("kind", ["circle", "figure-eight", "sinusoid"])
    def test_angular_rate_matches_rotation_derivative(self, kind):
        traj = make_trajectory(kind)
        h = 1e-6
        for t in np.linspace(0.3, 9.7, 11):
            R0 = traj.rotation(t - h)
            R1 = traj.rotation(t + h)
            w_fd = rot_log(R0.T @ R1) / (2 * h)
            w = traj.angular_rate_body(t)
            assert np.linalg.norm(w - w_fd) < 1e-6

    @pytest.mark.parametrize("kind", ["circle", "figure-eight", "sinusoid"])
    def test_velocity_accel_match_position(self, kind):
        traj = make_trajectory(kind)
        t = np.linspace(0.1, 9.9, 13)
        h = 1e-6
        v_fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
        a_fd = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
        assert np.abs(traj.velocity(t) - v_fd).max() < 1e-6
        assert np.abs(traj.acceleration(t) - a_fd).max() < 1e-5

    def test_circle_geometry(self):
        traj = circle_trajectory(radius=2.0, period=8.0, height=1.0, bob=0.0)
        t = np.linspace(0.0, 8.0, 50)
        p = traj.position(t)
        assert np.abs(np.hypot(p[:, 0], p[:, 1]) - 2.0).max() < 1e-9
        assert np.allclose(p[0], traj.position(8.0))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown trajectory"):
            make_trajectory("spiral")


class TestWorld:
    def test_deterministic_landmarks(self):
        cfg = SceneConfig(seed=11)
        w1, w2 = generate_world(cfg), generate_world(cfg)
        assert np.array_equal(w1.landmarks, w2.landmarks)
        assert not np.array_equal(w1.landmarks, generate_world(SceneConfig(seed=12)).landmarks)

    def test_landmarks_in_volume(self):
        cfg = SceneConfig(landmark_count=150)
        w = generate_world(cfg)
        assert w.landmarks.shape == (150, 3)
        for axis, (lo, hi) in enumerate(cfg.volume):
            assert w.landmarks[:, axis].min() >= lo
            assert w.landmarks[:, axis].max() <= hi

    def test_low_excitation_warns(self):
        flat = AnalyticTrajectory(
            x=Channel(slope=0.5), y=Channel(), z=Channel(offset=1.0),
            roll=Channel(), pitch=Channel(), yaw=Channel(),
        )
        from panoslam import sim as sim_mod
        orig = sim_mod._TRAJECTORY_FACTORIES
        sim_mod._TRAJECTORY_FACTORIES = dict(orig, flat=lambda: flat)
        try:
            with pytest.warns(UserWarning, match="excitation"):
                generate_world(SceneConfig(trajectory="flat"))
        finally:
            sim_mod._TRAJECTORY_FACTORIES = orig

    def test_default_trajectory_well_excited(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            generate_world(SceneConfig())


class TestImuSynthesis:
    def test_static_level_measures_gravity(self):
        hover = AnalyticTrajectory(
            x=Channel(), y=Channel(), z=Channel(offset=1.0),
            roll=Channel(), pitch=Channel(), yaw=Channel(),
        )
        samples = sample_imu(hover, 0.0, 1.0, 100.0)
        for s in samples:
            assert np.allclose(s.accel, [0.0, 0.0, 9.81], atol=1e-12)
            assert np.allclose(s.gyro, 0.0, atol=1e-12)

    def test_rate_and_count(self):
        traj = circle_trajectory()
        samples = sample_imu(traj, 1.0, 3.0, 200.0)
        assert len(samples) == 401
        dts = np.diff([s.t for s in samples])
        assert np.allclose(dts, 1.0 / 200.0)

    def test_noise_and_bias_applied(self):
        traj = circle_trajectory()
        clean = sample_imu(traj, 0.0, 0.5, 100.0)
        bias = sample_imu(traj, 0.0, 0.5, 100.0, gyro_bias=(0.1, 0, 0))
        assert np.allclose(bias[5].gyro - clean[5].gyro, [0.1, 0, 0])
        n1 = sample_imu(traj, 0.0, 0.5, 100.0, gyro_noise=0.01, seed=4)
        n2 = sample_imu(traj, 0.0, 0.5, 100.0, gyro_noise=0.01, seed=4)
        n3 = sample_imu(traj, 0.0, 0.5, 100.0, gyro_noise=0.01, seed=5)
        assert np.array_equal(n1[7].gyro, n2[7].gyro)
        assert not np.array_equal(n1[7].gyro, n3[7].gyro)


class TestObserve:
    def setup_method(self):
        self.world = generate_world(SceneConfig(seed=2))
        self.times = np.arange(0.0, 4.0, 0.5)
        self.frames = observe(self.world, self.times)

    def test_frames_well_formed(self):
        tmin, tmax = self.world.intrinsics.fov_range
        from panoslam.camera import zenith_angle
        for fr in self.frames:
            assert len(fr.ids) > 20
            assert fr.pixels.shape == (len(fr.ids), 2)
            zen = zenith_angle(fr.bearings_true)
            assert zen.min() >= tmin and zen.max() <= tmax
            # Bearings point at the true landmarks from the true pose.
            R_wc, p_wc = camera_pose(self.world, fr.t)
            X_c = (fr.points_world - p_wc) @ R_wc
            w = X_c / np.linalg.norm(X_c, axis=1, keepdims=True)
            assert np.abs(w - fr.bearings_true).max() < 1e-12

    def test_negative_half_plane_populated(self):
        from panoslam.camera import zenith_angle
        zen = np.concatenate([zenith_angle(fr.bearings_true) for fr in self.frames])
        assert (zen > 90.0).mean() > 0.2
        assert (zen < 90.0).mean() > 0.2

    def test_epipolar_consistency_across_frames(self):
        fi, fj = self.frames[0], self.frames[5]
        common, ii, jj = np.intersect1d(fi.ids, fj.ids, return_indices=True)
        assert len(common) >= 10
        Ri, pi = camera_pose(self.world, fi.t)
        Rj, pj = camera_pose(self.world, fj.t)
        rel = RelativePose(Rj.T @ Ri, Rj.T @ (pi - pj))
        res = epipolar_residual(fi.bearings_true[ii], fj.bearings_true[jj], rel)
        assert np.abs(res).max() < 1e-12

    def test_fov_override_narrows_band(self):
        from panoslam.camera import zenith_angle
        frames = observe(self.world, self.times[:2], fov_override=(60.0, 100.0))
        for fr in frames:
            zen = zenith_angle(fr.bearings_true)
            assert zen.min() >= 60.0 and zen.max() <= 100.0

    def test_pixel_noise_deterministic(self):
        a = observe(self.world, self.times[:3], pixel_noise=0.5, seed=9)
        b = observe(self.world, self.times[:3], pixel_noise=0.5, seed=9)
        c = observe(self.world, self.times[:3], pixel_noise=0.5, seed=10)
        assert np.array_equal(a[1].pixels, b[1].pixels)
        assert not np.array_equal(a[1].pixels, c[1].pixels)
        assert np.array_equal(a[1].ids, c[1].ids)

    def test_empty_frame_warns(self):
        # Single landmark straight above the camera start: inside the
        # blind cone below the minimum zenith angle.
        cfg = SceneConfig(
            seed=2, landmark_count=1,
            volume=((-0.01, 0.01), (-0.01, 0.01), (2.65, 2.7)),
        )
        world = generate_world(cfg)
        with pytest.warns(UserWarning, match="no landmarks"):
            frames = observe(world, [0.0])
        assert len(frames[0].ids) == 0


class TestRenderer:
    def test_image_properties(self):
        world = generate_world(SceneConfig(seed=1))
        tex = EnvTexture.generate(seed=3)
        img = render_view(world, 0.0, tex)
        w, h = world.intrinsics.image_size
        assert img.shape == (h, w)
        assert img.dtype == np.uint8
        # Corners are outside the annulus: black.
        assert img[0, 0] == 0 and img[-1, -1] == 0
        # Interior has real contrast for the feature detector.
        assert img[img > 0].std() > 20.0

    def test_deterministic(self):
        world = generate_world(SceneConfig(seed=1))
        t1 = EnvTexture.generate(seed=3)
        t2 = EnvTexture.generate(seed=3)
        assert np.array_equal(render_view(world, 1.0, t1), render_view(world, 1.0, t2))

    def test_rotation_dominates_translation(self):
        # Far-sphere texture: moving the camera barely changes intensity
        # along a fixed world ray, while rotating changes it a lot.
        tex = EnvTexture.generate(seed=5)
        dirs = np.array([[0.6, 0.0, 0.8], [0.0, -0.8, 0.6]])
        base = tex.intensity(dirs, origin=np.zeros(3))
        moved = tex.intensity(dirs, origin=np.array([1.0, 0.5, 0.2]))
        assert np.abs(base - moved).max() < 0.25
        spun = tex.intensity(dirs[:, [1, 0, 2]] * [1, -1, 1], origin=np.zeros(3))
        assert np.abs(base - spun).max() > 0.25
