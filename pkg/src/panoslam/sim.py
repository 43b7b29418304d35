"""Synthetic-world oracle: analytic trajectories, landmarks, exact IMU.

Trajectories are closed-form (sums of sinusoids plus linear terms per
channel), so velocity, acceleration, and body angular rate are exact —
no numeric differentiation anywhere.  Everything is deterministic under
a fixed seed.

The renderer paints a procedural texture on a large far sphere, so
image content depends almost purely on camera orientation; revisiting a
place with a different heading yields the same scene rotated, which is
the scenario attitude-guided loop closure targets.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import (
    PolynomialIntrinsics,
    in_image_bounds,
    load_calibration,
    load_sample_calibration,
    project_many,
    unproject,
    zenith_angle,
)
from .imu import GRAVITY_W, ImuSample
from .so3 import euler_zyx_to_rot, rot_to_quat


@dataclass(frozen=True)
class Channel:
    """Scalar analytic signal: offset + slope*t + sum of sinusoids."""

    offset: float = 0.0
    slope: float = 0.0
    sines: tuple = ()  # (amplitude, omega, phase) terms

    def val(self, t):
        t = np.asarray(t, dtype=float)
        out = self.offset + self.slope * t
        for a, w, ph in self.sines:
            out = out + a * np.sin(w * t + ph)
        return out

    def d1(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full_like(t, self.slope, dtype=float)
        for a, w, ph in self.sines:
            out = out + a * w * np.cos(w * t + ph)
        return out

    def d2(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t, dtype=float)
        for a, w, ph in self.sines:
            out = out - a * w * w * np.sin(w * t + ph)
        return out


@dataclass(frozen=True)
class AnalyticTrajectory:
    """Body trajectory with closed-form derivatives.

    Attitude is ZYX Euler (roll about x last): R_wb = Rz(yaw) Ry(pitch)
    Rx(roll).  Body angular rate comes from the exact Euler-rate
    kinematics, so synthesized gyro data is differentiation-free.
    """

    x: Channel
    y: Channel
    z: Channel
    roll: Channel
    pitch: Channel
    yaw: Channel

    def position(self, t):
        return np.stack([self.x.val(t), self.y.val(t), self.z.val(t)], axis=-1)

    def velocity(self, t):
        return np.stack([self.x.d1(t), self.y.d1(t), self.z.d1(t)], axis=-1)

    def acceleration(self, t):
        return np.stack([self.x.d2(t), self.y.d2(t), self.z.d2(t)], axis=-1)

    def euler(self, t):
        return self.roll.val(t), self.pitch.val(t), self.yaw.val(t)

    def rotation(self, t) -> np.ndarray:
        r, p, y = self.euler(t)
        if np.ndim(r) == 0:
            return euler_zyx_to_rot(float(r), float(p), float(y))
        return np.stack([euler_zyx_to_rot(*rpy) for rpy in zip(r, p, y)])

    def quat(self, t) -> np.ndarray:
        R = self.rotation(t)
        if R.ndim == 2:
            return rot_to_quat(R)
        return np.stack([rot_to_quat(Ri) for Ri in R])

    def angular_rate_body(self, t):
        r = self.roll.val(t)
        p = self.pitch.val(t)
        rd = self.roll.d1(t)
        pd = self.pitch.d1(t)
        yd = self.yaw.d1(t)
        wx = rd - yd * np.sin(p)
        wy = pd * np.cos(r) + yd * np.sin(r) * np.cos(p)
        wz = -pd * np.sin(r) + yd * np.cos(r) * np.cos(p)
        return np.stack([wx, wy, wz], axis=-1)


def circle_trajectory(
    radius: float = 2.5,
    period: float = 12.0,
    height: float = 1.2,
    bob: float = 0.15,
    tilt: float = 0.06,
) -> AnalyticTrajectory:
    """Constant-rate circle, heading along travel, gentle roll/pitch."""
    w = 2.0 * np.pi / period
    return AnalyticTrajectory(
        x=Channel(sines=((radius, w, np.pi / 2),)),
        y=Channel(sines=((radius, w, 0.0),)),
        z=Channel(offset=height, sines=((bob, 2.0 * w, 0.3),)),
        roll=Channel(sines=((tilt, 1.7 * w, 0.9),)),
        pitch=Channel(sines=((tilt, 2.3 * w, 0.0),)),
        yaw=Channel(offset=np.pi / 2, slope=w),
    )


def figure_eight_trajectory(
    width: float = 3.0,
    depth: float = 2.0,
    period: float = 12.0,
    height: float = 1.2,
    bob: float = 0.2,
    yaw_amp: float = 0.7,
    tilt: float = 0.12,
) -> AnalyticTrajectory:
    """Lemniscate-style sweep with multi-axis angular excitation."""
    w = 2.0 * np.pi / period
    return AnalyticTrajectory(
        x=Channel(sines=((width, w, 0.0),)),
        y=Channel(sines=((depth, 2.0 * w, 0.0),)),
        z=Channel(offset=height, sines=((bob, 1.5 * w, 0.7),)),
        roll=Channel(sines=((tilt, 2.1 * w, 0.4),)),
        pitch=Channel(sines=((0.9 * tilt, 1.3 * w, 1.1),)),
        yaw=Channel(sines=((yaw_amp, w, 0.5),)),
    )


def sinusoid_trajectory(
    speed: float = 0.6,
    sway: float = 0.8,
    period: float = 6.0,
    height: float = 1.2,
    tilt: float = 0.08,
) -> AnalyticTrajectory:
    """Forward motion with lateral/vertical sway."""
    w = 2.0 * np.pi / period
    return AnalyticTrajectory(
        x=Channel(slope=speed),
        y=Channel(sines=((sway, w, 0.0),)),
        z=Channel(offset=height, sines=((0.3 * sway, 1.4 * w, 0.6),)),
        roll=Channel(sines=((tilt, 1.2 * w, 0.2),)),
        pitch=Channel(sines=((tilt, 0.8 * w, 1.3),)),
        yaw=Channel(sines=((0.3, w, 0.9),)),
    )


_TRAJECTORY_FACTORIES = {
    "circle": circle_trajectory,
    "figure-eight": figure_eight_trajectory,
    "sinusoid": sinusoid_trajectory,
}


def make_trajectory(kind: str, **params) -> AnalyticTrajectory:
    if kind not in _TRAJECTORY_FACTORIES:
        raise ValueError(
            f"unknown trajectory {kind!r}; choose from {sorted(_TRAJECTORY_FACTORIES)}"
        )
    return _TRAJECTORY_FACTORIES[kind](**params)


@dataclass(frozen=True)
class SceneConfig:
    """Everything that defines a synthetic capture session."""

    seed: int = 0
    trajectory: str = "figure-eight"
    trajectory_params: dict = field(default_factory=dict)
    duration: float = 12.0
    landmark_count: int = 300
    # Indoor-scale volume, meters: x, y, z bounds.
    volume: tuple = ((-4.0, 4.0), (-5.0, 5.0), (-0.3, 2.7))
    calibration: Optional[str] = None  # None -> shipped sample
    cam_rate: float = 10.0
    imu_rate: float = 200.0
    pixel_noise: float = 0.0
    gyro_noise: float = 0.0
    accel_noise: float = 0.0
    gyro_bias: tuple = (0.0, 0.0, 0.0)
    accel_bias: tuple = (0.0, 0.0, 0.0)
    fov_override: Optional[tuple] = None  # (zenith_min_deg, zenith_max_deg)
    # Body-from-camera extrinsics: X_body = R(rotvec) @ X_cam + p.
    extrinsic_rotvec: tuple = (0.05, -0.04, 0.3)
    extrinsic_p: tuple = (0.06, -0.02, 0.04)


@dataclass(frozen=True)
class World:
    cfg: SceneConfig
    trajectory: AnalyticTrajectory
    landmarks: np.ndarray
    intrinsics: PolynomialIntrinsics
    R_bc: np.ndarray
    p_bc: np.ndarray


def generate_world(cfg: SceneConfig) -> World:
    """Trajectory + landmark field + calibration for a scene config."""
    traj = make_trajectory(cfg.trajectory, **cfg.trajectory_params)
    rng = np.random.default_rng(cfg.seed)
    lo = np.array([b[0] for b in cfg.volume])
    hi = np.array([b[1] for b in cfg.volume])
    landmarks = rng.uniform(lo, hi, size=(cfg.landmark_count, 3))
    intr = (
        load_sample_calibration()
        if cfg.calibration is None
        else load_calibration(cfg.calibration)
    )
    from .so3 import rot_exp

    R_bc = rot_exp(np.asarray(cfg.extrinsic_rotvec, dtype=float))
    p_bc = np.asarray(cfg.extrinsic_p, dtype=float)

    t_check = np.linspace(0.0, cfg.duration, 200)
    omega = traj.angular_rate_body(t_check)
    excited = np.sum(np.max(np.abs(omega), axis=0) > 0.02)
    if excited < 2:
        warnings.warn(
            "trajectory has angular excitation on fewer than 2 axes; "
            "extrinsic/alignment calibration will be unobservable",
            stacklevel=2,
        )
    return World(cfg, traj, landmarks, intr, R_bc, p_bc)


def sample_imu(
    traj: AnalyticTrajectory,
    t0: float,
    t1: float,
    rate: float,
    gyro_noise: float = 0.0,
    accel_noise: float = 0.0,
    gyro_bias=(0.0, 0.0, 0.0),
    accel_bias=(0.0, 0.0, 0.0),
    seed: int = 0,
    gravity=GRAVITY_W,
) -> list[ImuSample]:
    """Exact body-frame IMU stream: gyro rate and specific force."""
    n = int(round((t1 - t0) * rate)) + 1
    times = t0 + np.arange(n) / rate
    omega = traj.angular_rate_body(times)
    acc_w = traj.acceleration(times)
    g = np.asarray(gravity, dtype=float)
    bg = np.asarray(gyro_bias, dtype=float)
    ba = np.asarray(accel_bias, dtype=float)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, 6))
    out = []
    for k, t in enumerate(times):
        R_wb = traj.rotation(t)
        accel = R_wb.T @ (acc_w[k] - g) + ba + accel_noise * noise[k, 3:]
        gyro = omega[k] + bg + gyro_noise * noise[k, :3]
        out.append(ImuSample(float(t), gyro, accel))
    return out


@dataclass(frozen=True)
class SimFrame:
    """One camera frame's ground-truth observations."""

    index: int
    t: float
    ids: np.ndarray  # landmark ids, (k,)
    pixels: np.ndarray  # (k, 2), with noise if requested
    bearings_true: np.ndarray  # (k, 3) noise-free camera-frame bearings
    points_world: np.ndarray  # (k, 3)


def camera_pose(world: World, t: float):
    """World-from-camera pose at time t: X_w = R_wc X_c + p_wc."""
    R_wb = world.trajectory.rotation(t)
    p_wb = world.trajectory.position(t)
    return R_wb @ world.R_bc, p_wb + R_wb @ world.p_bc


def observe(
    world: World,
    frame_times,
    pixel_noise: Optional[float] = None,
    fov_override: Optional[tuple] = None,
    seed: Optional[int] = None,
    min_range: float = 0.3,
) -> list[SimFrame]:
    """Project landmarks into each frame within the zenith band.

    The effective band is the intersection of the calibration FoV and
    fov_override, which is how the ablation restricts the usable zenith
    range.  Track ids are landmark indices.
    """
    cfg = world.cfg
    intr = world.intrinsics
    sigma = cfg.pixel_noise if pixel_noise is None else pixel_noise
    override = cfg.fov_override if fov_override is None else fov_override
    tmin, tmax = intr.fov_range
    if override is not None:
        tmin, tmax = max(tmin, override[0]), min(tmax, override[1])
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)

    frames = []
    for idx, t in enumerate(frame_times):
        R_wc, p_wc = camera_pose(world, float(t))
        X_c = (world.landmarks - p_wc) @ R_wc
        rng_dist = np.linalg.norm(X_c, axis=1)
        safe = rng_dist > min_range
        bear = X_c / np.where(safe, rng_dist, 1.0)[:, None]
        zen = zenith_angle(bear)
        vis = safe & (zen >= tmin) & (zen <= tmax)
        pix, ok = project_many(intr, bear[vis])
        ok &= np.atleast_1d(in_image_bounds(intr, pix))
        ids = np.flatnonzero(vis)[ok]
        pix = pix[ok]
        if sigma > 0:
            pix = pix + sigma * rng.standard_normal(pix.shape)
        if len(ids) == 0:
            warnings.warn(f"frame {idx} at t={t:.3f}s sees no landmarks", stacklevel=2)
        frames.append(
            SimFrame(
                index=idx,
                t=float(t),
                ids=ids,
                pixels=pix,
                bearings_true=bear[vis][ok],
                points_world=world.landmarks[ids],
            )
        )
    return frames


# ---------------------------------------------------------------------------
# Procedural environment rendering.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvTexture:
    """Sum-of-cosine-lobes intensity field on a far sphere.

    Intensity at a view ray is a function of where the ray meets a
    sphere of radius `sphere_radius` around the origin; at indoor-scale
    camera motion the parallax is negligible, so views from nearby
    positions differ essentially by rotation only.
    """

    dirs: np.ndarray  # (K, 3) unit lobe directions
    freqs: np.ndarray  # (K,)
    amps: np.ndarray  # (K,)
    phases: np.ndarray  # (K,)
    sphere_radius: float = 60.0

    @classmethod
    def generate(cls, seed: int = 0, components: int = 48, sphere_radius: float = 60.0):
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((components, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        freqs = np.exp(rng.uniform(np.log(4.0), np.log(60.0), components))
        amps = rng.uniform(0.4, 1.0, components) / np.sqrt(components)
        phases = rng.uniform(0.0, 2.0 * np.pi, components)
        return cls(d, freqs, amps, phases, sphere_radius)

    def intensity(self, dirs_world: np.ndarray, origin=None) -> np.ndarray:
        """Raw intensity for unit world rays from `origin` (default 0)."""
        d = dirs_world
        if origin is not None:
            o = np.asarray(origin, dtype=float)
            od = d @ o
            tstar = -od + np.sqrt(
                np.maximum(od * od - (o @ o) + self.sphere_radius**2, 0.0)
            )
            pts = o[None, :] + tstar[:, None] * d
            d = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        phase = d @ (self.dirs * self.freqs[:, None]).T + self.phases
        return np.cos(phase) @ self.amps


_BEARING_CACHE: dict = {}


def _pixel_bearings(intr: PolynomialIntrinsics) -> np.ndarray:
    key = (intr.poly, intr.center, intr.image_size, intr.affine)
    if key not in _BEARING_CACHE:
        w, h = intr.image_size
        u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        _BEARING_CACHE[key] = unproject(intr, pix)
    return _BEARING_CACHE[key]


def render_view(
    world: World, t: float, texture: EnvTexture, fov_margin_deg: float = 3.0
) -> np.ndarray:
    """Grayscale uint8 image of the environment texture at time t.

    Pixels outside the calibrated zenith band (plus a small margin) are
    black, like the unused region of a panoramic annular image.
    """
    intr = world.intrinsics
    w, h = intr.image_size
    bear = _pixel_bearings(intr)
    R_wc, p_wc = camera_pose(world, float(t))
    raw = texture.intensity(bear @ R_wc.T, origin=p_wc)
    # 3-sigma normalization keeps usable contrast; rare peaks clip.
    span = 3.0 * float(np.sqrt(0.5 * np.sum(texture.amps**2)))
    img = np.clip(128.0 + 127.0 * raw / span, 0.0, 255.0)
    zen = zenith_angle(bear)
    tmin, tmax = intr.fov_range
    img[(zen < tmin - fov_margin_deg) | (zen > tmax + fov_margin_deg)] = 0.0
    return img.reshape(h, w).astype(np.uint8)
