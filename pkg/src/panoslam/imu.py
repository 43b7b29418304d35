"""IMU preintegration: relative motion increments between frames.

Between two camera frames the gyro/accel stream is summarized into
increments (delta_p, delta_v, delta_q) that do not depend on the global
pose or velocity, plus first-order bias Jacobians and a propagated
covariance.  The 15-dim error state is ordered
(delta_p, delta_v, delta_theta, delta_ba, delta_bg).

World gravity points down: GRAVITY_W = (0, 0, -9.81).  Accelerometers
measure specific force, a_meas = R_wb^T (a_world - GRAVITY_W) + b_a.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientDataError
from .so3 import (
    quat_conj,
    quat_exp,
    quat_left,
    quat_mul,
    quat_normalize,
    quat_right,
    quat_to_rot,
    right_jacobian,
    skew,
)

GRAVITY = 9.81
GRAVITY_W = np.array([0.0, 0.0, -GRAVITY])

# Error-state block offsets.
P, V, TH, BA, BG = 0, 3, 6, 9, 12


@dataclass(frozen=True)
class ImuSample:
    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float).reshape(3))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float).reshape(3))


@dataclass(frozen=True)
class ImuNoise:
    """Per-sample measurement stds at the IMU rate and per-step walk stds."""

    acc_n: float = 0.08
    gyr_n: float = 0.004
    acc_w: float = 4.0e-5
    gyr_w: float = 2.0e-6

    def diag18(self) -> np.ndarray:
        return np.diag(
            np.concatenate(
                [
                    np.full(3, self.acc_n**2),
                    np.full(3, self.gyr_n**2),
                    np.full(3, self.acc_n**2),
                    np.full(3, self.gyr_n**2),
                    np.full(3, self.acc_w**2),
                    np.full(3, self.gyr_w**2),
                ]
            )
        )


@dataclass(frozen=True)
class PreintegratedImu:
    delta_p: np.ndarray
    delta_v: np.ndarray
    delta_q: np.ndarray  # rotation increment, frame i body to frame j body
    J_bias: np.ndarray  # (15, 6) sensitivity to (b_a, b_g) at bias_lin
    cov: np.ndarray  # (15, 15)
    dt_total: float
    bias_lin: tuple[np.ndarray, np.ndarray]  # (b_a, b_g) used at integration


def slice_samples(samples, t0: float, t1: float) -> list[ImuSample]:
    """Samples covering [t0, t1], interpolating the boundary readings.

    Returns a stream starting exactly at t0 and ending exactly at t1 so
    consecutive frame intervals tile the input without gaps or overlap.
    """
    if t1 <= t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    samples = list(samples)
    ts = np.array([s.t for s in samples])
    if len(samples) < 2 or t0 < ts[0] - 1e-9 or t1 > ts[-1] + 1e-9:
        raise InsufficientDataError(
            f"imu stream [{ts[0] if len(ts) else '?'}, {ts[-1] if len(ts) else '?'}] "
            f"does not cover [{t0}, {t1}]"
        )

    def at(t):
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        a, b = samples[k], samples[k + 1]
        u = np.clip((t - a.t) / (b.t - a.t), 0.0, 1.0)
        return ImuSample(t, (1 - u) * a.gyro + u * b.gyro, (1 - u) * a.accel + u * b.accel)

    inner = [s for s in samples if t0 + 1e-12 < s.t < t1 - 1e-12]
    return [at(t0)] + inner + [at(t1)]


def preintegrate(samples, bias=(np.zeros(3), np.zeros(3)), noise: ImuNoise = ImuNoise()):
    """Midpoint preintegration of an IMU sample stream.

    Increments are expressed in the body frame at the first sample.
    The covariance is propagated through the discrete error-state
    transition and symmetrized each step; the full-state Jacobian gives
    the bias sensitivity used by correct_for_bias.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise InsufficientDataError(f"preintegration needs >= 2 samples, got {len(samples)}")
    ts = np.array([s.t for s in samples])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("imu timestamps must be strictly increasing")
    ba = np.asarray(bias[0], dtype=float).reshape(3)
    bg = np.asarray(bias[1], dtype=float).reshape(3)

    dp = np.zeros(3)
    dv = np.zeros(3)
    dq = np.array([1.0, 0.0, 0.0, 0.0])
    J = np.eye(15)
    cov = np.zeros((15, 15))
    N = noise.diag18()

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        w_mid = 0.5 * (s0.gyro + s1.gyro) - bg
        R0 = quat_to_rot(dq)
        dq_new = quat_normalize(quat_mul(dq, quat_exp(w_mid * dt)))
        R1 = quat_to_rot(dq_new)
        a0 = s0.accel - ba
        a1 = s1.accel - ba
        acc_mid = 0.5 * (R0 @ a0 + R1 @ a1)
        dp_new = dp + dv * dt + 0.5 * acc_mid * dt * dt
        dv_new = dv + acc_mid * dt

        # Error-state transition (order p, v, theta, ba, bg).
        A = R0 @ skew(a0)
        B = R1 @ skew(a1)
        Rx = np.eye(3) - skew(w_mid * dt)
        Rm = 0.5 * (R0 + R1)
        F = np.eye(15)
        F[P:V, V:TH] = np.eye(3) * dt
        F_vth = -0.5 * dt * (A + B @ Rx)
        F[V:TH, TH:BA] = F_vth
        F[P:V, TH:BA] = 0.5 * dt * F_vth
        F[V:TH, BA:BG] = -Rm * dt
        F[P:V, BA:BG] = -0.5 * Rm * dt * dt
        F_vbg = 0.5 * dt * dt * B
        F[V:TH, BG:] = F_vbg
        F[P:V, BG:] = 0.5 * dt * F_vbg
        F[TH:BA, TH:BA] = Rx
        F[TH:BA, BG:] = -np.eye(3) * dt

        # Noise input (na0, ng0, na1, ng1, nba, nbg).  Each raw sample is
        # shared by two midpoint averages, correlating adjacent steps; the
        # sqrt(2) on the measurement columns restores the dispersion of the
        # correlated chain under the per-step independence assumption.
        h = 0.5 * np.sqrt(2.0)
        G = np.zeros((15, 18))
        G[V:TH, 0:3] = h * R0 * dt
        G[V:TH, 6:9] = h * R1 * dt
        g_vng = -0.5 * h * dt * dt * B
        G[V:TH, 3:6] = g_vng
        G[V:TH, 9:12] = g_vng
        G[P:V, :] = 0.5 * dt * G[V:TH, :]
        G[TH:BA, 3:6] = h * np.eye(3) * dt
        G[TH:BA, 9:12] = h * np.eye(3) * dt
        G[BA:BG, 12:15] = np.eye(3) * dt
        G[BG:, 15:18] = np.eye(3) * dt

        cov = F @ cov @ F.T + G @ N @ G.T
        cov = 0.5 * (cov + cov.T)
        J = F @ J

        dp, dv, dq = dp_new, dv_new, dq_new

    return PreintegratedImu(
        delta_p=dp,
        delta_v=dv,
        delta_q=dq,
        J_bias=J[:, BA:],
        cov=cov,
        dt_total=float(ts[-1] - ts[0]),
        bias_lin=(ba, bg),
    )


def correct_for_bias(pre: PreintegratedImu, new_bias) -> PreintegratedImu:
    """First-order update of the increments for a new bias estimate.

    Uses the stored Jacobians; callers should re-integrate instead when
    the bias moved far from the linearization point.
    """
    dba = np.asarray(new_bias[0], dtype=float) - pre.bias_lin[0]
    dbg = np.asarray(new_bias[1], dtype=float) - pre.bias_lin[1]
    J = pre.J_bias
    dp = pre.delta_p + J[P:V, 0:3] @ dba + J[P:V, 3:6] @ dbg
    dv = pre.delta_v + J[V:TH, 0:3] @ dba + J[V:TH, 3:6] @ dbg
    dq = quat_mul(pre.delta_q, quat_exp(J[TH:BA, 3:6] @ dbg))
    return PreintegratedImu(
        delta_p=dp,
        delta_v=dv,
        delta_q=dq,
        J_bias=pre.J_bias,
        cov=pre.cov,
        dt_total=pre.dt_total,
        bias_lin=(pre.bias_lin[0] + dba, pre.bias_lin[1] + dbg),
    )


@dataclass
class NavState:
    """Position, velocity, attitude (body to world), and IMU biases."""

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        self.ba = np.asarray(self.ba, dtype=float).reshape(3)
        self.bg = np.asarray(self.bg, dtype=float).reshape(3)


def _corrected_increments(pre: PreintegratedImu, ba_i, bg_i):
    dba = ba_i - pre.bias_lin[0]
    dbg = bg_i - pre.bias_lin[1]
    J = pre.J_bias
    dp = pre.delta_p + J[P:V, 0:3] @ dba + J[P:V, 3:6] @ dbg
    dv = pre.delta_v + J[V:TH, 0:3] @ dba + J[V:TH, 3:6] @ dbg
    phi = J[TH:BA, 3:6] @ dbg
    dq = quat_mul(pre.delta_q, quat_exp(phi))
    return dp, dv, dq, phi


def imu_residual(pre: PreintegratedImu, state_i: NavState, state_j: NavState, gravity=GRAVITY_W):
    """15-dim preintegration residual (delta_p, delta_v, delta_theta, ba, bg).

    Zero when the two states are exactly consistent with the integrated
    motion at the states' biases.
    """
    r, _, _ = imu_residual_jacobians(pre, state_i, state_j, gravity, with_jacobians=False)
    return r


def imu_residual_jacobians(
    pre: PreintegratedImu,
    state_i: NavState,
    state_j: NavState,
    gravity=GRAVITY_W,
    with_jacobians: bool = True,
):
    """Residual plus analytic Jacobians w.r.t. both 15-dim states.

    State blocks are (p, v, theta, ba, bg) with attitude perturbed on
    the right: q <- q * Exp(dtheta).
    """
    g = np.asarray(gravity, dtype=float)
    T = pre.dt_total
    R_i = quat_to_rot(state_i.q)
    RiT = R_i.T
    dp, dv, dq, phi = _corrected_increments(pre, state_i.ba, state_i.bg)

    p_term = state_j.p - state_i.p - state_i.v * T - 0.5 * g * T * T
    v_term = state_j.v - state_i.v - g * T
    r = np.zeros(15)
    r[P:V] = RiT @ p_term - dp
    r[V:TH] = RiT @ v_term - dv
    q_ij = quat_mul(quat_conj(state_i.q), state_j.q)
    q_err = quat_mul(quat_conj(dq), q_ij)
    r[TH:BA] = 2.0 * q_err[1:]
    r[BA:BG] = state_j.ba - state_i.ba
    r[BG:] = state_j.bg - state_i.bg

    if not with_jacobians:
        return r, None, None

    J = pre.J_bias
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))

    Ji[P:V, P:V] = -RiT
    Ji[P:V, V:TH] = -RiT * T
    Ji[P:V, TH:BA] = skew(RiT @ p_term)
    Ji[P:V, BA:BG] = -J[P:V, 0:3]
    Ji[P:V, BG:] = -J[P:V, 3:6]
    Jj[P:V, P:V] = RiT

    Ji[V:TH, V:TH] = -RiT
    Ji[V:TH, TH:BA] = skew(RiT @ v_term)
    Ji[V:TH, BA:BG] = -J[V:TH, 0:3]
    Ji[V:TH, BG:] = -J[V:TH, 3:6]
    Jj[V:TH, V:TH] = RiT

    # Attitude block: r_th = 2 vec(dq^-1 * q_i^-1 * q_j), with
    # dq = delta_q * Exp(phi) and phi = J_th_bg * dbg, so the bias
    # derivative picks up the SO(3) right Jacobian at phi.
    Ji[TH:BA, TH:BA] = -(quat_left(quat_conj(dq)) @ quat_right(q_ij))[1:, 1:]
    Jj[TH:BA, TH:BA] = quat_left(q_err)[1:, 1:]
    Ji[TH:BA, BG:] = (
        -quat_right(q_err)[1:, 1:] @ right_jacobian(phi) @ J[TH:BA, 3:6]
    )

    Ji[BA:BG, BA:BG] = -np.eye(3)
    Jj[BA:BG, BA:BG] = np.eye(3)
    Ji[BG:, BG:] = -np.eye(3)
    Jj[BG:, BG:] = np.eye(3)
    return r, Ji, Jj


def integrate_state(state: NavState, samples, gravity=GRAVITY_W) -> NavState:
    """Forward midpoint integration of the full state (test oracle aid)."""
    p, v, q = state.p.copy(), state.v.copy(), state.q.copy()
    samples = list(samples)
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        w_mid = 0.5 * (s0.gyro + s1.gyro) - state.bg
        R0 = quat_to_rot(q)
        q_new = quat_normalize(quat_mul(q, quat_exp(w_mid * dt)))
        R1 = quat_to_rot(q_new)
        acc = 0.5 * (R0 @ (s0.accel - state.ba) + R1 @ (s1.accel - state.ba)) + gravity
        p = p + v * dt + 0.5 * acc * dt * dt
        v = v + acc * dt
        q = q_new
    return NavState(p, v, q, state.ba.copy(), state.bg.copy())


# ---------------------------------------------------------------------------
# CSV stream: t, gx, gy, gz, ax, ay, az
# ---------------------------------------------------------------------------


def write_imu_csv(path, samples) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "gx", "gy", "gz", "ax", "ay", "az"])
        for s in samples:
            w.writerow(
                [repr(float(s.t))]
                + [repr(float(x)) for x in s.gyro]
                + [repr(float(x)) for x in s.accel]
            )


def read_imu_csv(path) -> list[ImuSample]:
    path = Path(path)
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            return out
        for row in reader:
            if not row:
                continue
            vals = [float(x) for x in row]
            out.append(ImuSample(vals[0], np.array(vals[1:4]), np.array(vals[4:7])))
    return out
