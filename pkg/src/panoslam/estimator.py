"""Sliding-window visual-inertial estimator on bearing residuals.

Each window frame carries a 15-dim state (p, v, q, ba, bg); each
tracked feature carries one inverse distance along its anchor bearing.
The visual residual lives in the 2-dim tangent plane of the observed
unit bearing, so observations past 90 degrees zenith constrain the
state exactly like any others.  Old frames leave the window through a
Schur-complement marginal prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateGeometryError,
    InitializationError,
    InsufficientDataError,
    LowParallaxError,
    NotReadyError,
    OptimizationError,
)
from .geometry import skew_batch, triangulate_rays
from .imu import (
    BA,
    BG,
    GRAVITY_W,
    ImuNoise,
    NavState,
    P,
    TH,
    V,
    imu_residual_jacobians,
    preintegrate,
    slice_samples,
)
from .initializer import InitializationResult, InitializerConfig, initialize
from .so3 import (
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_normalize,
    quat_to_rot,
    rot_to_quat,
    rot_z,
)

STATE_DIM = 15


@dataclass
class EstimatorConfig:
    window_size: int = 10  # keyframes kept besides the newest frame
    bearing_sigma: float = 4e-3  # rad; about one pixel for the sample lens
    huber_delta: float = 2.0  # on the whitened 2-norm of one observation
    max_iterations: int = 20
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    keyframe_parallax_deg: float = 0.5
    keyframe_track_ratio: float = 0.6
    target_track_count: int = 150
    min_inv_dist: float = 1e-4
    max_inv_dist: float = 1e4
    default_depth: float = 3.0
    gauge_weight: float = 1e6
    imu_noise: ImuNoise = field(default_factory=ImuNoise)
    gravity: tuple = tuple(GRAVITY_W)


@dataclass
class FrameState:
    index: int
    timestamp: float
    nav: NavState


@dataclass
class Feature:
    track_id: int
    anchor: int  # frame index owning the reference bearing
    bearing_a: np.ndarray  # unit bearing in the anchor camera
    inv_dist: float
    obs: dict = field(default_factory=dict)  # frame index -> unit bearing

    def observer_indices(self):
        return [k for k in self.obs if k != self.anchor]


@dataclass
class MarginalPrior:
    """Gaussian prior sqrt-form: r = sqrt_info @ boxminus(x, lin) + offset."""

    order: list  # frame indices covered, 15 columns each
    sqrt_info: np.ndarray  # (k, 15 * len(order))
    offset: np.ndarray  # (k,)
    lin: dict  # frame index -> NavState at linearization


@dataclass
class WindowState:
    frames: list  # FrameState, time ordered
    features: dict  # track id -> Feature
    preints: list  # between consecutive frames
    chunks: list  # raw ImuSample lists matching preints (for merging)
    R_bc: np.ndarray
    p_bc: np.ndarray
    prior: Optional[MarginalPrior] = None

    def slot_of(self, frame_index: int) -> int:
        for i, f in enumerate(self.frames):
            if f.index == frame_index:
                return i
        raise KeyError(f"frame {frame_index} not in window")

    def frame_by_index(self, frame_index: int) -> FrameState:
        return self.frames[self.slot_of(frame_index)]


def gauge_prior(frame: FrameState, weight: float) -> MarginalPrior:
    """Pin the window's 4-dof gauge: first-frame position and yaw.

    Built fresh at every solve and never folded into the marginal
    prior, so the prior keeps the problem's natural gauge null space
    and its eigenvalue range stays at data scale.
    """
    S = np.zeros((4, STATE_DIM))
    S[0:3, P:V] = weight * np.eye(3)
    # yaw gradient under right perturbation: third row of the exact
    # body-rate -> ZYX Euler-rate map at the linearization attitude
    R = quat_to_rot(frame.nav.q)
    pitch = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    roll = np.arctan2(R[2, 1], R[2, 2])
    S[3, TH:BA] = weight * np.array(
        [0.0, np.sin(roll) / np.cos(pitch), np.cos(roll) / np.cos(pitch)]
    )
    return MarginalPrior(
        order=[frame.index],
        sqrt_info=S,
        offset=np.zeros(4),
        lin={frame.index: replace(frame.nav)},
    )


def _active_features(window: WindowState):
    """Features with at least one non-anchor observation, sorted by id."""
    out = []
    for tid in sorted(window.features):
        f = window.features[tid]
        if any(k != f.anchor for k in f.obs):
            out.append(f)
    return out


def _tangent_bases(bearings: np.ndarray) -> np.ndarray:
    """(n, 3) unit vectors -> (n, 3, 2) orthonormal tangent bases."""
    n = len(bearings)
    axis = np.zeros((n, 3))
    axis[np.arange(n), np.argmin(np.abs(bearings), axis=1)] = 1.0
    b1 = axis - np.sum(axis * bearings, axis=1, keepdims=True) * bearings
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(bearings, b1)
    return np.stack([b1, b2], axis=2)


class _VisualBatch:
    """Flattened visual observations with per-call constant pieces."""

    def __init__(self, window: WindowState, features):
        slot = {f.index: i for i, f in enumerate(window.frames)}
        a_slot, j_slot, f_col, b_a, b_obs = [], [], [], [], []
        for col, feat in enumerate(features):
            for k, b in feat.obs.items():
                if k == feat.anchor:
                    continue
                a_slot.append(slot[feat.anchor])
                j_slot.append(slot[k])
                f_col.append(col)
                b_a.append(feat.bearing_a)
                b_obs.append(b)
        self.n = len(a_slot)
        self.a_slot = np.array(a_slot, dtype=int)
        self.j_slot = np.array(j_slot, dtype=int)
        self.f_col = np.array(f_col, dtype=int)
        self.b_a = np.asarray(b_a, dtype=float).reshape(self.n, 3)
        self.b_obs = np.asarray(b_obs, dtype=float).reshape(self.n, 3)
        self.bases = _tangent_bases(self.b_obs) if self.n else np.zeros((0, 3, 2))


def _visual_terms(window: WindowState, batch: _VisualBatch, lam: np.ndarray, cfg):
    """Whitened residuals (n, 2) plus geometry intermediates."""
    R_w = np.array([quat_to_rot(f.nav.q) for f in window.frames])
    p_w = np.array([f.nav.p for f in window.frames])
    R_a = R_w[batch.a_slot]
    p_a = p_w[batch.a_slot]
    R_j = R_w[batch.j_slot]
    p_j = p_w[batch.j_slot]
    lam_o = lam[batch.f_col]

    X_ca = batch.b_a / lam_o[:, None]
    X_ba = X_ca @ window.R_bc.T + window.p_bc
    pt_w = np.einsum("nij,nj->ni", R_a, X_ba) + p_a
    X_bj = np.einsum("nji,nj->ni", R_j, pt_w - p_j)  # R_j^T (pt - p_j)
    X_cj = (X_bj - window.p_bc) @ window.R_bc

    norm = np.linalg.norm(X_cj, axis=1)
    u = X_cj / norm[:, None]
    r = np.einsum("nir,ni->nr", batch.bases, u - batch.b_obs) / cfg.bearing_sigma
    return r, (R_a, R_j, X_ba, X_bj, X_cj, norm, u)


def _huber_weights(r: np.ndarray, delta: float):
    """Per-observation sqrt IRLS weight and exact robust cost."""
    e = np.linalg.norm(r, axis=1)
    w = np.ones_like(e)
    out = e > delta
    w[out] = delta / e[out]
    cost = np.where(out, delta * e - 0.5 * delta * delta, 0.5 * e * e)
    return np.sqrt(w), float(np.sum(cost))


def _imu_sqrt_info(pre) -> np.ndarray:
    L = np.linalg.cholesky(pre.cov)
    return scipy.linalg.solve_triangular(L, np.eye(STATE_DIM), lower=True)


def _prior_residual(prior: MarginalPrior, window: WindowState):
    """r = sqrt_info @ dx + offset with dx stacked over prior.order."""
    dx = np.zeros(STATE_DIM * len(prior.order))
    for i, idx in enumerate(prior.order):
        nav = window.frame_by_index(idx).nav
        lin = prior.lin[idx]
        o = STATE_DIM * i
        dx[o + P : o + V] = nav.p - lin.p
        dx[o + V : o + TH] = nav.v - lin.v
        dx[o + TH : o + BA] = quat_log(quat_mul(quat_conj(lin.q), nav.q))
        dx[o + BA : o + BG] = nav.ba - lin.ba
        dx[o + BG : o + STATE_DIM] = nav.bg - lin.bg
    return prior.sqrt_info @ dx + prior.offset


def _cost(window: WindowState, batch, features, lam, cfg, gauge=None) -> float:
    r_vis, _ = _visual_terms(window, batch, lam, cfg)
    _, total = _huber_weights(r_vis, cfg.huber_delta)
    g = np.asarray(cfg.gravity, dtype=float)
    for pre, fi, fj in zip(window.preints, window.frames[:-1], window.frames[1:]):
        r, _, _ = imu_residual_jacobians(pre, fi.nav, fj.nav, g, with_jacobians=False)
        rw = _imu_sqrt_info(pre) @ r
        total += 0.5 * float(rw @ rw)
    for prior in (window.prior, gauge):
        if prior is not None:
            rp = _prior_residual(prior, window)
            total += 0.5 * float(rp @ rp)
    return total


def _scatter_h(H, rows, cols, blocks):
    np.add.at(H, (rows[:, :, None], cols[:, None, :]), blocks)


def _assemble(window: WindowState, batch, features, lam, cfg, gauge=None):
    """Gauss-Newton normal equations H, g and robust cost over the window."""
    nf = len(window.frames)
    dim = STATE_DIM * nf + len(features)
    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    total = 0.0

    if batch.n:
        r_vis, geo = _visual_terms(window, batch, lam, cfg)
        R_a, R_j, X_ba, X_bj, X_cj, norm, u = geo
        sw, vis_cost = _huber_weights(r_vis, cfg.huber_delta)
        total += vis_cost

        proj = (np.eye(3) - np.einsum("ni,nj->nij", u, u)) / norm[:, None, None]
        G = np.einsum("nir,nik->nrk", batch.bases, proj)
        G *= (sw / cfg.bearing_sigma)[:, None, None]
        r_w = r_vis * sw[:, None]

        RbcT = window.R_bc.T
        # M = d r / d pt_w
        M = np.einsum("nrk,kl,nml->nrm", G, RbcT, R_j)
        J_pa = M
        J_pj = -M
        J_ta = -np.einsum("nrm,nmk,nkl->nrl", M, R_a, skew_batch(X_ba))
        J_tj = np.einsum("nrk,kl,nlm->nrm", G, RbcT, skew_batch(X_bj))
        dXa = -batch.b_a / (lam[batch.f_col] ** 2)[:, None]
        J_lam = np.einsum("nrm,nmk,kl,nl->nr", M, R_a, window.R_bc, dXa)[:, :, None]

        base_a = STATE_DIM * batch.a_slot
        base_j = STATE_DIM * batch.j_slot
        cols = [
            base_a[:, None] + np.arange(P, P + 3),
            base_a[:, None] + np.arange(TH, TH + 3),
            base_j[:, None] + np.arange(P, P + 3),
            base_j[:, None] + np.arange(TH, TH + 3),
            (STATE_DIM * nf + batch.f_col)[:, None],
        ]
        jacs = [J_pa, J_ta, J_pj, J_tj, J_lam]
        for ci, Ji in zip(cols, jacs):
            np.add.at(g, ci, np.einsum("nri,nr->ni", Ji, r_w))
            for cj, Jj in zip(cols, jacs):
                _scatter_h(H, ci, cj, np.einsum("nri,nrj->nij", Ji, Jj))

    g_vec = np.asarray(cfg.gravity, dtype=float)
    for m, pre in enumerate(window.preints):
        fi, fj = window.frames[m], window.frames[m + 1]
        r, Ji, Jj = imu_residual_jacobians(pre, fi.nav, fj.nav, g_vec)
        S = _imu_sqrt_info(pre)
        r = S @ r
        Ji = S @ Ji
        Jj = S @ Jj
        total += 0.5 * float(r @ r)
        oi, oj = STATE_DIM * m, STATE_DIM * (m + 1)
        H[oi : oi + 15, oi : oi + 15] += Ji.T @ Ji
        H[oi : oi + 15, oj : oj + 15] += Ji.T @ Jj
        H[oj : oj + 15, oi : oi + 15] += Jj.T @ Ji
        H[oj : oj + 15, oj : oj + 15] += Jj.T @ Jj
        g[oi : oi + 15] += Ji.T @ r
        g[oj : oj + 15] += Jj.T @ r

    for prior in (window.prior, gauge):
        if prior is None:
            continue
        rp = _prior_residual(prior, window)
        total += 0.5 * float(rp @ rp)
        slots = [window.slot_of(idx) for idx in prior.order]
        cols = np.concatenate(
            [STATE_DIM * s + np.arange(STATE_DIM) for s in slots]
        )
        S = prior.sqrt_info
        H[np.ix_(cols, cols)] += S.T @ S
        g[cols] += S.T @ rp

    return H, g, total


def _snapshot(window: WindowState, features):
    navs = [replace(f.nav) for f in window.frames]
    lams = [f.inv_dist for f in features]
    return navs, lams


def _restore(window: WindowState, features, snap):
    navs, lams = snap
    # hand out copies so a later _apply_step cannot corrupt the snapshot
    for f, nav in zip(window.frames, navs):
        f.nav = replace(nav)
    for f, l in zip(features, lams):
        f.inv_dist = l


def _apply_step(window: WindowState, features, delta, cfg):
    for i, f in enumerate(window.frames):
        o = STATE_DIM * i
        nav = f.nav
        nav.p = nav.p + delta[o + P : o + V]
        nav.v = nav.v + delta[o + V : o + TH]
        nav.q = quat_normalize(quat_mul(nav.q, quat_exp(delta[o + TH : o + BA])))
        nav.ba = nav.ba + delta[o + BA : o + BG]
        nav.bg = nav.bg + delta[o + BG : o + STATE_DIM]
    base = STATE_DIM * len(window.frames)
    for c, f in enumerate(features):
        f.inv_dist = float(
            np.clip(f.inv_dist + delta[base + c], cfg.min_inv_dist, cfg.max_inv_dist)
        )


@dataclass
class OptimizeReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool


def optimize_window(window: WindowState, cfg: EstimatorConfig) -> OptimizeReport:
    """Damped Gauss-Newton over all window states and feature depths."""
    features = _active_features(window)
    batch = _VisualBatch(window, features)
    gauge = gauge_prior(window.frames[0], cfg.gauge_weight)
    lam_damp = 1e-4
    initial_cost = None
    cost = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        lam = np.array([f.inv_dist for f in features])
        H, g, cost = _assemble(window, batch, features, lam, cfg, gauge)
        if initial_cost is None:
            initial_cost = cost
        if not np.isfinite(cost):
            raise OptimizationError(f"non-finite cost at iteration {it}")
        if np.max(np.abs(g)) < cfg.gradient_tol:
            converged = True
            break
        snap = _snapshot(window, features)
        accepted = False
        diag = np.diag(H).copy()
        diag[diag < 1e-12] = 1e-12
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam_damp * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam_damp *= 10.0
                continue
            _apply_step(window, features, delta, cfg)
            new_lam = np.array([f.inv_dist for f in features])
            new_cost = _cost(window, batch, features, new_lam, cfg, gauge)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                lam_damp = max(lam_damp / 3.0, 1e-10)
                break
            _restore(window, features, snap)
            lam_damp *= 10.0
        if not accepted:
            converged = True  # no descent direction left at damping limit
            break
        if np.linalg.norm(delta) < cfg.step_tol:
            converged = True
            break
    final = _cost(window, batch, features,
                  np.array([f.inv_dist for f in features]), cfg, gauge)
    return OptimizeReport(it, float(initial_cost), float(final), converged)


def _qr_marginalize(rows, rhs, n_marg):
    """Eliminate the leading n_marg columns of a stacked sqrt system.

    rows @ dx + rhs is the whitened residual stack of every factor that
    touches a marginalized variable.  Householder QR rotates it into
    block-triangular form; the trailing block is the exact marginal
    prior in sqrt form.  Working on sqrt factors keeps the huge dynamic
    range between bias-walk stiffness and weak depth directions
    representable, which squared normal equations cannot do.
    """
    q, r = scipy.linalg.qr(rows, mode="economic")
    c = q.T @ rhs
    S = r[n_marg:, n_marg:]
    e0 = c[n_marg:]
    scale = np.abs(S).max() if S.size else 0.0
    keep = np.linalg.norm(S, axis=1) > scale * 1e-14
    return S[keep], e0[keep]


def marginalize_oldest(window: WindowState, cfg: EstimatorConfig) -> None:
    """Fold the oldest frame and its anchored features into the prior."""
    if len(window.frames) < 2:
        raise OptimizationError("cannot marginalize a single-frame window")
    old = window.frames[0]
    marg_feats = [
        f
        for f in _active_features(window)
        if f.anchor == old.index
    ]

    involved = set(window.prior.order) if window.prior else set()
    involved.add(window.frames[1].index)
    for f in marg_feats:
        involved.update(f.observer_indices())
    involved.discard(old.index)
    kept = [f.index for f in window.frames if f.index in involved]

    # local layout: old frame [0, 15), depths [15, 15 + nm), kept frame i
    # at 15 + nm + 15 i; marginalized variables lead the ordering
    nm = len(marg_feats)
    dim = STATE_DIM * (1 + len(kept)) + nm
    n_marg = STATE_DIM + nm
    kept_base = {idx: n_marg + STATE_DIM * i for i, idx in enumerate(kept)}

    def frame_cols(idx):
        if idx == old.index:
            return np.arange(STATE_DIM)
        return kept_base[idx] + np.arange(STATE_DIM)

    row_blocks = []
    rhs_blocks = []

    # visual factors of the marginalized features
    if marg_feats:
        sub = WindowState(
            frames=window.frames,
            features={f.track_id: f for f in marg_feats},
            preints=[],
            chunks=[],
            R_bc=window.R_bc,
            p_bc=window.p_bc,
        )
        batch = _VisualBatch(sub, marg_feats)
        lam = np.array([f.inv_dist for f in marg_feats])
        r_vis, geo = _visual_terms(sub, batch, lam, cfg)
        R_a, R_j, X_ba, X_bj, X_cj, norm, u = geo
        sw, _ = _huber_weights(r_vis, cfg.huber_delta)
        proj = (np.eye(3) - np.einsum("ni,nj->nij", u, u)) / norm[:, None, None]
        G = np.einsum("nir,nik->nrk", batch.bases, proj)
        G *= (sw / cfg.bearing_sigma)[:, None, None]
        r_w = r_vis * sw[:, None]
        RbcT = window.R_bc.T
        M = np.einsum("nrk,kl,nml->nrm", G, RbcT, R_j)
        J_pa = M
        J_pj = -M
        J_ta = -np.einsum("nrm,nmk,nkl->nrl", M, R_a, skew_batch(X_ba))
        J_tj = np.einsum("nrk,kl,nlm->nrm", G, RbcT, skew_batch(X_bj))
        dXa = -batch.b_a / (lam[batch.f_col] ** 2)[:, None]
        J_lam = np.einsum("nrm,nmk,kl,nl->nr", M, R_a, window.R_bc, dXa)[:, :, None]

        frame_idx_of_slot = [f.index for f in window.frames]
        base_a = np.array(
            [frame_cols(frame_idx_of_slot[s])[0] for s in batch.a_slot]
        )
        base_j = np.array(
            [frame_cols(frame_idx_of_slot[s])[0] for s in batch.j_slot]
        )
        cols = [
            base_a[:, None] + np.arange(P, P + 3),
            base_a[:, None] + np.arange(TH, TH + 3),
            base_j[:, None] + np.arange(P, P + 3),
            base_j[:, None] + np.arange(TH, TH + 3),
            (STATE_DIM + batch.f_col)[:, None],
        ]
        jacs = [J_pa, J_ta, J_pj, J_tj, J_lam]
        rows_vis = np.zeros((batch.n, 2, dim))
        arange_n = np.arange(batch.n)[:, None, None]
        arange_2 = np.arange(2)[None, :, None]
        for ci, Ji in zip(cols, jacs):
            np.add.at(rows_vis, (arange_n, arange_2, ci[:, None, :]), Ji)
        row_blocks.append(rows_vis.reshape(2 * batch.n, dim))
        rhs_blocks.append(r_w.reshape(-1))

    # the IMU factor between the two oldest frames
    g_vec = np.asarray(cfg.gravity, dtype=float)
    pre = window.preints[0]
    fi, fj = window.frames[0], window.frames[1]
    r, Ji, Jj = imu_residual_jacobians(pre, fi.nav, fj.nav, g_vec)
    S = _imu_sqrt_info(pre)
    rows_imu = np.zeros((STATE_DIM, dim))
    rows_imu[:, frame_cols(fi.index)] = S @ Ji
    rows_imu[:, frame_cols(fj.index)] = S @ Jj
    row_blocks.append(rows_imu)
    rhs_blocks.append(S @ r)

    # previous marginal prior (gauge-free by construction)
    if window.prior is not None:
        rp = _prior_residual(window.prior, window)
        Sp = window.prior.sqrt_info
        cols_p = np.concatenate([frame_cols(idx) for idx in window.prior.order])
        rows_p = np.zeros((Sp.shape[0], dim))
        rows_p[:, cols_p] = Sp
        row_blocks.append(rows_p)
        rhs_blocks.append(rp)

    S_new, e0 = _qr_marginalize(
        np.concatenate(row_blocks), np.concatenate(rhs_blocks), n_marg
    )
    window.prior = MarginalPrior(
        order=kept,
        sqrt_info=S_new,
        offset=e0,
        lin={idx: replace(window.frame_by_index(idx).nav) for idx in kept},
    )

    # shrink the window
    window.frames.pop(0)
    window.preints.pop(0)
    window.chunks.pop(0)
    for f in marg_feats:
        del window.features[f.track_id]
    stale = [
        tid
        for tid, f in window.features.items()
        if f.anchor == old.index or old.index in f.obs
    ]
    for tid in stale:
        del window.features[tid]


def _marginalize_prior_frame(prior: MarginalPrior, frame_index: int) -> Optional[MarginalPrior]:
    """Remove one frame block from a prior by sqrt-space elimination."""
    if frame_index not in prior.order:
        return prior
    pos = prior.order.index(frame_index)
    k = len(prior.order)
    cols = np.arange(k * STATE_DIM).reshape(k, STATE_DIM)
    m_cols = cols[pos]
    r_cols = np.delete(cols, pos, axis=0).ravel()
    order = [idx for idx in prior.order if idx != frame_index]
    if not order:
        return None
    perm = np.concatenate([m_cols, r_cols])
    S_new, e0 = _qr_marginalize(prior.sqrt_info[:, perm], prior.offset, STATE_DIM)
    return MarginalPrior(
        order=order,
        sqrt_info=S_new,
        offset=e0,
        lin={idx: prior.lin[idx] for idx in order},
    )


def drop_frame(window: WindowState, slot: int, cfg: EstimatorConfig) -> None:
    """Discard a non-keyframe: merge its IMU span, drop its observations."""
    if slot <= 0 or slot >= len(window.frames):
        raise OptimizationError(f"cannot drop frame at slot {slot}")
    frame = window.frames[slot]
    idx = frame.index

    if window.prior is not None:
        window.prior = _marginalize_prior_frame(window.prior, idx)

    if slot < len(window.frames) - 1:
        merged = window.chunks[slot - 1][:-1] + window.chunks[slot]
        nav = window.frames[slot - 1].nav
        window.preints[slot - 1] = preintegrate(
            merged, (nav.ba, nav.bg), cfg.imu_noise
        )
        window.chunks[slot - 1] = merged
        window.preints.pop(slot)
        window.chunks.pop(slot)
    else:
        window.preints.pop(slot - 1)
        window.chunks.pop(slot - 1)
    window.frames.pop(slot)

    dead = []
    for tid, f in window.features.items():
        if idx in f.obs:
            del f.obs[idx]
        if f.anchor == idx:
            rest = sorted(f.obs)
            if not rest:
                dead.append(tid)
                continue
            new_anchor = rest[0]
            # transfer depth through the world point
            anchor_frame = window.frame_by_index(new_anchor)
            pt_w = _feature_world_point_from(f, frame, window)
            R_wb = quat_to_rot(anchor_frame.nav.q)
            X_c = window.R_bc.T @ (R_wb.T @ (pt_w - anchor_frame.nav.p) - window.p_bc)
            depth = np.linalg.norm(X_c)
            f.anchor = new_anchor
            f.bearing_a = f.obs[new_anchor]
            f.inv_dist = float(
                np.clip(
                    1.0 / max(depth, 1e-12), cfg.min_inv_dist, cfg.max_inv_dist
                )
            )
    for tid in dead:
        del window.features[tid]


def _feature_world_point_from(f: Feature, anchor_frame: FrameState, window: WindowState):
    R_wb = quat_to_rot(anchor_frame.nav.q)
    X_c = f.bearing_a / f.inv_dist
    return R_wb @ (window.R_bc @ X_c + window.p_bc) + anchor_frame.nav.p


def feature_world_point(window: WindowState, track_id: int) -> np.ndarray:
    f = window.features[track_id]
    return _feature_world_point_from(f, window.frame_by_index(f.anchor), window)


@dataclass
class KeyframePacket:
    """Immutable keyframe snapshot handed to the loop-closure consumer.

    Feature rows are the window features observed in this frame: tracked
    pixel, unit bearing, and the world point implied by the current
    anchor-depth estimate (so it drifts with the window).
    """

    index: int
    timestamp: float
    q_wb: np.ndarray
    p_wb: np.ndarray
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bearings: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    world_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


@dataclass
class VioStepResult:
    initialized: bool
    index: int
    timestamp: float
    q_wb: Optional[np.ndarray] = None
    p_wb: Optional[np.ndarray] = None
    v_w: Optional[np.ndarray] = None
    keyframe: Optional[KeyframePacket] = None
    report: Optional[OptimizeReport] = None


class VioEstimator:
    """Streaming front door: feed IMU samples and tracked frames in order."""

    def __init__(
        self,
        config: EstimatorConfig = None,
        init_config: InitializerConfig = None,
    ):
        self.cfg = config if config is not None else EstimatorConfig()
        self.init_cfg = init_config if init_config is not None else InitializerConfig()
        self.window: Optional[WindowState] = None
        self._imu: list = []
        self._pending: list = []
        self._track_px: dict = {}  # frame index -> (ids, pixels) for packets
        self.trajectory: list = []  # (timestamp, p_wb, q_wb) per processed frame
        self.init_result: Optional[InitializationResult] = None

    @property
    def initialized(self) -> bool:
        return self.window is not None

    def add_imu(self, sample) -> None:
        if self._imu and sample.t <= self._imu[-1].t:
            raise ValueError("imu samples must arrive in increasing time order")
        self._imu.append(sample)

    def add_frame(self, tracked) -> VioStepResult:
        if tracked.pixels is not None and len(tracked.pixels):
            self._track_px[tracked.index] = (
                np.asarray(tracked.ids, dtype=int).copy(),
                np.asarray(tracked.pixels, dtype=float).copy(),
            )
        if self.window is None:
            return self._bootstrap(tracked)
        return self._process(tracked)

    def _make_packet(self, frame) -> KeyframePacket:
        window = self.window
        raw = self._track_px.get(frame.index)
        px_by_id = {} if raw is None else dict(zip(raw[0].tolist(), raw[1]))
        ids, pixels, bearings, points = [], [], [], []
        for tid in sorted(window.features):
            feat = window.features[tid]
            b = feat.obs.get(frame.index)
            if b is None or tid not in px_by_id:
                continue
            ids.append(tid)
            pixels.append(px_by_id[tid])
            bearings.append(b)
            points.append(feature_world_point(window, tid))
        return KeyframePacket(
            frame.index,
            frame.timestamp,
            frame.nav.q.copy(),
            frame.nav.p.copy(),
            ids=np.asarray(ids, dtype=int),
            pixels=np.asarray(pixels, dtype=float).reshape(len(ids), 2),
            bearings=np.asarray(bearings, dtype=float).reshape(len(ids), 3),
            world_points=np.asarray(points, dtype=float).reshape(len(ids), 3),
        )

    def _trim_track_px(self) -> None:
        live = {f.index for f in self.window.frames}
        self._track_px = {k: v for k, v in self._track_px.items() if k in live}

    # -- bootstrap ---------------------------------------------------------

    def _bootstrap(self, tracked) -> VioStepResult:
        self._pending.append(tracked)
        if len(self._pending) > 2 * (self.cfg.window_size + 2):
            self._pending.pop(0)
        result = VioStepResult(False, tracked.index, tracked.timestamp)
        if len(self._pending) < self.cfg.window_size + 2:
            return result
        try:
            init = initialize(self._pending, self._imu, self.init_cfg)
        except (
            NotReadyError,
            InitializationError,
            InsufficientDataError,
            DegenerateGeometryError,
            LowParallaxError,
        ):
            return result
        self._build_window(init)
        self.init_result = init
        newest = self.window.frames[-1]
        self._record(newest)
        packet = self._make_packet(newest)
        self._trim_track_px()
        return VioStepResult(
            True,
            tracked.index,
            tracked.timestamp,
            q_wb=newest.nav.q.copy(),
            p_wb=newest.nav.p.copy(),
            v_w=newest.nav.v.copy(),
            keyframe=packet,
        )

    def _build_window(self, init: InitializationResult) -> None:
        cfg = self.cfg
        al = init.alignment
        by_index = {f.index: f for f in self._pending}
        frames = []
        for k in init.frame_indices:
            R_wb, p_wb = al.body_poses[k]
            nav = NavState(
                p=p_wb,
                v=al.velocities[k],
                q=rot_to_quat(R_wb),
                ba=np.zeros(3),
                bg=init.gyro_bias.copy(),
            )
            frames.append(FrameState(k, by_index[k].timestamp, nav))

        chunks = []
        preints = []
        for fi, fj in zip(frames[:-1], frames[1:]):
            chunk = slice_samples(self._imu, fi.timestamp, fj.timestamp)
            chunks.append(chunk)
            preints.append(
                preintegrate(chunk, (np.zeros(3), init.gyro_bias), cfg.imu_noise)
            )

        window = WindowState(
            frames=frames,
            features={},
            preints=preints,
            chunks=chunks,
            R_bc=init.R_bc,
            p_bc=init.p_bc,
        )

        in_window = {f.index for f in frames}
        obs_by_track: dict = {}
        for k in init.frame_indices:
            fr = by_index[k]
            for tid, b in zip(fr.ids, fr.bearings):
                obs_by_track.setdefault(int(tid), {})[k] = np.asarray(b, dtype=float)
        for tid, obs in obs_by_track.items():
            first = min(obs)
            anchor_frame = window.frame_by_index(first)
            lam = 1.0 / cfg.default_depth
            if tid in al.landmarks_w:
                R_wb = quat_to_rot(anchor_frame.nav.q)
                X_c = window.R_bc.T @ (
                    R_wb.T @ (al.landmarks_w[tid] - anchor_frame.nav.p) - window.p_bc
                )
                d = float(np.linalg.norm(X_c))
                if d > 1e-6:
                    lam = 1.0 / d
            window.features[tid] = Feature(
                track_id=tid,
                anchor=first,
                bearing_a=obs[first],
                inv_dist=float(np.clip(lam, cfg.min_inv_dist, cfg.max_inv_dist)),
                obs=obs,
            )

        self.window = window
        optimize_window(window, cfg)
        while len(window.frames) > cfg.window_size + 1:
            marginalize_oldest(window, cfg)
        self._pending = []
        self._trim_imu()

    # -- steady state ------------------------------------------------------

    def _process(self, tracked) -> VioStepResult:
        cfg = self.cfg
        window = self.window
        last = window.frames[-1]
        chunk = slice_samples(self._imu, last.timestamp, tracked.timestamp)
        pre = preintegrate(chunk, (last.nav.ba, last.nav.bg), cfg.imu_noise)

        g = np.asarray(cfg.gravity, dtype=float)
        T = pre.dt_total
        R_i = quat_to_rot(last.nav.q)
        nav = NavState(
            p=last.nav.p + last.nav.v * T + 0.5 * g * T * T + R_i @ pre.delta_p,
            v=last.nav.v + g * T + R_i @ pre.delta_v,
            q=quat_mul(last.nav.q, pre.delta_q),
            ba=last.nav.ba.copy(),
            bg=last.nav.bg.copy(),
        )
        frame = FrameState(tracked.index, tracked.timestamp, nav)
        window.frames.append(frame)
        window.preints.append(pre)
        window.chunks.append(chunk)

        for tid, b in zip(tracked.ids, tracked.bearings):
            tid = int(tid)
            b = np.asarray(b, dtype=float)
            feat = window.features.get(tid)
            if feat is None:
                window.features[tid] = Feature(
                    track_id=tid,
                    anchor=frame.index,
                    bearing_a=b,
                    inv_dist=1.0 / cfg.default_depth,
                    obs={frame.index: b},
                )
            else:
                if len(feat.obs) == 1 and next(iter(feat.obs)) == feat.anchor:
                    self._seed_depth(feat, frame, b)
                feat.obs[frame.index] = b

        report = optimize_window(window, cfg)

        packet = None
        if len(window.frames) > cfg.window_size + 1:
            cand = window.frames[-2]
            if self._is_keyframe(cand):
                packet = self._make_packet(cand)
                marginalize_oldest(window, cfg)
            else:
                drop_frame(window, len(window.frames) - 2, cfg)

        newest = window.frames[-1]
        self._record(newest)
        self._trim_imu()
        self._trim_track_px()
        return VioStepResult(
            True,
            newest.index,
            newest.timestamp,
            q_wb=newest.nav.q.copy(),
            p_wb=newest.nav.p.copy(),
            v_w=newest.nav.v.copy(),
            keyframe=packet,
            report=report,
        )

    def _seed_depth(self, feat: Feature, frame: FrameState, bearing) -> None:
        """First re-observation: triangulate the two rays if possible."""
        window = self.window
        try:
            a = window.frame_by_index(feat.anchor)
        except KeyError:
            return
        R_a = quat_to_rot(a.nav.q) @ window.R_bc
        o_a = quat_to_rot(a.nav.q) @ window.p_bc + a.nav.p
        R_j = quat_to_rot(frame.nav.q) @ window.R_bc
        o_j = quat_to_rot(frame.nav.q) @ window.p_bc + frame.nav.p
        d_a = R_a @ feat.bearing_a
        d_j = R_j @ np.asarray(bearing, dtype=float)
        try:
            pt = triangulate_rays(np.array([o_a, o_j]), np.array([d_a, d_j]))
        except LowParallaxError:
            return
        depth = float((pt - o_a) @ d_a)
        if depth > 1e-3:
            feat.inv_dist = float(
                np.clip(
                    1.0 / depth, self.cfg.min_inv_dist, self.cfg.max_inv_dist
                )
            )

    def _is_keyframe(self, cand: FrameState) -> bool:
        window = self.window
        cfg = self.cfg
        pos = window.slot_of(cand.index)
        ref = window.frames[pos - 1]
        pairs = []
        for f in window.features.values():
            if cand.index in f.obs and ref.index in f.obs:
                pairs.append((f.obs[ref.index], f.obs[cand.index]))
        if len(pairs) < cfg.keyframe_track_ratio * cfg.target_track_count:
            return True
        b1 = np.array([p[0] for p in pairs])
        b2 = np.array([p[1] for p in pairs])
        dots = np.clip(np.einsum("ij,ij->i", b1, b2), -1.0, 1.0)
        parallax = np.degrees(np.mean(np.arccos(dots)))
        return parallax > cfg.keyframe_parallax_deg

    def apply_drift_correction(self, yaw: float, translation) -> None:
        """Re-express the window in a loop-corrected world frame.

        The correction is the 4-dof transform new_from_old: positions
        map through Rz(yaw) x + t, attitudes through Rz(yaw) R.  Feature
        depths are anchor-relative and unaffected.
        """
        if self.window is None:
            return
        Rz = rot_z(yaw)
        qz = rot_to_quat(Rz)
        t = np.asarray(translation, dtype=float)
        for f in self.window.frames:
            f.nav.p = Rz @ f.nav.p + t
            f.nav.v = Rz @ f.nav.v
            f.nav.q = quat_normalize(quat_mul(qz, f.nav.q))
        prior = self.window.prior
        if prior is not None:
            S = prior.sqrt_info.copy()
            for i, idx in enumerate(prior.order):
                nav = prior.lin[idx]
                prior.lin[idx] = NavState(
                    Rz @ nav.p + t, Rz @ nav.v, quat_mul(qz, nav.q), nav.ba, nav.bg
                )
                o = STATE_DIM * i
                S[:, o + P : o + V] = S[:, o + P : o + V] @ Rz.T
                S[:, o + V : o + TH] = S[:, o + V : o + TH] @ Rz.T
            prior.sqrt_info = S

    def _record(self, frame: FrameState) -> None:
        self.trajectory.append(
            (frame.timestamp, frame.nav.p.copy(), frame.nav.q.copy())
        )

    def _trim_imu(self) -> None:
        if self.window is None or not self._imu:
            return
        horizon = self.window.frames[0].timestamp - 0.5
        k = 0
        while k < len(self._imu) and self._imu[k].t < horizon:
            k += 1
        if k:
            del self._imu[:k]
