"""Multi-view geometry on unit bearing vectors.

Everything here works directly on unit-norm 3D bearings, never on image
coordinates, so observations beyond 90 degrees from the optical axis
(negative z component) are handled transparently.

Conventions:
    A relative pose (R, t) maps points from the first camera frame to
    the second: X2 = R @ X1 + t.  The epipolar constraint then reads
    x2.T @ skew(t) @ R @ x1 = 0.  Landmarks are plain (3,) float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientDataError,
    LowParallaxError,
)
from .so3 import rot_exp, skew

MIN_PARALLAX_RAD = 1e-4


@dataclass(frozen=True)
class RelativePose:
    """Rigid transform X2 = R @ X1 + t between two camera frames.

    t is in meters when scale is known, or unit-norm when the pose comes
    from an essential matrix (scale-free).
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("R is not a proper rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def inverse(self) -> "RelativePose":
        return RelativePose(self.R.T, -self.R.T @ self.t)


@dataclass(frozen=True)
class EssentialMatrix:
    """Essential matrix with two equal singular values and one zero."""

    E: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "E", np.asarray(self.E, dtype=float))


def essential_from_pose(rel: RelativePose) -> EssentialMatrix:
    return EssentialMatrix(skew(rel.t) @ rel.R)


def _pairs_to_arrays(pairs):
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 3 or arr.shape[1] != 2 or arr.shape[2] != 3:
        raise ValueError("pairs must be a sequence of (bearing1, bearing2)")
    return arr[:, 0, :], arr[:, 1, :]


def epipolar_residual(x1, x2, rel: RelativePose):
    """Signed epipolar residual x2.T @ skew(t) @ R @ x1.

    Zero iff the two bearings and the baseline are coplanar.  Note the
    antipodal bearing -x2 gives the negated residual, so this constraint
    alone cannot tell a feature from its mirror through the camera.
    """
    E = skew(rel.t) @ rel.R
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.ndim == 1:
        return float(x2 @ E @ x1)
    return np.einsum("ij,jk,ik->i", x2, E, x1)


def estimate_essential_8pt(pairs) -> EssentialMatrix:
    """Least-squares essential matrix from >= 8 bearing pairs.

    Each pair contributes one linear equation in the 9 entries of E;
    the solution is the right singular vector of the smallest singular
    value, then projected onto the essential manifold.  No coordinate
    normalization is applied: unit bearings are already well scaled.
    """
    x1, x2 = _pairs_to_arrays(pairs)
    n = len(x1)
    if n < 8:
        raise InsufficientDataError(f"essential estimation needs >= 8 pairs, got {n}")
    # Row i is kron(x2_i, x1_i) acting on row-major vec(E).
    D = np.einsum("ij,ik->ijk", x2, x1).reshape(n, 9)
    _, s, Vt = np.linalg.svd(D, full_matrices=True)
    if s[7] < 1e-9 * max(s[0], 1e-300):
        raise DegenerateGeometryError(
            "bearing pairs do not constrain an essential matrix (no parallax "
            "or degenerate configuration)"
        )
    E = Vt[-1].reshape(3, 3)
    U, se, Vte = np.linalg.svd(E)
    m = 0.5 * (se[0] + se[1])
    return EssentialMatrix(U @ np.diag([m, m, 0.0]) @ Vte)


def decompose_essential(E: EssentialMatrix) -> list[RelativePose]:
    """The four (R, unit t) candidates of an essential matrix."""
    U, _, Vt = np.linalg.svd(E.E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Ra = U @ W @ Vt
    Rb = U @ W.T @ Vt
    t = U[:, 2]
    return [
        RelativePose(Ra, t),
        RelativePose(Ra, -t),
        RelativePose(Rb, t),
        RelativePose(Rb, -t),
    ]


# ---------------------------------------------------------------------------
# Triangulation: ray midpoint.  The usual homogeneous DLT assumes [u,v,1]
# observations and breaks once bearings leave the z>0 half-space, so we
# intersect rays directly.
# ---------------------------------------------------------------------------


def triangulate_rays(origins, directions) -> np.ndarray:
    """Point minimizing summed squared distance to n >= 2 rays.

    Solves sum_i (I - d_i d_i^T) X = sum_i (I - d_i d_i^T) o_i.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=float))
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    cross = np.abs(np.cross(d[:1], d))
    if np.max(cross) < MIN_PARALLAX_RAD:
        raise LowParallaxError("rays are near parallel")
    P = np.eye(3)[None] - np.einsum("ni,nj->nij", d, d)
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, o)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise LowParallaxError("ray system is singular") from exc


def triangulate(x_i, x_j, pose_i, pose_j) -> np.ndarray:
    """Triangulate a landmark from two bearings and world-from-camera poses.

    pose_* are (R, t) with X_world = R @ X_cam + t.  Returns the world
    point; raises on low parallax.
    """
    R_i, t_i = pose_i
    R_j, t_j = pose_j
    return triangulate_rays(
        [np.asarray(t_i, float), np.asarray(t_j, float)],
        [np.asarray(R_i) @ np.asarray(x_i, float), np.asarray(R_j) @ np.asarray(x_j, float)],
    )


def _triangulate_batch(rel: RelativePose, x1, x2):
    """Vectorized two-ray midpoints in the first camera frame.

    Returns (points, ok) where ok flags pairs with usable parallax.
    Used by cheirality scoring where per-pair exceptions would be noise.
    """
    d1 = x1
    d2 = x2 @ rel.R  # R^T x2 for each row
    o2 = -rel.R.T @ rel.t
    c = np.einsum("ij,ij->i", d1, d2)
    b1 = d1 @ o2
    b2 = d2 @ o2
    den = 1.0 - c * c
    ok = den > MIN_PARALLAX_RAD**2
    den_safe = np.where(ok, den, 1.0)
    s = (b1 - c * b2) / den_safe
    u = (c * b1 - b2) / den_safe
    mid = 0.5 * (s[:, None] * d1 + o2 + u[:, None] * d2)
    return mid, ok


def cheirality_mask(rel: RelativePose, x1, x2, th: float = 0.0, th2: float = -1.0):
    """Per-pair visibility test for a relative pose hypothesis.

    A pair passes when the triangulated point lies along both observed
    bearings: with P the point in frame 1 and Q = R P + t in frame 2,
    require unit(P).x1 >= th and unit(Q).x2 >= th.  The optional third
    test unit(Q).R.unit(P) >= th2 rejects points whose viewing rays
    disagree once rotation is compensated.  th/th2 are cosines; the
    defaults reduce to plain sign tests.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    P, ok = _triangulate_batch(rel, x1, x2)
    Q = P @ rel.R.T + rel.t
    nP = np.linalg.norm(P, axis=1)
    nQ = np.linalg.norm(Q, axis=1)
    good = ok & (nP > 1e-12) & (nQ > 1e-12)
    nP = np.where(nP > 1e-12, nP, 1.0)
    nQ = np.where(nQ > 1e-12, nQ, 1.0)
    uP = P / nP[:, None]
    uQ = Q / nQ[:, None]
    pass1 = np.einsum("ij,ij->i", uP, x1) >= th
    pass2 = np.einsum("ij,ij->i", uQ, x2) >= th
    pass3 = np.einsum("ij,ij->i", uQ, uP @ rel.R.T) >= th2
    return good & pass1 & pass2 & pass3


def select_pose_cheirality(cands, pairs) -> tuple[RelativePose, int]:
    """Pick the candidate pose with the most pairs in front of both cameras.

    Returns (pose, pass_count).  Raises when no candidate places any
    pair in front of both cameras.
    """
    x1, x2 = _pairs_to_arrays(pairs)
    best = None
    best_count = -1
    for cand in cands:
        count = int(np.count_nonzero(cheirality_mask(cand, x1, x2)))
        if count > best_count:
            best, best_count = cand, count
    if best_count <= 0:
        raise DegenerateGeometryError("no pose candidate passes the cheirality test")
    return best, best_count


# Ray-agreement cosines used by the RANSAC inlier tests: the
# triangulated direction must stay within 66 deg of each observed
# bearing and the rotation-compensated rays within 45 deg.
COS_RAY_AGREE = float(np.cos(np.radians(66.0)))
COS_ROT_AGREE = float(np.cos(np.radians(45.0)))


def bearing_inlier_mask(
    rel: RelativePose,
    x1,
    x2,
    threshold_deg: float = 1.0,
    th: float = COS_RAY_AGREE,
    th2: float = COS_ROT_AGREE,
):
    """Inlier test for a pose hypothesis: epipolar band + cheirality.

    The epipolar part thresholds |x2.T [t]x R x1| with unit-norm t, so
    the bound is a sine of an angular tolerance.  The cheirality part is
    what rejects antipodally flipped matches, which pass the epipolar
    test by construction.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    t_norm = np.linalg.norm(rel.t)
    t_unit = rel.t / t_norm if t_norm > 1e-12 else rel.t
    res = np.einsum("ij,jk,ik->i", x2, skew(t_unit) @ rel.R, x1)
    epi_ok = np.abs(res) < np.sin(np.radians(threshold_deg))
    return epi_ok & cheirality_mask(rel, x1, x2, th, th2)


def ransac_essential(
    x1,
    x2,
    iterations: int = 100,
    threshold_deg: float = 1.0,
    seed: int = 0,
    th: float = COS_RAY_AGREE,
    th2: float = COS_ROT_AGREE,
) -> tuple[RelativePose, np.ndarray]:
    """Seeded RANSAC over the 8-point solver on unit bearings.

    Returns the winning pose hypothesis and its inlier mask.  Candidate
    poses from each sampled essential matrix are scored with
    bearing_inlier_mask, so antipodal outliers count against a model.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    n = len(x1)
    if n < 8:
        raise InsufficientDataError(f"ransac needs >= 8 pairs, got {n}")
    rng = np.random.default_rng(seed)
    best = None
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=8, replace=False)
        try:
            E = estimate_essential_8pt(np.stack([x1[idx], x2[idx]], axis=1))
        except DegenerateGeometryError:
            continue
        for cand in decompose_essential(E):
            mask = bearing_inlier_mask(cand, x1, x2, threshold_deg, th, th2)
            count = int(np.count_nonzero(mask))
            if count > best_count:
                best, best_mask, best_count = cand, mask, count
    if best is None or best_count < 8:
        raise DegenerateGeometryError("ransac found no supported essential model")
    # One refit on the consensus set.
    try:
        E = estimate_essential_8pt(np.stack([x1[best_mask], x2[best_mask]], axis=1))
        for cand in decompose_essential(E):
            mask = bearing_inlier_mask(cand, x1, x2, threshold_deg, th, th2)
            count = int(np.count_nonzero(mask))
            if count > best_count:
                best, best_mask, best_count = cand, mask, count
    except DegenerateGeometryError:
        pass
    return best, best_mask


def tangent_basis(w) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis of the plane orthogonal to w.

    Starts from the coordinate axis least aligned with w, projects it
    onto the tangent plane, and completes with a cross product.
    """
    w = np.asarray(w, dtype=float)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(w)))] = 1.0
    b1 = axis - (axis @ w) * w
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(w, b1)
    return b1, b2


# ---------------------------------------------------------------------------
# EPnP on bearings.  Camera-frame points are written as fixed barycentric
# combinations of 4 control points (3 if the world points are coplanar);
# each bearing constrains its camera point to lie along the observed ray
# via a cross product, giving a linear system in the control points.
# ---------------------------------------------------------------------------


def _control_points(P):
    c0 = P.mean(axis=0)
    Q = P - c0
    cov = Q.T @ Q / len(P)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    rank = int(np.sum(evals > max(evals[0], 1e-300) * 1e-9))
    if rank <= 1:
        raise DegenerateGeometryError("world points are collinear")
    n_dirs = 3 if rank == 3 else 2
    ctrl = [c0]
    for k in range(n_dirs):
        ctrl.append(c0 + np.sqrt(evals[k]) * evecs[:, k])
    return np.array(ctrl)


def _barycentric(P, ctrl):
    m = len(ctrl)
    A = np.vstack([ctrl.T, np.ones(m)])
    B = np.vstack([P.T, np.ones(len(P))])
    alpha, *_ = np.linalg.lstsq(A, B, rcond=None)
    return alpha.T  # (n, m)


def _beta_pairs(m):
    return [(j, k) for j in range(m) for k in range(j + 1, m)]


def _refine_betas(betas, null_vecs, dist2, pairs):
    """Gauss-Newton on control-point distance constraints."""
    for _ in range(12):
        cc = np.tensordot(betas, null_vecs, axes=(0, 0))
        J = np.zeros((len(pairs), len(betas)))
        r = np.zeros(len(pairs))
        for row, (j, k) in enumerate(pairs):
            diff = cc[j] - cc[k]
            r[row] = diff @ diff - dist2[row]
            for l in range(len(betas)):
                J[row, l] = 2.0 * diff @ (null_vecs[l, j] - null_vecs[l, k])
        try:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        betas = betas + step
        if np.linalg.norm(step) < 1e-12:
            break
    return betas


def _initial_betas(N, null_vecs, dist2, pairs):
    diffs = np.stack(
        [[null_vecs[l, j] - null_vecs[l, k] for (j, k) in pairs] for l in range(N)]
    )  # (N, npairs, 3)
    if N == 1:
        num = 0.0
        den = 0.0
        for row in range(len(pairs)):
            dv = np.linalg.norm(diffs[0, row])
            num += dv * np.sqrt(dist2[row])
            den += dv * dv
        return np.array([num / den if den > 0 else 1.0])
    cols = []
    labels = []
    for a in range(N):
        for b in range(a, N):
            dot = np.einsum("ij,ij->i", diffs[a], diffs[b])
            cols.append(dot if a == b else 2.0 * dot)
            labels.append((a, b))
    L = np.stack(cols, axis=1)
    sol, *_ = np.linalg.lstsq(L, dist2, rcond=None)
    beta = np.zeros(N)
    idx = {lab: i for i, lab in enumerate(labels)}
    beta[0] = np.sqrt(abs(sol[idx[(0, 0)]]))
    for a in range(1, N):
        diag = sol[idx[(a, a)]]
        cross = sol[idx[(0, a)]]
        mag = np.sqrt(abs(diag))
        beta[a] = mag * np.sign(cross) if beta[0] > 0 else mag
    return beta


def _procrustes(P, X):
    """Rigid (R, t) minimizing ||R P_i + t - X_i||^2."""
    Pc = P.mean(axis=0)
    Xc = X.mean(axis=0)
    H = (P - Pc).T @ (X - Xc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, Xc - R @ Pc


def _angular_error(R, t, P, W):
    X = P @ R.T + t
    nX = np.linalg.norm(X, axis=1)
    if np.any(nX < 1e-12):
        return np.inf
    return float(np.sum(1.0 - np.einsum("ij,ij->i", X / nX[:, None], W)))


def _refine_pose(R, t, P, W, iters=10):
    """Damped least squares on tangent-plane angular residuals."""
    bases = np.stack([np.stack(tangent_basis(w)) for w in W])  # (n, 2, 3)
    for _ in range(iters):
        X = P @ R.T + t
        nX = np.linalg.norm(X, axis=1)
        if np.any(nX < 1e-12):
            break
        u = X / nX[:, None]
        res = np.einsum("nbj,nj->nb", bases, W - u).ravel()
        # d u / d X, then chain through X = R Exp(dth) P + t + dt.
        proj = (np.eye(3)[None] - np.einsum("ni,nj->nij", u, u)) / nX[:, None, None]
        dX_dth = -np.einsum("ij,njk->nik", R, skew_batch(P))
        J_th = -np.einsum("nbj,njk,nkl->nbl", bases, proj, dX_dth)
        J_t = -np.einsum("nbj,njk->nbk", bases, proj)
        J = np.concatenate([J_th, J_t], axis=2).reshape(-1, 6)
        JtJ = J.T @ J + 1e-10 * np.eye(6)
        try:
            step = np.linalg.solve(JtJ, -J.T @ res)
        except np.linalg.LinAlgError:
            break
        R = R @ rot_exp(step[:3])
        t = t + step[3:]
        if np.linalg.norm(step) < 1e-14:
            break
    return R, t


def skew_batch(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _depths_from_distances(P, W):
    """Solve for ray depths so that depth_i * w_i reproduces the pairwise
    distances of the world points (4-point minimal case).

    With exactly 4 points the control points can be the points
    themselves, which turns the linear system's null space into one
    depth per point; six distance constraints then overdetermine the
    four depths.  Gauss-Newton with a few deterministic restarts.
    """
    pairs = _beta_pairs(len(P))
    dist2 = np.array([np.sum((P[j] - P[k]) ** 2) for j, k in pairs])
    cosw = W @ W.T
    chord2 = np.array([2.0 - 2.0 * cosw[j, k] for j, k in pairs])
    s0 = np.sum(np.sqrt(dist2 * chord2)) / max(np.sum(chord2), 1e-12)

    def run(lam):
        for _ in range(40):
            r = np.empty(len(pairs))
            J = np.zeros((len(pairs), len(lam)))
            for row, (j, k) in enumerate(pairs):
                r[row] = (
                    lam[j] ** 2 + lam[k] ** 2 - 2.0 * lam[j] * lam[k] * cosw[j, k]
                ) - dist2[row]
                J[row, j] = 2.0 * (lam[j] - lam[k] * cosw[j, k])
                J[row, k] = 2.0 * (lam[k] - lam[j] * cosw[j, k])
            try:
                step = np.linalg.lstsq(J, -r, rcond=None)[0]
            except np.linalg.LinAlgError:
                return lam, np.inf
            lam = lam + step
            if np.linalg.norm(step) < 1e-13 * max(1.0, np.linalg.norm(lam)):
                break
        return lam, float(r @ r)

    starts = [np.full(len(P), s0 * s) for s in (1.0, 0.4, 2.5)]
    starts.extend(_three_point_depth_seeds(P, W))
    cands = []
    for lam0 in starts:
        lam, cost = run(lam0)
        if np.isfinite(cost):
            if np.sum(lam < 0) > len(P) / 2:
                lam = -lam
            cands.append(lam)
    return cands


def _three_point_depth_seeds(P, W):
    """Exact depth solutions of the first three points, extended to the
    fourth, used to seed the full Gauss-Newton.

    Classic three-point resection: with s2 = u*s1, s3 = v*s1 the three
    distance equations reduce to a quartic in v.  The quartic is built
    by polynomial elimination rather than hand-expanded coefficients.
    """
    from numpy.polynomial import polynomial as npoly

    a2 = np.sum((P[1] - P[2]) ** 2)
    b2 = np.sum((P[0] - P[2]) ** 2)
    c2 = np.sum((P[0] - P[1]) ** 2)
    if min(a2, b2, c2) < 1e-18:
        return []
    ca = float(W[1] @ W[2])
    cb = float(W[0] @ W[2])
    cg = float(W[0] @ W[1])
    e = (a2 - c2) / b2
    # u*D(v) = N(v) from eliminating s1 between the equation pairs.
    N = np.array([e + 1.0, -2.0 * e * cb, -(1.0 - e)])
    D = np.array([2.0 * cg, -2.0 * ca])
    # Substitute u = N/D into the third equation and clear D^2.
    K = np.array([1.0 - c2 / b2, 2.0 * (c2 / b2) * cb, -c2 / b2])
    quartic = npoly.polyadd(
        npoly.polysub(npoly.polymul(N, N), 2.0 * cg * npoly.polymul(N, D)),
        npoly.polymul(npoly.polymul(D, D), K),
    )
    if np.max(np.abs(quartic)) < 1e-16:
        return []
    roots = npoly.polyroots(quartic)
    seeds = []
    for v in roots:
        if abs(v.imag) > 1e-8 * max(1.0, abs(v.real)) or v.real <= 0:
            continue
        v = float(v.real)
        den = npoly.polyval(v, D)
        if abs(den) < 1e-12:
            continue
        u = float(npoly.polyval(v, N)) / den
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        s2, s3 = u * s1, v * s1
        # Fourth depth from its distance to point 1 (two roots).
        c14 = float(W[0] @ W[3])
        d14sq = np.sum((P[0] - P[3]) ** 2)
        disc = s1 * s1 * c14 * c14 - (s1 * s1 - d14sq)
        if disc < 0:
            continue
        for s4 in (s1 * c14 + np.sqrt(disc), s1 * c14 - np.sqrt(disc)):
            if s4 > 0:
                seeds.append(np.array([s1, s2, s3, s4]))
    return seeds


def epnp_unit(world_pts, bearings) -> RelativePose:
    """Camera pose from world points and unit bearing observations.

    Returns (R, t) with X_cam = R @ X_world + t such that each camera
    point direction matches its bearing.  Works with bearings anywhere
    on the sphere, including the negative half-plane.
    """
    P = np.asarray(world_pts, dtype=float).reshape(-1, 3)
    W = np.asarray(bearings, dtype=float).reshape(-1, 3)
    n = len(P)
    if n < 4:
        raise InsufficientDataError(f"pose from bearings needs >= 4 points, got {n}")
    W = W / np.linalg.norm(W, axis=1, keepdims=True)

    ctrl = _control_points(P)
    if n == 4 and len(ctrl) == 4:
        # Minimal non-planar sample: the generic null space is too large
        # for the beta cases, so solve the equivalent depth problem.
        # Restarts can land on distance-consistent but behind-camera
        # solutions; the angular reprojection error tells them apart.
        best, best_err = None, np.inf
        for lam in _depths_from_distances(P, W):
            R, t = _procrustes(P, lam[:, None] * W)
            err = _angular_error(R, t, P, W)
            if err < best_err:
                best, best_err = (R, t), err
        R, t = _refine_pose(best[0], best[1], P, W)
        return RelativePose(R, t)
    m = len(ctrl)
    alpha = _barycentric(P, ctrl)

    # Stack cross-product constraints [w_i]x sum_j alpha_ij cc_j = 0.
    Sw = skew_batch(W)  # (n, 3, 3)
    M = np.einsum("nm,nij->nimj", alpha, Sw).reshape(3 * n, 3 * m)
    _, _, Vt = np.linalg.svd(M, full_matrices=True)
    null = Vt[::-1][:4]  # candidates, smallest singular value first

    pairs = _beta_pairs(m)
    dist2 = np.array([np.sum((ctrl[j] - ctrl[k]) ** 2) for j, k in pairs])

    best = None
    best_err = np.inf
    max_N = 3 if m == 4 else 2
    for N in range(1, max_N + 1):
        vecs = null[:N].reshape(N, m, 3)
        betas = _initial_betas(N, vecs, dist2, pairs)
        betas = _refine_betas(betas, vecs, dist2, pairs)
        cc = np.tensordot(betas, vecs, axes=(0, 0))
        Xc = alpha @ cc.reshape(m, 3)
        # The null vector's global sign is arbitrary; pick the one that
        # puts the points in front of their bearings.
        if np.sum(np.einsum("ij,ij->i", Xc, W) < 0) > n / 2:
            Xc = -Xc
        R, t = _procrustes(P, Xc)
        err = _angular_error(R, t, P, W)
        if err < best_err:
            best, best_err = (R, t), err
    if best is None:
        raise DegenerateGeometryError("pose estimation failed on all null-space sizes")

    R, t = _refine_pose(best[0], best[1], P, W)
    U, _, Vt2 = np.linalg.svd(R)
    R = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt2))]) @ Vt2
    return RelativePose(R, t)
