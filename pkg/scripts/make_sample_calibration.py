#!/usr/bin/env python3
"""Generate the sample omnidirectional calibration asset.

Builds a radius-vs-zenith profile whose per-band pixel density (pixels
per steradian over 10 degree zenith bands) increases monotonically from
the 40-50 band to the 110-120 band, then fits the forward polynomial
f(rho) and the inverse polynomial rho(theta) used by the camera model.
The asset is deterministic: no randomness anywhere.

Run from the repository root:

    python3 scripts/make_sample_calibration.py
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from panoslam.camera import (  # noqa: E402
    PolynomialIntrinsics,
    project_many,
    save_calibration,
    unproject,
    zenith_angle,
)

IMAGE_SIZE = (1280, 960)
CENTER = (640.0, 480.0)
FOV_DEG = (40.0, 120.0)
RHO_AT_FOV_MIN = 160.0
RHO_AT_FOV_MAX = 470.0
# Desired relative band densities, 40-50 through 110-120 degrees.
BAND_DENSITY_TREND = np.array([0.65, 0.69, 0.75, 0.79, 0.87, 1.00, 1.11, 1.32])
POLY_DEGREE = 8
INV_POLY_DEGREE = 11


def build_radius_profile():
    """Knot radii at 10 degree zenith steps realizing the density trend.

    Band pixel area is pi*(rho2^2 - rho1^2) and band solid angle is
    2*pi*(cos t1 - cos t2), so a target density d fixes the radius
    recursion rho2^2 = rho1^2 + 2*d*(cos t1 - cos t2).
    """
    edges = np.radians(np.arange(40.0, 121.0, 10.0))
    dcos = np.cos(edges[:-1]) - np.cos(edges[1:])
    scale = (RHO_AT_FOV_MAX**2 - RHO_AT_FOV_MIN**2) / float(
        2.0 * np.sum(BAND_DENSITY_TREND * dcos)
    )
    dens = scale * BAND_DENSITY_TREND
    r2 = [RHO_AT_FOV_MIN**2]
    for d, dc in zip(dens, dcos):
        r2.append(r2[-1] + 2.0 * d * dc)
    radii = np.sqrt(r2)
    # Extend one band past the FoV edge at the last density so the fit
    # stays sane slightly beyond 120 degrees.
    t_ext = np.radians(125.0)
    r_ext = np.sqrt(radii[-1] ** 2 + 2.0 * dens[-1] * (np.cos(edges[-1]) - np.cos(t_ext)))
    thetas = np.concatenate([edges, [t_ext]])
    radii = np.concatenate([radii, [r_ext]])
    # Fill 0..40 degrees with a linear (equidistant-style) profile.
    inner_t = np.radians([0.0, 10.0, 20.0, 30.0])
    inner_r = RHO_AT_FOV_MIN * np.array([0.0, 0.25, 0.5, 0.75])
    return np.concatenate([inner_t, thetas]), np.concatenate([inner_r, radii]), dens


def fit_forward_poly(theta_knots, rho_knots):
    """Fit f(rho) so that atan2(rho, f(rho)) reproduces the profile."""
    curve = PchipInterpolator(theta_knots, rho_knots)
    theta = np.radians(np.arange(1.0, 124.0, 0.25))
    rho = curve(theta)
    f_target = rho / np.tan(theta)
    # Weight by the sensitivity of zenith to f so angular error is
    # roughly uniform; floor keeps the center behavior pinned.
    w = rho / (rho**2 + f_target**2)
    w = np.maximum(w, 0.25 * w.max())
    # Fit on normalized radius for conditioning, then rescale.
    scale = 500.0
    V = np.vander(rho / scale, POLY_DEGREE + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V * w[:, None], f_target * w, rcond=None)
    return coef / scale ** np.arange(POLY_DEGREE + 1)


def fit_inverse_poly(poly):
    rho = np.linspace(100.0, 495.0, 2000)
    f = np.polynomial.polynomial.polyval(rho, poly)
    theta = np.arctan2(rho, f)
    V = np.vander(theta, INV_POLY_DEGREE + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, rho, rcond=None)
    resid = np.abs(np.polynomial.polynomial.polyval(theta, coef) - rho)
    return coef, float(resid.max())


def check_asset(intr: PolynomialIntrinsics):
    # Zenith must be strictly monotone in radius over the usable range.
    rho = np.linspace(1.0, 495.0, 5000)
    zen = np.arctan2(rho, intr.radial_poly(rho))
    if not np.all(np.diff(zen) > 0):
        raise SystemExit("zenith not monotone in radius")

    # Band densities from actual pixel counting must increase.
    w, h = intr.image_size
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([u.ravel(), v.ravel()], axis=-1).astype(float)
    zen_deg = zenith_angle(unproject(intr, pix))
    edges = np.arange(40.0, 121.0, 10.0)
    dens = []
    for t1, t2 in zip(edges[:-1], edges[1:]):
        count = int(np.count_nonzero((zen_deg >= t1) & (zen_deg < t2)))
        omega = 2.0 * np.pi * (np.cos(np.radians(t1)) - np.cos(np.radians(t2)))
        dens.append(count / omega)
    dens = np.array(dens)
    print("band densities (px/sr):", np.array2string(dens, precision=1))
    if not np.all(np.diff(dens) > 0):
        raise SystemExit("band densities not monotonically increasing")

    # Round trip over a coarse pixel grid restricted to the FoV band.
    gu, gv = np.meshgrid(np.linspace(0, w - 1, 200), np.linspace(0, h - 1, 200))
    grid = np.stack([gu.ravel(), gv.ravel()], axis=-1)
    bear = unproject(intr, grid)
    zd = zenith_angle(bear)
    keep = (zd >= intr.fov_range[0]) & (zd <= intr.fov_range[1])
    back, valid = project_many(intr, bear[keep])
    if not np.all(valid):
        raise SystemExit("in-band bearing flagged out of FoV")
    err = np.linalg.norm(back - grid[keep], axis=-1)
    print(f"round trip: n={keep.sum()} max_err={err.max():.4f} px")
    if err.max() > 0.1:
        raise SystemExit("round trip error too large")


def main():
    theta_knots, rho_knots, dens = build_radius_profile()
    poly = fit_forward_poly(theta_knots, rho_knots)
    if poly[0] <= 0:
        raise SystemExit(f"fitted a0 = {poly[0]:.3f} <= 0")
    inv_poly, inv_resid = fit_inverse_poly(poly)
    print(f"a0 = {poly[0]:.3f}, inverse fit residual = {inv_resid:.2e} px")

    intr = PolynomialIntrinsics(
        poly=tuple(poly),
        inv_poly=tuple(inv_poly),
        center=CENTER,
        image_size=IMAGE_SIZE,
        fov_range=FOV_DEG,
    )
    check_asset(intr)

    out = Path(__file__).resolve().parents[1] / "src" / "panoslam" / "assets"
    out.mkdir(parents=True, exist_ok=True)
    save_calibration(intr, out / "sample_calibration.txt")
    print(f"wrote {out / 'sample_calibration.txt'}")


if __name__ == "__main__":
    main()
