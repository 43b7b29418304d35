"""Omnidirectional camera model mapping pixels to unit bearing vectors.

The model is a polynomial unprojection on the image radius: a pixel at
radius ``rho`` from the principal point lifts to the ray
``[x, y, f(rho)]`` with ``f(rho) = a0 + a1*rho + ... + aN*rho^N``,
normalized to unit length.  Because ``f`` may go negative, the bearing's
z component can be negative too, which is how fields of view beyond 90
degrees from the optical axis ("negative half-plane") are represented.

All bearings are unit-norm 3-vectors; angles from the optical axis
("zenith angles") are reported in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, OutOfFovError

# Newton refinement iterations for projecting without an inverse polynomial.
_PROJECT_NEWTON_ITERS = 6
_ZENITH_TABLE_SIZE = 4096


@dataclass(frozen=True)
class PolynomialIntrinsics:
    """Calibration of a polynomial omnidirectional camera.

    Attributes:
        poly: unprojection coefficients ``a0..aN`` (radius in pixels).
        inv_poly: optional projection coefficients mapping the zenith
            angle in radians to the image radius in pixels.  When absent
            the forward polynomial is inverted numerically.
        center: principal point ``(cx, cy)`` in pixels.
        affine: stretch/skew terms ``(c, d, e)``; identity is (1, 0, 0).
        image_size: ``(width, height)`` in pixels.
        fov_range: ``(theta_min, theta_max)`` zenith bounds in degrees.
    """

    poly: tuple[float, ...]
    center: tuple[float, float]
    image_size: tuple[int, int]
    fov_range: tuple[float, float]
    inv_poly: tuple[float, ...] = ()
    affine: tuple[float, float, float] = (1.0, 0.0, 0.0)
    _zenith_table: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.poly) == 0:
            raise CalibrationError("unprojection polynomial is empty")
        if self.poly[0] == 0.0:
            raise CalibrationError("unprojection polynomial has a0 = 0")
        tmin, tmax = self.fov_range
        if not (0.0 <= tmin < tmax <= 180.0):
            raise CalibrationError(f"invalid fov range ({tmin}, {tmax})")
        w, h = self.image_size
        cx, cy = self.center
        if not (0.0 <= cx < w and 0.0 <= cy < h):
            raise CalibrationError(f"principal point ({cx}, {cy}) outside image {w}x{h}")

    @property
    def affine_matrix(self) -> np.ndarray:
        c, d, e = self.affine
        return np.array([[1.0, d], [e, c]])

    def radial_poly(self, rho):
        """Evaluate f(rho) = a0 + a1*rho + ... (ascending coefficients)."""
        return np.polynomial.polynomial.polyval(rho, np.asarray(self.poly))

    def max_radius(self) -> float:
        w, h = self.image_size
        cx, cy = self.center
        return float(math.hypot(max(cx, w - cx), max(cy, h - cy)))

    def _zenith_of_radius_table(self) -> tuple[np.ndarray, np.ndarray]:
        # Lazily built monotone table zenith(rho), used to seed projection.
        cached = self._zenith_table.get("table")
        if cached is None:
            rho = np.linspace(0.0, self.max_radius(), _ZENITH_TABLE_SIZE)
            zen = np.arctan2(rho, self.radial_poly(rho))
            cached = (rho, zen)
            self._zenith_table["table"] = cached
        return cached


def unproject(intr: PolynomialIntrinsics, pixel) -> np.ndarray:
    """Lift pixel coordinates to unit bearing vectors.

    Accepts a single ``(u, v)`` pair or an ``(..., 2)`` array; returns a
    matching ``(..., 3)`` array of unit-norm bearings.
    """
    p = np.asarray(pixel, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    d = p - np.asarray(intr.center)
    A_inv = np.linalg.inv(intr.affine_matrix)
    xy = d @ A_inv.T
    rho = np.hypot(xy[..., 0], xy[..., 1])
    z = intr.radial_poly(rho)
    v = np.concatenate([xy, z[..., None]], axis=-1)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm < 1e-12):
        raise CalibrationError("degenerate calibration: zero ray at the principal point")
    w = v / norm[..., None]
    return w[0] if single else w


def zenith_angle(bearing) -> np.ndarray | float:
    """Angle from the optical axis in degrees, in [0, 180]."""
    b = np.asarray(bearing, dtype=float)
    gamma = np.clip(b[..., 2], -1.0, 1.0)
    out = np.degrees(np.arccos(gamma))
    return float(out) if out.ndim == 0 else out


def _radius_of_zenith(intr: PolynomialIntrinsics, zen_rad: np.ndarray) -> np.ndarray:
    """Invert zenith(rho) = atan2(rho, f(rho)) for rho."""
    if intr.inv_poly:
        return np.polynomial.polynomial.polyval(zen_rad, np.asarray(intr.inv_poly))
    rho_tab, zen_tab = intr._zenith_of_radius_table()
    rho = np.interp(zen_rad, zen_tab, rho_tab)
    coeffs = np.asarray(intr.poly)
    dcoeffs = np.polynomial.polynomial.polyder(coeffs)
    for _ in range(_PROJECT_NEWTON_ITERS):
        f = np.polynomial.polynomial.polyval(rho, coeffs)
        fp = np.polynomial.polynomial.polyval(rho, dcoeffs)
        g = np.arctan2(rho, f) - zen_rad
        gp = (f - rho * fp) / (rho * rho + f * f)
        step = np.where(np.abs(gp) > 1e-15, g / np.where(gp == 0, 1.0, gp), 0.0)
        rho = np.clip(rho - step, 0.0, intr.max_radius())
    return rho


def project_many(intr: PolynomialIntrinsics, bearings) -> tuple[np.ndarray, np.ndarray]:
    """Project unit bearings to pixels.

    Returns ``(pixels, valid)`` where ``valid`` is False for bearings
    whose zenith angle falls outside the calibrated FoV band.
    """
    w = np.atleast_2d(np.asarray(bearings, dtype=float))
    zen_deg = zenith_angle(w)
    zen_deg = np.atleast_1d(zen_deg)
    tmin, tmax = intr.fov_range
    valid = (zen_deg >= tmin) & (zen_deg <= tmax)
    zen_rad = np.radians(zen_deg)
    rho = _radius_of_zenith(intr, zen_rad)
    s = np.hypot(w[:, 0], w[:, 1])
    safe_s = np.where(s > 1e-12, s, 1.0)
    xy = rho[:, None] * (w[:, :2] / safe_s[:, None])
    xy[s <= 1e-12] = 0.0
    duv = xy @ intr.affine_matrix.T
    pix = duv + np.asarray(intr.center)
    return pix, valid


def project(intr: PolynomialIntrinsics, bearing) -> np.ndarray:
    """Project one unit bearing; raises OutOfFovError outside the FoV band."""
    pix, valid = project_many(intr, np.asarray(bearing, dtype=float)[None, :])
    if not valid[0]:
        raise OutOfFovError(
            f"bearing at zenith {zenith_angle(bearing):.2f} deg outside "
            f"fov range {intr.fov_range}"
        )
    return pix[0]


def in_image_bounds(intr: PolynomialIntrinsics, pixel, margin: float = 0.0) -> np.ndarray:
    pix = np.asarray(pixel, dtype=float)
    p = np.atleast_2d(pix)
    w, h = intr.image_size
    ok = (
        (p[:, 0] >= margin)
        & (p[:, 0] <= w - 1 - margin)
        & (p[:, 1] >= margin)
        & (p[:, 1] <= h - 1 - margin)
    )
    return ok[0] if pix.ndim == 1 else ok


# ---------------------------------------------------------------------------
# Calibration file I/O.  Plain-text `key: values` grammar, one field per
# line; '#' starts a comment.  Required keys: poly, center, image_size,
# fov_deg.  Optional: inv_poly, affine.
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = ("poly", "center", "image_size", "fov_deg")


def _parse_floats(key: str, raw: str, lineno: int) -> list[float]:
    vals = []
    for tok in raw.split():
        try:
            vals.append(float(tok))
        except ValueError:
            raise CalibrationError(
                f"line {lineno}: non-numeric token {tok!r} in field {key!r}"
            ) from None
    return vals


def load_calibration(path) -> PolynomialIntrinsics:
    """Parse a calibration text file; errors name the offending line."""
    path = Path(path)
    if not path.exists():
        raise CalibrationError(f"calibration file not found: {path}")
    fields: dict[str, list[float]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if ":" not in stripped:
            raise CalibrationError(f"line {lineno}: expected 'key: values', got {line!r}")
        key, _, raw = stripped.partition(":")
        key = key.strip()
        fields[key] = _parse_floats(key, raw, lineno)
    for key in _REQUIRED_KEYS:
        if key not in fields:
            raise CalibrationError(f"missing required field {key!r}")
    if len(fields["poly"]) == 0:
        raise CalibrationError("field 'poly' is empty")
    if fields["poly"][0] == 0.0:
        raise CalibrationError("field 'poly' has a0 = 0")
    if len(fields["center"]) != 2:
        raise CalibrationError("field 'center' needs exactly 2 values")
    if len(fields["image_size"]) != 2:
        raise CalibrationError("field 'image_size' needs exactly 2 values")
    if len(fields["fov_deg"]) != 2:
        raise CalibrationError("field 'fov_deg' needs exactly 2 values")
    affine = fields.get("affine", [1.0, 0.0, 0.0])
    if len(affine) != 3:
        raise CalibrationError("field 'affine' needs exactly 3 values")
    return PolynomialIntrinsics(
        poly=tuple(fields["poly"]),
        inv_poly=tuple(fields.get("inv_poly", ())),
        center=(fields["center"][0], fields["center"][1]),
        affine=(affine[0], affine[1], affine[2]),
        image_size=(int(fields["image_size"][0]), int(fields["image_size"][1])),
        fov_range=(fields["fov_deg"][0], fields["fov_deg"][1]),
    )


def save_calibration(intr: PolynomialIntrinsics, path) -> None:
    lines = ["# panoslam omnidirectional calibration"]
    lines.append("poly: " + " ".join(repr(float(a)) for a in intr.poly))
    if intr.inv_poly:
        lines.append("inv_poly: " + " ".join(repr(float(a)) for a in intr.inv_poly))
    lines.append(f"center: {float(intr.center[0])!r} {float(intr.center[1])!r}")
    lines.append("affine: " + " ".join(repr(float(a)) for a in intr.affine))
    lines.append(f"image_size: {int(intr.image_size[0])} {int(intr.image_size[1])}")
    lines.append(f"fov_deg: {float(intr.fov_range[0])!r} {float(intr.fov_range[1])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def sample_calibration_path() -> Path:
    """Path of the calibration asset shipped with the package."""
    return Path(__file__).parent / "assets" / "sample_calibration.txt"


def load_sample_calibration() -> PolynomialIntrinsics:
    return load_calibration(sample_calibration_path())
