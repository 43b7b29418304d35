"""Feature detection and tracking to identified bearing tracks.

Corners come from the minimum-eigenvalue (Shi-Tomasi) detector and are
followed with pyramidal Lucas-Kanade flow; every surviving pixel is
lifted to a unit bearing through the calibration.  Per-frame outlier
rejection runs the bearing-space essential RANSAC, whose cheirality
screen also rejects antipodally flipped matches that satisfy the
epipolar constraint.

Synthetic track tables (id + pixel per frame) are accepted as an
alternative to rasters and flow through the same rejection and output
path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .camera import PolynomialIntrinsics, unproject, zenith_angle
from .errors import DegenerateGeometryError
from .geometry import ransac_essential


@dataclass
class FeatureTrack:
    """One feature's lifetime: ordered (frame_index, pixel, bearing)."""

    id: int
    observations: list = field(default_factory=list)

    def add(self, frame_index: int, pixel, bearing):
        if self.observations and frame_index <= self.observations[-1][0]:
            raise ValueError("frame indices must be strictly increasing")
        self.observations.append((frame_index, np.asarray(pixel, dtype=float),
                                  np.asarray(bearing, dtype=float)))


@dataclass
class Frame:
    """Tracker input: a raster or a precomputed (id, pixel) list."""

    index: int
    timestamp: float
    image: Optional[np.ndarray] = None
    tracks_visible: Optional[list] = None  # [(id, (u, v)), ...]


@dataclass(frozen=True)
class TrackedFrame:
    """Tracker output consumed by the estimator."""

    index: int
    timestamp: float
    ids: np.ndarray  # (n,) int
    pixels: np.ndarray  # (n, 2)
    bearings: np.ndarray  # (n, 3)


@dataclass(frozen=True)
class TrackerConfig:
    target_count: int = 150
    min_distance: float = 20.0
    quality: float = 0.01
    lk_levels: int = 3
    lk_window: int = 21
    lk_iterations: int = 30
    lk_epsilon: float = 0.01
    ransac_iterations: int = 100
    ransac_threshold_deg: float = 1.0
    reject_outliers: bool = True


def detect_corners(image, max_count: int, min_distance: float, quality: float,
                   mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Shi-Tomasi corners, strongest first, (n, 2) float pixels."""
    img = np.asarray(image)
    if img.size == 0:
        return np.zeros((0, 2))
    pts = cv2.goodFeaturesToTrack(
        img,
        maxCorners=max_count,
        qualityLevel=quality,
        minDistance=min_distance,
        mask=mask,
    )
    if pts is None:
        return np.zeros((0, 2))
    return pts.reshape(-1, 2).astype(float)


def track_lk(prev_image, next_image, prev_pts, config: TrackerConfig = TrackerConfig()):
    """Pyramidal LK flow: returns (tracked (n,2), status (n,) bool)."""
    prev_pts = np.asarray(prev_pts, dtype=np.float32).reshape(-1, 1, 2)
    if len(prev_pts) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    nxt, status, _ = cv2.calcOpticalFlowPyrLK(
        prev_image,
        next_image,
        prev_pts,
        None,
        winSize=(config.lk_window, config.lk_window),
        maxLevel=config.lk_levels,
        criteria=(
            cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS,
            config.lk_iterations,
            config.lk_epsilon,
        ),
    )
    nxt = nxt.reshape(-1, 2).astype(float)
    ok = status.reshape(-1).astype(bool)
    h, w = np.asarray(next_image).shape[:2]
    inside = (
        (nxt[:, 0] >= 0) & (nxt[:, 0] <= w - 1) & (nxt[:, 1] >= 0) & (nxt[:, 1] <= h - 1)
    )
    return nxt, ok & inside


def reject_outliers_epipolar(x1, x2, iterations: int = 100,
                             threshold_deg: float = 1.0, seed: int = 0):
    """Inlier mask from the bearing essential RANSAC, or None.

    None means "unknown": fewer than 8 pairs, or no supported model;
    callers keep the frame unfiltered in that case.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    if len(x1) < 8:
        return None
    try:
        _, mask = ransac_essential(x1, x2, iterations, threshold_deg, seed=seed)
    except DegenerateGeometryError:
        return None
    return mask


class FeatureTracker:
    """Stateful frame-to-frame tracker producing identified bearings.

    Track ids increase monotonically and are never reused.  Lost tracks
    are dropped from memory immediately; long-term association is the
    loop module's job.
    """

    def __init__(self, intr: PolynomialIntrinsics, config: TrackerConfig = TrackerConfig(),
                 seed: int = 0):
        self.intr = intr
        self.config = config
        self.seed = seed
        self.tracks: dict[int, FeatureTrack] = {}
        self._next_id = 0
        self._prev_image = None
        self._prev_ids = np.zeros(0, dtype=int)
        self._prev_pixels = np.zeros((0, 2))
        self._prev_bearings = np.zeros((0, 3))
        self._fov_mask = None
        self._frame_count = 0

    def _annulus_mask(self) -> np.ndarray:
        if self._fov_mask is None:
            w, h = self.intr.image_size
            u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
            pix = np.stack([u.ravel(), v.ravel()], axis=-1)
            zen = zenith_angle(unproject(self.intr, pix)).reshape(h, w)
            tmin, tmax = self.intr.fov_range
            self._fov_mask = ((zen >= tmin) & (zen <= tmax)).astype(np.uint8) * 255
        return self._fov_mask

    def process(self, frame: Frame) -> TrackedFrame:
        if frame.image is not None:
            return self._process_image(frame)
        if frame.tracks_visible is not None:
            return self._process_synthetic(frame)
        raise ValueError("frame carries neither an image nor synthetic tracks")

    def _finish(self, frame: Frame, ids, pixels, bearings) -> TrackedFrame:
        ids = np.asarray(ids, dtype=int)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        bearings = np.asarray(bearings, dtype=float).reshape(-1, 3)
        # Outlier rejection against the previous frame's bearings.
        if self.config.reject_outliers and len(self._prev_ids):
            common, pi, ci = np.intersect1d(self._prev_ids, ids, return_indices=True)
            if len(common) >= 8:
                mask = reject_outliers_epipolar(
                    self._prev_bearings[pi],
                    bearings[ci],
                    self.config.ransac_iterations,
                    self.config.ransac_threshold_deg,
                    seed=self.seed + self._frame_count,
                )
                if mask is not None and not mask.all():
                    drop = np.zeros(len(ids), dtype=bool)
                    drop[ci[~mask]] = True
                    ids, pixels, bearings = ids[~drop], pixels[~drop], bearings[~drop]

        live = set(ids.tolist())
        for tid in [t for t in self.tracks if t not in live]:
            del self.tracks[tid]
        for tid, px, br in zip(ids, pixels, bearings):
            self.tracks.setdefault(int(tid), FeatureTrack(int(tid))).add(
                frame.index, px, br
            )
        self._prev_ids, self._prev_pixels, self._prev_bearings = ids, pixels, bearings
        self._frame_count += 1
        return TrackedFrame(frame.index, frame.timestamp, ids, pixels, bearings)

    def _process_image(self, frame: Frame) -> TrackedFrame:
        cfg = self.config
        img = frame.image
        ids = np.zeros(0, dtype=int)
        pixels = np.zeros((0, 2))
        if self._prev_image is not None and len(self._prev_pixels):
            nxt, ok = track_lk(self._prev_image, img, self._prev_pixels, cfg)
            ids = self._prev_ids[ok]
            pixels = nxt[ok]

        # Replenish up to the target count, away from live tracks.
        need = cfg.target_count - len(ids)
        if need > 0:
            mask = self._annulus_mask().copy()
            for px in pixels:
                cv2.circle(mask, (int(px[0]), int(px[1])), int(cfg.min_distance), 0, -1)
            fresh = detect_corners(img, need, cfg.min_distance, cfg.quality, mask)
            if len(fresh):
                new_ids = np.arange(self._next_id, self._next_id + len(fresh))
                self._next_id += len(fresh)
                ids = np.concatenate([ids, new_ids])
                pixels = np.concatenate([pixels, fresh])

        bearings = (
            unproject(self.intr, pixels) if len(pixels) else np.zeros((0, 3))
        )
        self._prev_image = img
        return self._finish(frame, ids, pixels, bearings)

    def _process_synthetic(self, frame: Frame) -> TrackedFrame:
        items = list(frame.tracks_visible)
        ids = np.array([tid for tid, _ in items], dtype=int)
        pixels = np.array([np.asarray(px, dtype=float) for _, px in items]).reshape(-1, 2)
        self._next_id = max(self._next_id, int(ids.max()) + 1) if len(ids) else self._next_id
        bearings = (
            unproject(self.intr, pixels) if len(pixels) else np.zeros((0, 3))
        )
        return self._finish(frame, ids, pixels, bearings)


# ---------------------------------------------------------------------------
# File formats: image-directory streams and synthetic track tables.
# ---------------------------------------------------------------------------


def read_image_frames(directory):
    """Yield Frame objects from `frames.csv` + grayscale rasters."""
    directory = Path(directory)
    with open(directory / "frames.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = cv2.imread(str(directory / row["filename"]), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise FileNotFoundError(directory / row["filename"])
            yield Frame(int(row["index"]), float(row["timestamp"]), image=img)


def write_tracks_csv(path, frames) -> None:
    """Write per-frame (id, pixel) tables: `frame, track_id, u, v`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "track_id", "u", "v"])
        for fr in frames:
            for tid, px in zip(fr.ids, fr.pixels):
                writer.writerow([fr.index, int(tid), repr(float(px[0])), repr(float(px[1]))])


def read_tracks_csv(path) -> dict[int, list]:
    """Read a synthetic track table into frame_index -> [(id, pixel)]."""
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["frame"]), []).append(
                (int(row["track_id"]), (float(row["u"]), float(row["v"])))
            )
    return out
