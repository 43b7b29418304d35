"""Exception types shared across the package."""


class PanoSlamError(Exception):
    """Base class for all package errors."""


class CalibrationError(PanoSlamError):
    """Calibration file missing, malformed, or degenerate."""


class OutOfFovError(PanoSlamError):
    """Bearing lies outside the calibrated field of view."""


class InsufficientDataError(PanoSlamError):
    """Fewer samples/correspondences than the operation requires."""


class DegenerateGeometryError(PanoSlamError):
    """Input configuration leaves the estimate unobservable."""


class LowParallaxError(PanoSlamError):
    """Rays too close to parallel for triangulation."""


class NotReadyError(PanoSlamError):
    """Not enough motion/data yet; caller should wait and retry."""


class InitializationError(PanoSlamError):
    """Vision-only SfM or visual-inertial alignment failed."""


class OptimizationError(PanoSlamError):
    """Solver aborted (non-finite cost or ill-posed problem)."""


class PersistenceError(PanoSlamError):
    """Saved pose graph or vocabulary could not be read back."""
