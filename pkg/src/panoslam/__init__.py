"""Visual-inertial SLAM for large field-of-view cameras.

Features are represented as unit bearing vectors so that observations
beyond 90 degrees from the optical axis participate in estimation like
any others.
"""

__version__ = "0.1.0"
