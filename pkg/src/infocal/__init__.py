"""Information-driven visual-inertial self-calibration toolkit."""

__version__ = "0.1.0"
