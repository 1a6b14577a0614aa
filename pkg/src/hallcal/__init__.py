"""Self-calibration of linear analog Hall sensors from closed-loop data."""

__version__ = "0.1.0"
