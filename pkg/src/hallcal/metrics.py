"""Validation metrics: angle-error statistics, spatial spectra and the noise floor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flux_model import FluxModel
from .reconstruction import clarke, unwrap_gamma

TWO_PI = 2 * np.pi
DEFAULT_PSD_POINTS = 2 ** 16


@dataclass(frozen=True)
class CumulativePsd:
    frequency: np.ndarray  # cycles per revolution
    cumulative: np.ndarray  # rad^2

    @property
    def total(self) -> float:
        return float(self.cumulative[-1]) if self.cumulative.size else 0.0

    def band_power(self, centers, half_width: float = 0.5) -> float:
        """Power in the union of ``[c - half_width, c + half_width]`` bands."""
        increments = np.diff(np.concatenate([[0.0], self.cumulative]))
        mask = np.zeros(self.frequency.size, bool)
        for c in np.atleast_1d(centers):
            mask |= np.abs(self.frequency - c) <= half_width + 1e-12
        return float(increments[mask].sum())


@dataclass(frozen=True)
class ErrorMetrics:
    rms_init: float
    peak_init: float
    rms_star: float
    peak_star: float
    psd_init: CumulativePsd | None = None
    psd_star: CumulativePsd | None = None

    @property
    def improvement_factor_rms(self) -> float:
        return _ratio(self.rms_init, self.rms_star)

    @property
    def improvement_factor_peak(self) -> float:
        return _ratio(self.peak_init, self.peak_star)

    def to_dict(self) -> dict:
        out = {
            "rms_init": self.rms_init, "peak_init": self.peak_init,
            "rms_star": self.rms_star, "peak_star": self.peak_star,
            "improvement_factor_rms": self.improvement_factor_rms,
            "improvement_factor_peak": self.improvement_factor_peak,
        }
        for name, psd in (("init", self.psd_init), ("star", self.psd_star)):
            if psd is not None:
                out[f"psd_total_{name}"] = psd.total
        return out


def _ratio(a: float, b: float) -> float:
    if b == 0.0:
        return float("inf") if a > 0 else float("nan")
    return a / b


def rms(e) -> float:
    e = np.asarray(e, dtype=float)
    return float(np.sqrt(np.mean(e ** 2))) if e.size else 0.0


def peak(e) -> float:
    e = np.asarray(e, dtype=float)
    return float(np.max(np.abs(e))) if e.size else 0.0


def compute_cumulative_psd(error, position, n_points: int = DEFAULT_PSD_POINTS,
                           whole_revolutions: bool = True) -> CumulativePsd:
    """Cumulative one-sided periodogram of ``error`` over the position coordinate.

    ``error`` is linearly resampled onto ``n_points`` uniform positions
    (endpoint excluded). With ``whole_revolutions`` the analysed span is cut
    to the largest whole number of revolutions, when at least one is
    available, so revolution-periodic errors fall on exact bins. The first
    bin is DC, so the final value is the mean square of the resampled error.
    """
    e = np.asarray(error, dtype=float)
    x = np.asarray(position, dtype=float)
    if e.shape != x.shape or e.ndim != 1:
        raise ValueError("error and position must be 1-D arrays of equal length")
    if e.size < 2:
        raise ValueError("need at least two samples")
    if np.any(np.diff(x) <= 0):
        raise ValueError("position must be strictly increasing")
    span = x[-1] - x[0]
    if whole_revolutions and span >= TWO_PI:
        span = TWO_PI * np.floor(span / TWO_PI + 1e-12)
    grid = x[0] + span * np.arange(n_points) / n_points
    eu = np.interp(grid, x, e)
    X = np.fft.rfft(eu) / n_points
    power = np.abs(X) ** 2
    power[1:] *= 2
    if n_points % 2 == 0:
        power[-1] /= 2  # Nyquist bin has no mirror image
    revolutions = span / TWO_PI
    freq = np.arange(power.size) / revolutions
    return CumulativePsd(freq, np.cumsum(power))


def error_metrics(y0, y_init, y_star, position=None, n_points: int = DEFAULT_PSD_POINTS
                  ) -> ErrorMetrics:
    """Error statistics of two reconstructions against the true angle ``y0``."""
    y0 = np.asarray(y0, dtype=float)
    e_i = np.asarray(y_init, dtype=float) - y0
    e_s = np.asarray(y_star, dtype=float) - y0
    psd_i = psd_s = None
    if position is not None:
        psd_i = compute_cumulative_psd(e_i, position, n_points)
        psd_s = compute_cumulative_psd(e_s, position, n_points)
    return ErrorMetrics(rms(e_i), peak(e_i), rms(e_s), peak(e_s), psd_i, psd_s)


def monotone_segment(position) -> slice:
    """Longest trailing run of strictly increasing positions.

    Closed-loop data start from rest, where noise can jitter the angle
    backwards; spectra are taken over the monotone part.
    """
    x = np.asarray(position, dtype=float)
    bad = np.flatnonzero(np.diff(x) <= 0)
    start = 0 if bad.size == 0 else int(bad[-1]) + 1
    return slice(start, x.size)


# -- noise floor ----------------------------------------------------------------

def reconstructed_map(model: FluxModel, y0, n_m: int | None = None) -> np.ndarray:
    """Noise-free ``f_init(g(y0))`` with each point unwrapped around itself."""
    n_m = model.n_m if n_m is None else n_m
    y0 = np.asarray(y0, dtype=float)
    dt = clarke(model(y0))
    return unwrap_gamma(np.arctan2(dt[..., 1], dt[..., 0]), n_m * y0) / n_m


def exact_inverse(model: FluxModel, y_hat, guess=None, grid_points: int = 2 ** 16,
                  iterations: int = 8) -> np.ndarray:
    """Invert ``y0 -> f_init(g(y0))`` at the reconstructed angles ``y_hat``.

    Dense-grid interpolation gives a starting point; Newton steps with a
    central-difference slope then refine it to machine precision. The map
    must be increasing (a bijective flux model).
    """
    y_hat = np.asarray(y_hat, dtype=float)
    lo = np.floor(np.min(y_hat) / TWO_PI) - 1
    hi = np.ceil(np.max(y_hat) / TWO_PI) + 1
    grid = TWO_PI * np.arange(grid_points) / grid_points
    F = reconstructed_map(model, grid)
    # extend one period-shifted copy on each side, then tile over the needed span
    turns = np.arange(lo, hi + 1)
    gx = (grid[None, :] + TWO_PI * turns[:, None]).ravel()
    gF = (F[None, :] + TWO_PI * turns[:, None]).ravel()
    if np.any(np.diff(gF) <= 0):
        raise ValueError("flux model map is not increasing; no unique inverse")
    y = np.interp(y_hat, gF, gx) if guess is None else np.asarray(guess, float).copy()
    h = 1e-6
    for _ in range(iterations):
        f = reconstructed_map(model, y)
        slope = (reconstructed_map(model, y + h) - reconstructed_map(model, y - h)) / (2 * h)
        y = y - (f - y_hat) / slope
    return y


def noise_floor(model: FluxModel, d, y0, phi0: float = 0.0) -> np.ndarray:
    """Angle error left when noisy voltages pass through the exact inverse of ``model``.

    ``f_init`` is chained along ``d`` to get reconstructed angles, which are
    then mapped through the exact inverse of the noise-free map
    ``y0 -> f_init(g(y0))``. Returns the per-sample error against ``y0``.
    """
    from .reconstruction import reconstruct_sequence
    y_hat = reconstruct_sequence(d, model.n_m, None, phi0)
    return exact_inverse(model, y_hat) - np.asarray(y0, dtype=float)
