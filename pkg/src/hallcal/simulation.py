"""Closed-loop simulators and the on-disk dataset format.

``simulate_truth`` produces synthetic experiment data from a continuous
plant, a true flux map, sensor noise and a discrete controller.
``simulate_model`` runs the same sampled loop noise-free with a discrete
plant model and a parametrized flux map; it is what the calibration fits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm
from pathlib import Path

import numpy as np

from . import _kernels
from .flux_model import FOURIER, BasisDescriptor, FluxModel, NoiseModel
from .lti import (
    ContinuousTransferFunction,
    DiscreteStateSpace,
    DiscreteTransferFunction,
    discretize_zoh,
    tf_to_ss,
)
from .reconstruction import CorrectionTable, DegenerateInputError

CSV_COLUMNS = ("t", "d1", "d2", "d3", "y", "T", "r")
TRUTH_COLUMN = "y0"


class SimulationDivergence(RuntimeError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


# -- reference signals -------------------------------------------------------

@dataclass(frozen=True)
class Ramp:
    start: float
    end: float
    duration: float
    sample_rate: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"ramp duration must be > 0, got {self.duration}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")


@dataclass(frozen=True)
class Multisine:
    """Random-phase multisine: ``sum_k amplitude * cos(2 pi f_k t + phase_k)``."""

    frequencies: tuple
    amplitude: float
    seed: int
    periods: int
    sample_rate: float

    def __post_init__(self):
        f = tuple(float(v) for v in np.atleast_1d(self.frequencies))
        if not f or min(f) <= 0:
            raise ValueError("multisine frequencies must be positive")
        if max(f) >= self.sample_rate / 2:
            raise ValueError(f"multisine frequency {max(f)} Hz is not below Nyquist "
                             f"({self.sample_rate / 2} Hz)")
        if int(self.periods) < 1:
            raise ValueError("multisine needs at least one period")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "periods", int(self.periods))

    @property
    def period_samples(self) -> int:
        """Smallest sample count holding an integer number of cycles of every line."""
        fs = Fraction(self.sample_rate).limit_denominator(10**6)
        n = 1
        for f in self.frequencies:
            n = lcm(n, (Fraction(f).limit_denominator(10**6) / fs).denominator)
        return n

    @property
    def duration(self) -> float:
        return self.periods * self.period_samples / self.sample_rate


def generate_ramp(cfg: Ramp) -> np.ndarray:
    n = int(round(cfg.duration * cfg.sample_rate)) + 1
    t = np.arange(n) / cfg.sample_rate
    return cfg.start + (cfg.end - cfg.start) * t / cfg.duration


def multisine_phases(cfg: Multisine) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(0.0, 2 * np.pi, len(cfg.frequencies))


def generate_multisine(cfg: Multisine) -> np.ndarray:
    n_p = cfg.period_samples
    t = np.arange(n_p) / cfg.sample_rate
    phases = multisine_phases(cfg)
    one = np.zeros(n_p)
    for f, p in zip(cfg.frequencies, phases):
        one += cfg.amplitude * np.cos(2 * np.pi * f * t + p)
    return np.tile(one, cfg.periods)


def generate_reference(cfg) -> np.ndarray:
    if isinstance(cfg, Ramp):
        return generate_ramp(cfg)
    if isinstance(cfg, Multisine):
        return generate_multisine(cfg)
    raise TypeError(f"unsupported reference {type(cfg).__name__}")


# -- datasets -------------------------------------------------------------------

@dataclass
class Dataset:
    """Logged closed-loop samples. ``y0`` is ground truth for validation only."""

    t: np.ndarray
    d: np.ndarray
    y: np.ndarray
    T: np.ndarray
    r: np.ndarray
    y0: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        self.d = np.asarray(self.d, dtype=float).reshape(n, 3)
        for name in ("t", "y", "T", "r"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"column {name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if self.y0 is not None:
            self.y0 = np.asarray(self.y0, dtype=float)
            if self.y0.shape != (n,):
                raise ValueError("y0 column length mismatch")

    def __len__(self):
        return len(self.t)

    @property
    def sample_time(self) -> float:
        if len(self.t) < 2:
            raise ValueError("dataset has fewer than two samples")
        return float(self.t[1] - self.t[0])

    def without_truth(self) -> "Dataset":
        return Dataset(self.t, self.d, self.y, self.T, self.r, None, dict(self.meta))

    def columns(self):
        cols = [self.t, self.d[:, 0], self.d[:, 1], self.d[:, 2], self.y, self.T, self.r]
        names = list(CSV_COLUMNS)
        if self.y0 is not None:
            cols.append(self.y0)
            names.append(TRUTH_COLUMN)
        return names, np.column_stack(cols)


def write_csv(path, names, table: np.ndarray):
    """Comma-separated table with a header, floats at 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        fmt = ",".join(["%.17g"] * len(names))
        np.savetxt(fh, np.atleast_2d(table), fmt=fmt)


def read_csv(path):
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: header has {len(header)} columns, rows have {data.shape[1]}")
    return header, data


def meta_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def save_dataset(ds: Dataset, path) -> Path:
    names, table = ds.columns()
    write_csv(path, names, table)
    meta_path(path).write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n")
    return Path(path)


def load_dataset(path) -> Dataset:
    header, data = read_csv(path)
    expected = list(CSV_COLUMNS)
    if header[:7] != expected or len(header) not in (7, 8) or (
            len(header) == 8 and header[7] != TRUTH_COLUMN):
        raise ValueError(f"{path}: unexpected header {header}")
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    y0 = data[:, 7] if len(header) == 8 else None
    return Dataset(data[:, 0], data[:, 1:4], data[:, 4], data[:, 5], data[:, 6], y0, meta)


# -- simulation -----------------------------------------------------------------

@dataclass(frozen=True)
class SimulationConfig:
    plant: ContinuousTransferFunction
    controller: DiscreteTransferFunction
    flux_truth: FluxModel
    noise: NoiseModel
    reference: Ramp | Multisine
    disturbance: float | np.ndarray = 0.0
    y0_bound: float = 1e3
    torque_bound: float = 1e3

    def __post_init__(self):
        fs = self.reference.sample_rate
        if abs(self.controller.sample_time * fs - 1.0) > 1e-9:
            raise ValueError(f"controller sample time {self.controller.sample_time} does not "
                             f"match the reference sample rate {fs} Hz")

    @property
    def n_m(self) -> int:
        return self.flux_truth.n_m

    @property
    def sample_time(self) -> float:
        return 1.0 / self.reference.sample_rate


def flux_arrays(basis: BasisDescriptor, theta):
    """Unpack a basis and parameter vector into the compiled-loop argument tuple."""
    coef = np.ascontiguousarray(np.asarray(theta, dtype=float).reshape(3, basis.dim))
    if basis.variant == FOURIER:
        return (coef, _kernels.BASIS_FOURIER, np.asarray(basis.harmonics, dtype=float),
                np.zeros(1), np.zeros(1), 1.0, 1.0)
    c = basis.centers
    return (coef, _kernels.BASIS_KERNEL, np.zeros(1), np.sin(c), np.cos(c),
            basis.signal_variance, 1.0 / (2 * basis.length_scale ** 2))


def _ss_arrays(model: DiscreteStateSpace):
    return (np.ascontiguousarray(model.A), np.ascontiguousarray(model.B[:, 0]),
            np.ascontiguousarray(model.C[0]))


@dataclass
class LoopRun:
    d: np.ndarray
    y: np.ndarray
    T: np.ndarray
    y0: np.ndarray


def run_loop(flux, plant: DiscreteStateSpace, controller: DiscreteStateSpace, r,
             n_m: int, noise=None, disturbance=None, table: CorrectionTable | None = None,
             y0_bound: float = 1e3, torque_bound: float = 1e3) -> LoopRun:
    """Run the sampled feedback loop once.

    ``flux`` is either a :class:`FluxModel` or a ``(basis, theta)`` pair.
    Raises :class:`SimulationDivergence` when the bounds are exceeded.
    """
    if plant.D != 0.0:
        raise ValueError("plant model must be strictly proper (D == 0) to close the loop")
    if abs(plant.sample_time - controller.sample_time) > 1e-12 * plant.sample_time:
        raise ValueError("plant and controller sample times differ")
    basis, theta = (flux.basis, flux.theta) if isinstance(flux, FluxModel) else flux
    r = np.ascontiguousarray(r, dtype=float)
    n = r.size
    noise = np.zeros((n, 3)) if noise is None else np.ascontiguousarray(noise, dtype=float)
    if disturbance is None:
        td = np.zeros(n)
    else:
        td = np.ascontiguousarray(np.broadcast_to(np.asarray(disturbance, float), (n,)))
    if table is None:
        knots = eta = np.zeros(2)
    else:
        knots, eta = table.lookup_arrays()
    out = LoopRun(np.empty((n, 3)), np.empty(n), np.empty(n), np.empty(n))
    Ag, Bg, Cg = _ss_arrays(plant)
    Ac, Bc, Cc = _ss_arrays(controller)
    status, k = _kernels.closed_loop(
        *flux_arrays(basis, theta), Ag, Bg, Cg, Ac, Bc, Cc, controller.D,
        r, noise, td, int(n_m), knots, eta, table is not None,
        float(y0_bound), float(torque_bound), out.d, out.y, out.T, out.y0)
    if status == _kernels.DIVERGED:
        raise SimulationDivergence(f"closed loop diverged at sample {k}", k)
    if status == _kernels.DEGENERATE:
        raise DegenerateInputError(f"degenerate Hall sample at index {k}", index=k)
    return out


def simulate_truth(cfg: SimulationConfig, table: CorrectionTable | None = None) -> Dataset:
    """Synthetic experiment; reconstruction uses ``f_init`` or, with ``table``, ``f_star``."""
    Ts = cfg.sample_time
    plant = discretize_zoh(cfg.plant, Ts)
    controller = tf_to_ss(cfg.controller)
    r = generate_reference(cfg.reference)
    noise = cfg.noise.sample(r.size)
    run = run_loop(cfg.flux_truth, plant, controller, r, cfg.n_m, noise=noise,
                   disturbance=cfg.disturbance, table=table,
                   y0_bound=cfg.y0_bound, torque_bound=cfg.torque_bound)
    t = np.arange(r.size) * Ts
    meta = {"reconstruction": "star" if table is not None else "init",
            "noise_seed": cfg.noise.seed, "noise_variance": cfg.noise.variance,
            "sample_rate": cfg.reference.sample_rate, "n_m": cfg.n_m}
    if isinstance(cfg.reference, Multisine):
        ms = cfg.reference
        meta.update(reference="multisine", period_samples=ms.period_samples,
                    frequencies=list(ms.frequencies), periods=ms.periods,
                    multisine_seed=ms.seed, amplitude=ms.amplitude)
    else:
        meta.update(reference="ramp")
    return Dataset(t, run.d, run.y, run.T, r, run.y0, meta)


def simulate_model(theta, bla: DiscreteStateSpace, controller: DiscreteStateSpace, r,
                   basis: BasisDescriptor, n_m: int, **bounds):
    """Noise-free closed-loop simulation with model ``g_theta``; returns ``(d_sim, y_sim)``."""
    run = run_loop((basis, theta), bla, controller, r, n_m, **bounds)
    return run.d, run.y


def replay_open_loop(theta, model: DiscreteStateSpace, torque, basis: BasisDescriptor,
                     n_m: int):
    """Drive ``model`` with a recorded torque sequence; returns ``(y0_sim, y_sim)``."""
    u = np.ascontiguousarray(torque, dtype=float)
    y0 = np.empty(u.size)
    y = np.empty(u.size)
    Ag, Bg, Cg = _ss_arrays(model)
    status, k = _kernels.open_loop(*flux_arrays(basis, theta), Ag, Bg, Cg, u, int(n_m), y0, y)
    if status != _kernels.OK:
        raise DegenerateInputError(f"degenerate model flux at sample {k}", index=k)
    return y0, y
