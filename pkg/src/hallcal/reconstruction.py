"""Rotor-angle reconstruction from three Hall voltages.

``f_init`` combines a Clarke transformation, ``atan2`` and unwrapping around
the previous estimate. ``f_star`` adds a periodic piecewise-linear
correction looked up from a :class:`CorrectionTable` built on a model of the
flux map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .flux_model import FluxModel

TWO_PI = 2 * np.pi

CLARKE = (2.0 / 3.0) * np.array([
    [1.0, -0.5, -0.5],
    [0.0, np.sqrt(3.0) / 2, -np.sqrt(3.0) / 2],
    [0.5, 0.5, 0.5],
])
CLARKE.setflags(write=False)


class DegenerateInputError(ValueError):
    """The Clarke components are both zero, so the angle is undefined."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BijectivityError(ValueError):
    def __init__(self, report):
        super().__init__(f"correction table is not bijective: {report.describe()}")
        self.report = report


@dataclass
class ReconstructionState:
    """Previous angle estimate; owned and updated by the caller."""

    phi: float = 0.0


def clarke(d) -> np.ndarray:
    """Clarke transform of a 3-vector (or an array of them along the last axis)."""
    return np.asarray(d, dtype=float) @ CLARKE.T


def unwrap_gamma(y_now, y_prev):
    """Branch of ``y_now`` (mod 2 pi) closest to ``y_prev``."""
    return y_prev + np.mod(y_now - y_prev + np.pi, TWO_PI) - np.pi


def f_init(d, state: ReconstructionState, n_m: int) -> float:
    """Initial reconstruction; does not modify ``state``."""
    dt = clarke(d)
    if dt[0] == 0.0 and dt[1] == 0.0:
        raise DegenerateInputError("Clarke components are both zero; angle undefined")
    return float(unwrap_gamma(np.arctan2(dt[1], dt[0]), n_m * state.phi) / n_m)


@dataclass(frozen=True)
class BijectivityReport:
    ok: bool
    violations: tuple = ()

    def describe(self) -> str:
        if self.ok:
            return "ok"
        pairs = ", ".join(f"({i}, {j})" for i, j in self.violations)
        return f"knot order reverses at index pairs {pairs}"


@dataclass(frozen=True)
class CorrectionTable:
    """Wrap-around lookup table of corrections ``eta`` at reconstructed angles ``y_hat``.

    ``y_hat`` is stored in grid order and wrapped into [0, 2 pi).
    """

    y_hat: np.ndarray
    eta: np.ndarray
    period: float = TWO_PI
    _knots: np.ndarray = field(init=False, repr=False, compare=False)
    _eta_ext: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        y = np.array(self.y_hat, dtype=float).ravel()
        e = np.array(self.eta, dtype=float).ravel()
        if y.size != e.size or y.size < 2:
            raise ValueError("y_hat and eta must have equal length >= 2")
        if self.period != TWO_PI:
            raise ValueError("only a 2*pi period is supported")
        y = np.mod(y, TWO_PI)
        y[y >= TWO_PI] -= TWO_PI
        for a in (y, e):
            a.setflags(write=False)
        object.__setattr__(self, "y_hat", y)
        object.__setattr__(self, "eta", e)
        order = np.argsort(y, kind="stable")
        ys, es = y[order], e[order]
        knots = np.concatenate([[ys[-1] - TWO_PI], ys, [ys[0] + TWO_PI]])
        eta_ext = np.concatenate([[es[-1]], es, [es[0]]])
        object.__setattr__(self, "_knots", knots)
        object.__setattr__(self, "_eta_ext", eta_ext)

    @property
    def size(self) -> int:
        return self.y_hat.size

    @classmethod
    def zeros(cls, M: int) -> "CorrectionTable":
        return cls(TWO_PI * np.arange(M) / M, np.zeros(M))

    def lookup_arrays(self):
        """Sorted, wrap-extended ``(knots, eta)`` used by the compiled loops."""
        return self._knots, self._eta_ext

    # -- persistence --------------------------------------------------------
    def to_dict(self) -> dict:
        return {"M": self.size, "y_hat": self.y_hat.tolist(), "eta": self.eta.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CorrectionTable":
        extra = set(doc) - {"M", "y_hat", "eta"}
        if extra:
            raise ValueError(f"unknown correction table keys: {sorted(extra)}")
        table = cls(doc["y_hat"], doc["eta"])
        if "M" in doc and int(doc["M"]) != table.size:
            raise ValueError(f"table declares M={doc['M']} but holds {table.size} knots")
        return table

    def to_bytes(self) -> bytes:
        """Little-endian ``uint64 M`` followed by ``M`` knots and ``M`` corrections (float64)."""
        return (struct.pack("<Q", self.size) + self.y_hat.astype("<f8").tobytes()
                + self.eta.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CorrectionTable":
        (M,) = struct.unpack_from("<Q", blob, 0)
        if len(blob) != 8 + 16 * M:
            raise ValueError(f"binary table length {len(blob)} does not match M={M}")
        y = np.frombuffer(blob, dtype="<f8", count=M, offset=8)
        e = np.frombuffer(blob, dtype="<f8", count=M, offset=8 + 8 * M)
        return cls(y.astype(float), e.astype(float))


def check_bijective(table: CorrectionTable) -> BijectivityReport:
    """A circular knot sequence is bijective iff it descends exactly once (at the wrap)."""
    y = table.y_hat
    nxt = np.roll(y, -1)
    idx = np.flatnonzero(nxt <= y)
    if idx.size == 1:
        return BijectivityReport(True)
    if idx.size == 0:
        # all equal cannot happen for M >= 2 distinct knots; treat as degenerate
        return BijectivityReport(False, ((0, 1 % y.size),))
    # the largest drop is the legitimate wrap; everything else is a reversal
    drops = y[idx] - nxt[idx]
    keep = np.ones(idx.size, bool)
    keep[np.argmax(drops)] = False
    M = y.size
    return BijectivityReport(False, tuple((int(i), int((i + 1) % M)) for i in idx[keep]))


def _lut_points(model: FluxModel, M: int, n_m: int):
    y0 = TWO_PI * np.arange(M) / M
    dt = clarke(model(y0))
    if np.any((dt[:, 0] == 0.0) & (dt[:, 1] == 0.0)):
        raise DegenerateInputError("model flux has zero Clarke components on the grid")
    electrical = np.arctan2(dt[:, 1], dt[:, 0])
    # each grid point is reconstructed around its own angle
    y_hat = unwrap_gamma(electrical, n_m * y0) / n_m
    return y0, y_hat


def build_lut(model: FluxModel, M: int = 2048, n_m: int | None = None) -> CorrectionTable:
    """Correction table from the flux model on an ``M``-point grid over [0, 2 pi)."""
    n_m = model.n_m if n_m is None else int(n_m)
    if M < 2:
        raise ValueError("M must be >= 2")
    y0, y_hat = _lut_points(model, M, n_m)
    table = CorrectionTable(y_hat, y0 - y_hat)
    report = check_bijective(table)
    if not report.ok:
        raise BijectivityError(report)
    return table


def eta_lookup(table: CorrectionTable, y_hat):
    """Interpolated correction at reconstructed angle(s) ``y_hat``."""
    knots, eta = table.lookup_arrays()
    w = np.mod(np.asarray(y_hat, dtype=float), TWO_PI)
    w = np.where(w >= TWO_PI, w - TWO_PI, w)
    out = np.interp(w, knots, eta)
    return float(out) if out.ndim == 0 else out


def f_star(d, state: ReconstructionState, n_m: int, table: CorrectionTable) -> float:
    """Corrected reconstruction ``f_init(d) + eta(f_init(d))``."""
    y = f_init(d, state, n_m)
    return y + eta_lookup(table, y)


def reconstruct_sequence(d, n_m: int, table: CorrectionTable | None = None,
                         phi0: float = 0.0) -> np.ndarray:
    """Apply ``f_init`` (or ``f_star`` when a table is given) along a sample sequence.

    The previous output seeds the unwrapping of the next sample.
    """
    d = np.ascontiguousarray(d, dtype=float)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ValueError("d must have shape (N, 3)")
    out = np.empty(d.shape[0])
    if table is None:
        knots = eta = np.zeros(2)
    else:
        knots, eta = table.lookup_arrays()
    status, k = _kernels.reconstruct(d, int(n_m), float(phi0), knots, eta,
                                     table is not None, out)
    if status == _kernels.DEGENERATE:
        raise DegenerateInputError(f"degenerate Hall sample at index {k}", index=k)
    return out
