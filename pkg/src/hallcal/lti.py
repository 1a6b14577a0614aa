"""Linear time-invariant models: ZOH discretization, realization and stepping.

Only SISO models are supported. A discrete state-space model with zero
states is a static gain (``A`` is 0x0, ``B`` is 0x1, ``C`` is 1x0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal


class ModelError(ValueError):
    """Raised for malformed or unsupported LTI models."""


def _poly(coeffs, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(coeffs, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ModelError(f"{name} must be a non-empty 1-D coefficient vector")
    if not np.all(np.isfinite(arr)):
        raise ModelError(f"{name} contains non-finite coefficients")
    nz = np.flatnonzero(arr)
    # strip leading zeros, keep at least one coefficient
    return arr[nz[0]:] if nz.size else arr[-1:]


@dataclass(frozen=True)
class ContinuousTransferFunction:
    """``num(s) / den(s) * exp(-input_delay * s)``, coefficients in descending powers."""

    num: np.ndarray
    den: np.ndarray
    input_delay: float = 0.0

    def __post_init__(self):
        num = _poly(self.num, "numerator")
        den = _poly(self.den, "denominator")
        if den[0] == 0.0:
            raise ModelError("denominator leading coefficient must be nonzero")
        if num.size > den.size:
            raise ModelError(
                f"improper transfer function: numerator degree {num.size - 1} "
                f"> denominator degree {den.size - 1}"
            )
        if not np.isfinite(self.input_delay) or self.input_delay < 0:
            raise ModelError(f"input_delay must be finite and >= 0, got {self.input_delay}")
        object.__setattr__(self, "num", num)
        object.__setattr__(self, "den", den)
        object.__setattr__(self, "input_delay", float(self.input_delay))

    def dc_gain(self) -> float:
        return float(np.polyval(self.num, 0.0) / np.polyval(self.den, 0.0))


@dataclass(frozen=True)
class DiscreteTransferFunction:
    """Transfer function in the forward shift operator ``q``.

    The denominator is normalized to a monic polynomial on construction.
    """

    num: np.ndarray
    den: np.ndarray
    sample_time: float

    def __post_init__(self):
        num = _poly(self.num, "numerator")
        den = _poly(self.den, "denominator")
        if den[0] == 0.0:
            raise ModelError("denominator leading coefficient must be nonzero")
        if num.size > den.size:
            raise ModelError(
                f"improper transfer function: numerator degree {num.size - 1} "
                f"> denominator degree {den.size - 1}"
            )
        if not self.sample_time > 0:
            raise ModelError(f"sample_time must be > 0, got {self.sample_time}")
        lead = den[0]
        object.__setattr__(self, "num", num / lead)
        object.__setattr__(self, "den", den / lead)
        object.__setattr__(self, "sample_time", float(self.sample_time))

    def freqresp(self, freqs_hz) -> np.ndarray:
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=float) * self.sample_time)
        return np.polyval(self.num, z) / np.polyval(self.den, z)


@dataclass(frozen=True)
class DiscreteStateSpace:
    """``x[k+1] = A x[k] + B u[k]``, ``y[k] = C x[k] + D u[k]``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float
    sample_time: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.size == 0:
            A = np.zeros((0, 0))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ModelError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        if np.size(self.B) != n or np.size(self.C) != n:
            raise ModelError(f"B and C must have {n} entries, got {np.size(self.B)} "
                             f"and {np.size(self.C)}")
        B = np.asarray(self.B, dtype=float).reshape(n, 1) if n else np.zeros((0, 1))
        C = np.asarray(self.C, dtype=float).reshape(1, n) if n else np.zeros((1, 0))
        D = float(np.asarray(self.D, dtype=float).reshape(()))
        if not self.sample_time > 0:
            raise ModelError(f"sample_time must be > 0, got {self.sample_time}")
        for arr in (A, B, C):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "sample_time", float(self.sample_time))

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def with_input_scale(self, factor: float) -> "DiscreteStateSpace":
        """Return the model with ``B`` and ``D`` multiplied by ``factor``."""
        return DiscreteStateSpace(self.A, self.B * factor, self.C, self.D * factor,
                                  self.sample_time)

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A) if self.n_states else np.zeros(0, complex)

    def freqresp(self, freqs_hz) -> np.ndarray:
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=float) * self.sample_time)
        n = self.n_states
        out = np.empty(z.shape, dtype=complex)
        eye = np.eye(n)
        for i, zi in enumerate(z.flat):
            if n:
                out.flat[i] = (self.C @ np.linalg.solve(zi * eye - self.A, self.B))[0, 0] + self.D
            else:
                out.flat[i] = self.D
        return out

    def dc_gain(self) -> float:
        return float(self.freqresp(0.0).real)

    def simulate(self, u, x0=None) -> np.ndarray:
        """Response to an input sequence, starting from ``x0`` (zero by default)."""
        u = np.asarray(u, dtype=float)
        x = np.zeros(self.n_states) if x0 is None else np.asarray(x0, dtype=float).copy()
        y = np.empty_like(u)
        b = self.B[:, 0]
        c = self.C[0]
        for k, uk in enumerate(u):
            y[k] = c @ x + self.D * uk
            x = self.A @ x + b * uk
        return y


def _continuous_ss(tf: ContinuousTransferFunction):
    if tf.den.size == 1:
        return np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), tf.num[-1] / tf.den[0]
    A, B, C, D = scipy.signal.tf2ss(tf.num, tf.den)
    return A, B, C, float(np.squeeze(D))


def _zoh_integrals(A: np.ndarray, B: np.ndarray, t: float):
    """Return ``exp(A t)`` and ``int_0^t exp(A s) ds B`` via one block exponential."""
    n = A.shape[0]
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = A
    M[:n, n:] = B
    E = scipy.linalg.expm(M * t)
    return E[:n, :n], E[:n, n:]


def discretize_zoh(tf: ContinuousTransferFunction, Ts: float) -> DiscreteStateSpace:
    """Exact zero-order-hold equivalent of ``tf`` including its input delay.

    The delay ``tau = (ell + f) * Ts`` with integer ``ell`` and ``0 <= f < 1``
    is realized by augmenting the state with the ``ell + 1`` most recent
    inputs (or ``ell`` when ``f == 0``).
    """
    if not np.isfinite(Ts) or Ts <= 0:
        raise ModelError(f"sample time must be > 0, got {Ts}")
    A, B, C, D = _continuous_ss(tf)
    n = A.shape[0]
    ratio = tf.input_delay / Ts
    ell = int(np.floor(ratio + 1e-12))
    frac = ratio - ell
    if frac < 1e-12:
        frac = 0.0

    if n:
        Phi, Gamma = _zoh_integrals(A, B, Ts)
    else:
        Phi, Gamma = np.zeros((0, 0)), np.zeros((0, 1))

    if frac == 0.0 and ell == 0:
        return DiscreteStateSpace(Phi, Gamma, C, D, Ts)

    if frac > 0.0 and n:
        # split the sampling interval at the delayed switching instant
        tail = (1.0 - frac) * Ts
        Phi_tail, Gamma0 = _zoh_integrals(A, B, tail)
        _, G_head = _zoh_integrals(A, B, frac * Ts)
        Gamma1 = Phi_tail @ G_head
    else:
        Gamma0, Gamma1 = Gamma, np.zeros((n, 1))

    # buffer holds u[k-1], ..., u[k-nbuf]
    nbuf = ell + (1 if frac > 0.0 else 0)
    N = n + nbuf
    Ad = np.zeros((N, N))
    Bd = np.zeros((N, 1))
    Cd = np.zeros((1, N))
    Ad[:n, :n] = Phi
    # plant sees u[k-ell] over the tail and u[k-ell-1] over the head
    if ell == 0:
        Bd[:n] = Gamma0
    else:
        Ad[:n, n + ell - 1:n + ell] = Gamma0
    if frac > 0.0:
        Ad[:n, n + ell:n + ell + 1] = Gamma1
    if nbuf:
        Bd[n, 0] = 1.0
        for j in range(1, nbuf):
            Ad[n + j, n + j - 1] = 1.0
    Cd[0, :n] = C
    Dd = 0.0
    if D != 0.0:
        # direct feedthrough sees the input that is current at t_k - tau
        lag = ell + (1 if frac > 0.0 else 0)
        if lag == 0:
            Dd = D
        else:
            Cd[0, n + lag - 1] += D
    return DiscreteStateSpace(Ad, Bd, Cd, Dd, Ts)


def tf_to_ss(tf: DiscreteTransferFunction) -> DiscreteStateSpace:
    """Controllable canonical realization of a proper discrete transfer function."""
    den = tf.den
    n = den.size - 1
    num = np.concatenate([np.zeros(den.size - tf.num.size), tf.num])
    D = num[0]
    if n == 0:
        return DiscreteStateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)),
                                  D, tf.sample_time)
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = (num[1:] - D * den[1:]).reshape(1, n)
    return DiscreteStateSpace(A, B, C, D, tf.sample_time)


def ss_step(model: DiscreteStateSpace, state, u: float):
    """One step of ``model``: returns ``(A x + B u, C x + D u)``."""
    x = np.asarray(state, dtype=float)
    if x.shape != (model.n_states,):
        raise ModelError(f"state must have shape ({model.n_states},), got {x.shape}")
    y = float(model.C[0] @ x + model.D * u)
    return model.A @ x + model.B[:, 0] * u, y


# -- serialization -----------------------------------------------------------

def model_to_dict(model) -> dict:
    if isinstance(model, ContinuousTransferFunction):
        return {"kind": "continuous_tf", "num": model.num.tolist(),
                "den": model.den.tolist(), "delay": model.input_delay}
    if isinstance(model, DiscreteTransferFunction):
        return {"kind": "discrete_tf", "num": model.num.tolist(),
                "den": model.den.tolist(), "Ts": model.sample_time}
    if isinstance(model, DiscreteStateSpace):
        return {"kind": "discrete_ss", "A": model.A.tolist(), "B": model.B[:, 0].tolist(),
                "C": model.C[0].tolist(), "D": model.D, "Ts": model.sample_time}
    raise TypeError(f"cannot serialize {type(model).__name__}")


_MODEL_KEYS = {
    "continuous_tf": {"kind", "num", "den", "delay"},
    "discrete_tf": {"kind", "num", "den", "Ts"},
    "discrete_ss": {"kind", "A", "B", "C", "D", "Ts"},
}


def model_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind not in _MODEL_KEYS:
        raise ModelError(f"unknown model kind {kind!r}")
    extra = set(doc) - _MODEL_KEYS[kind]
    if extra:
        raise ModelError(f"unknown keys for {kind}: {sorted(extra)}")
    required = _MODEL_KEYS[kind] - {"delay"}
    missing = required - set(doc)
    if missing:
        raise ModelError(f"missing keys for {kind}: {sorted(missing)}")
    if kind == "continuous_tf":
        return ContinuousTransferFunction(doc["num"], doc["den"], doc.get("delay", 0.0))
    if kind == "discrete_tf":
        return DiscreteTransferFunction(doc["num"], doc["den"], doc["Ts"])
    n = len(doc["A"])
    return DiscreteStateSpace(np.asarray(doc["A"], float).reshape(n, n), doc["B"], doc["C"],
                              doc["D"], doc["Ts"])
