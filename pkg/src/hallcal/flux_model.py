"""Periodic flux-density models mapping rotor angle to three Hall voltages.

A model is linear in its parameters: ``g(y0) = (I_3 kron beta(y0)) @ theta``
where ``beta`` is a row of periodic basis functions. Two bases are
provided, a truncated Fourier series and a periodic squared-exponential
kernel evaluated on an equidistant grid of centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FOURIER = "fourier"
KERNEL = "kernel"


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class BasisDescriptor:
    """Basis definition.

    For ``variant="fourier"`` only ``harmonics`` is used; the basis row is
    ``[1, sin(h1 y), cos(h1 y), sin(h2 y), cos(h2 y), ...]``.
    For ``variant="kernel"`` the centers are ``2 pi j / m`` and each entry is
    ``sf2 * exp(-|x - x_j|^2 / (2 ell^2))`` with ``x = [sin y, cos y]``.
    """

    variant: str
    harmonics: tuple = ()
    n_centers: int = 0
    signal_variance: float = 1.0
    length_scale: float = 1.0

    def __post_init__(self):
        if self.variant == FOURIER:
            h = tuple(int(v) for v in self.harmonics)
            if not h or min(h) <= 0:
                raise BasisError("Fourier harmonics must be a non-empty list of positive integers")
            if any(float(a) != float(b) for a, b in zip(h, self.harmonics)):
                raise BasisError("Fourier harmonics must be integers")
            object.__setattr__(self, "harmonics", h)
        elif self.variant == KERNEL:
            if int(self.n_centers) < 1:
                raise BasisError("kernel basis needs at least one center")
            if not (self.signal_variance > 0 and self.length_scale > 0):
                raise BasisError("kernel signal_variance and length_scale must be > 0")
            object.__setattr__(self, "n_centers", int(self.n_centers))
            object.__setattr__(self, "signal_variance", float(self.signal_variance))
            object.__setattr__(self, "length_scale", float(self.length_scale))
        else:
            raise BasisError(f"unknown basis variant {self.variant!r}")

    @classmethod
    def fourier(cls, harmonics) -> "BasisDescriptor":
        return cls(FOURIER, harmonics=tuple(harmonics))

    @classmethod
    def kernel(cls, n_centers: int, signal_variance: float = 1.0,
               length_scale: float = 1.0) -> "BasisDescriptor":
        return cls(KERNEL, n_centers=n_centers, signal_variance=signal_variance,
                   length_scale=length_scale)

    @property
    def dim(self) -> int:
        if self.variant == FOURIER:
            return 2 * len(self.harmonics) + 1
        return self.n_centers

    @property
    def centers(self) -> np.ndarray:
        if self.variant != KERNEL:
            raise BasisError("only kernel bases have centers")
        return 2 * np.pi * np.arange(self.n_centers) / self.n_centers

    def with_hyperparameters(self, signal_variance: float, length_scale: float):
        return BasisDescriptor.kernel(self.n_centers, signal_variance, length_scale)

    def to_dict(self) -> dict:
        if self.variant == FOURIER:
            return {"variant": FOURIER, "harmonics": list(self.harmonics)}
        return {"variant": KERNEL, "n_centers": self.n_centers,
                "signal_variance": self.signal_variance, "length_scale": self.length_scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "BasisDescriptor":
        doc = dict(doc)
        variant = doc.pop("variant", None)
        allowed = {FOURIER: {"harmonics"},
                   KERNEL: {"n_centers", "signal_variance", "length_scale"}}.get(variant)
        if allowed is None:
            raise BasisError(f"unknown basis variant {variant!r}")
        extra = set(doc) - allowed
        if extra:
            raise BasisError(f"unknown basis keys: {sorted(extra)}")
        if variant == FOURIER:
            return cls.fourier(doc.get("harmonics", ()))
        return cls.kernel(**doc)


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean white Gaussian noise with per-channel variance ``variance`` (V^2)."""

    variance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.variance >= 0:
            raise ValueError(f"noise variance must be >= 0, got {self.variance}")

    def sample(self, n: int) -> np.ndarray:
        """Draw an ``(n, 3)`` noise block, one independent stream per channel."""
        out = np.zeros((n, 3))
        if self.variance == 0.0:
            return out
        std = np.sqrt(self.variance)
        for ch in range(3):
            # fixed per-channel offsets on the master seed
            rng = np.random.default_rng([int(self.seed), ch])
            out[:, ch] = std * rng.standard_normal(n)
        return out


def fourier_basis(y0, harmonics) -> np.ndarray:
    """Fourier basis row(s). Scalar ``y0`` gives shape ``(m,)``, arrays ``(..., m)``."""
    h = np.asarray(harmonics, dtype=float)
    if h.size == 0 or np.any(h <= 0):
        raise BasisError("harmonics must be strictly positive")
    y = np.asarray(y0, dtype=float)
    arg = y[..., None] * h
    out = np.empty(y.shape + (2 * h.size + 1,))
    out[..., 0] = 1.0
    out[..., 1::2] = np.sin(arg)
    out[..., 2::2] = np.cos(arg)
    return out


def kernel_basis(y0, desc: BasisDescriptor) -> np.ndarray:
    if desc.variant != KERNEL:
        raise BasisError("kernel_basis requires a kernel descriptor")
    y = np.asarray(y0, dtype=float)[..., None]
    c = desc.centers
    dist2 = (np.sin(y) - np.sin(c)) ** 2 + (np.cos(y) - np.cos(c)) ** 2
    return desc.signal_variance * np.exp(-dist2 / (2 * desc.length_scale ** 2))


def basis_row(y0, desc: BasisDescriptor) -> np.ndarray:
    if desc.variant == FOURIER:
        return fourier_basis(y0, desc.harmonics)
    return kernel_basis(y0, desc)


def regressor_psi(y0: float, desc: BasisDescriptor) -> np.ndarray:
    """``I_3 kron beta(y0)``, a 3 x 3m matrix."""
    beta = basis_row(float(y0), desc)
    return np.kron(np.eye(3), beta[None, :])


@dataclass(frozen=True)
class FluxModel:
    """Flux model ``g_theta``; ``theta`` is ordered channel by channel."""

    basis: BasisDescriptor
    theta: np.ndarray
    n_m: int

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).ravel()
        if theta.size != 3 * self.basis.dim:
            raise BasisError(f"theta must have {3 * self.basis.dim} entries, got {theta.size}")
        if int(self.n_m) < 1:
            raise BasisError("pole-pair count must be a positive integer")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "n_m", int(self.n_m))

    @property
    def coefficients(self) -> np.ndarray:
        """``theta`` as a (3, m) array, one row per Hall channel."""
        return self.theta.reshape(3, self.basis.dim)

    def __call__(self, y0) -> np.ndarray:
        return eval_flux(self, y0)

    def to_dict(self) -> dict:
        return {"basis": self.basis.to_dict(), "theta": self.theta.tolist(), "n_m": self.n_m}

    @classmethod
    def from_dict(cls, doc: dict) -> "FluxModel":
        extra = set(doc) - {"basis", "theta", "n_m"}
        if extra:
            raise BasisError(f"unknown flux model keys: {sorted(extra)}")
        return cls(BasisDescriptor.from_dict(doc["basis"]), doc["theta"], doc["n_m"])


def eval_flux(model: FluxModel, y0) -> np.ndarray:
    """Hall voltages at angle(s) ``y0``; shape ``(3,)`` or ``(..., 3)``."""
    return basis_row(y0, model.basis) @ model.coefficients.T


def pure_sinusoids(y0, n_m: int, amplitude: float = 1.0) -> np.ndarray:
    """Three 120-degree shifted cosines of the electrical angle ``n_m * y0``."""
    y = np.asarray(y0, dtype=float)[..., None]
    shifts = 2 * np.pi * np.arange(3) / 3
    return amplitude * np.cos(n_m * y - shifts)


def initial_theta(desc: BasisDescriptor, n_m: int, amplitude: float = 1.0,
                  ridge: float = 1e-8) -> np.ndarray:
    """Parameters reproducing ideal 120-degree shifted sinusoids.

    Exact for a Fourier basis containing harmonic ``n_m``. For the kernel
    basis the sinusoids are fitted by ridge-regularized least squares on a
    grid four times denser than the centers (regularization
    ``ridge * signal_variance``).
    """
    m = desc.dim
    if desc.variant == FOURIER:
        if n_m not in desc.harmonics:
            raise BasisError(f"Fourier basis lacks harmonic n_m={n_m}")
        i = desc.harmonics.index(n_m)
        theta = np.zeros((3, m))
        # A cos(n y - s) = A sin(s) sin(n y) + A cos(s) cos(n y); exact values
        # keep the three channels symmetric to the last bit
        theta[:, 1 + 2 * i] = amplitude * np.array([0.0, np.sqrt(3.0) / 2, -np.sqrt(3.0) / 2])
        theta[:, 2 + 2 * i] = amplitude * np.array([1.0, -0.5, -0.5])
        return theta.ravel()
    if amplitude == 0:
        return np.zeros(3 * m)
    grid = 2 * np.pi * np.arange(4 * m) / (4 * m)
    Phi = kernel_basis(grid, desc)
    target = pure_sinusoids(grid, n_m, amplitude)
    lam = ridge * desc.signal_variance
    lhs = Phi.T @ Phi + lam * np.eye(m)
    theta = np.linalg.solve(lhs, Phi.T @ target)
    return theta.T.ravel()


def make_ground_truth(desc: BasisDescriptor, n_m: int, perturbation: float, seed: int,
                      amplitude: float = 1.0, sub_harmonic_weight: float = 0.1) -> FluxModel:
    """Seeded 'imperfect magnets' flux map used as simulation truth.

    Starting from the ideal sinusoids, every Fourier coefficient receives an
    independent Gaussian perturbation of standard deviation
    ``perturbation * amplitude``. Coefficients of harmonics below or above
    ``n_m`` are weighted by ``sub_harmonic_weight`` so the per-magnet
    variations stay slight compared to offset and pitch-harmonic errors.
    The common phase of the pitch harmonic is kept at its nominal value.
    """
    if not 0 <= perturbation <= 0.5:
        raise ValueError(f"perturbation must lie in [0, 0.5], got {perturbation}")
    if desc.variant != FOURIER:
        raise BasisError("ground truth is generated in a Fourier basis")
    theta0 = initial_theta(desc, n_m, amplitude).reshape(3, desc.dim)
    if perturbation == 0:
        return FluxModel(desc, theta0.ravel(), n_m)
    weights = np.ones(desc.dim)
    for i, h in enumerate(desc.harmonics):
        if h != n_m:
            weights[1 + 2 * i: 3 + 2 * i] = sub_harmonic_weight
    rng = np.random.default_rng(seed)
    jitter = rng.standard_normal((3, desc.dim)) * weights
    theta = theta0 + perturbation * amplitude * jitter
    # A common phase shift of the pitch harmonic only moves the angular zero,
    # so remove it: the mean sensor phase defines y0 = 0.
    i = desc.harmonics.index(n_m) if n_m in desc.harmonics else None
    if i is not None:
        s_col, c_col = 1 + 2 * i, 2 + 2 * i
        radius = np.hypot(theta[:, s_col], theta[:, c_col])
        phase = np.arctan2(theta[:, s_col], theta[:, c_col])
        nominal = 2 * np.pi * np.arange(3) / 3
        dev = np.angle(np.exp(1j * (phase - nominal)))
        phase = phase - dev.mean()
        theta[:, s_col] = radius * np.sin(phase)
        theta[:, c_col] = radius * np.cos(phase)
    return FluxModel(desc, theta.ravel(), n_m)
