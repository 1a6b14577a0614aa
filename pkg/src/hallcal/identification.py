"""Calibration pipeline: BLA estimation, scale correction, SEM fit, correction table."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .flux_model import KERNEL, BasisDescriptor, FluxModel, initial_theta
from .lti import DiscreteStateSpace, DiscreteTransferFunction, tf_to_ss
from .reconstruction import (
    BijectivityReport,
    CorrectionTable,
    build_lut,
    check_bijective,
    clarke,
)
from .simulation import (
    Dataset,
    SimulationDivergence,
    replay_open_loop,
    run_loop,
    simulate_model,
)

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi


class IdentificationError(RuntimeError):
    pass


class ScaleSearchError(IdentificationError):
    def __init__(self, message, scan=None):
        super().__init__(message)
        self.scan = scan


# -- best linear approximation ----------------------------------------------------

@dataclass(frozen=True)
class BlaEstimate:
    model: DiscreteStateSpace
    transfer_function: DiscreteTransferFunction
    frequencies: np.ndarray
    frf: np.ndarray
    frf_variance: np.ndarray
    scale_corrected: bool = False
    scale: float = 1.0

    def corrected(self, c_hat: float) -> "BlaEstimate":
        """The BLA divided by ``c_hat``."""
        tf = self.transfer_function
        return replace(
            self,
            model=self.model.with_input_scale(1.0 / c_hat),
            transfer_function=DiscreteTransferFunction(tf.num / c_hat, tf.den, tf.sample_time),
            frf=self.frf / c_hat,
            frf_variance=self.frf_variance / c_hat ** 2,
            scale_corrected=True,
            scale=self.scale * c_hat,
        )

    def to_dict(self) -> dict:
        from .lti import model_to_dict
        return {
            "transfer_function": model_to_dict(self.transfer_function),
            "scale_corrected": self.scale_corrected,
            "scale": self.scale,
        }


def excited_spectra(ds: Dataset, transient_periods: int = 1):
    """Period-averaged DFT of ``y``, ``T`` and ``r`` at the excited bins of one realization."""
    meta = ds.meta
    try:
        n_p = int(meta["period_samples"])
        freqs = np.asarray(meta["frequencies"], dtype=float)
    except KeyError as exc:
        raise IdentificationError(f"dataset lacks multisine metadata {exc}") from None
    n = len(ds)
    if n % n_p:
        raise IdentificationError(f"record length {n} is not an integer number of "
                                  f"periods of {n_p} samples")
    periods = n // n_p
    if periods <= transient_periods:
        raise IdentificationError(f"need more than {transient_periods} period(s), got {periods}")
    fs = 1.0 / ds.sample_time
    bins = np.rint(freqs * n_p / fs).astype(int)
    if np.any(np.abs(bins - freqs * n_p / fs) > 1e-6):
        raise IdentificationError("excited frequencies do not fall on DFT bins")

    def spec(x):
        blocks = x[transient_periods * n_p:].reshape(-1, n_p)
        return np.fft.rfft(blocks, axis=1)[:, bins].mean(axis=0)

    return freqs, spec(ds.y), spec(ds.T), spec(ds.r)


def _sk_fit(freqs, frf, weights, Ts, na, nb, nk, integrator, max_iter=200, tol=1e-10):
    """Sanathanan-Koerner iterations for ``z^-nk B(z^-1) / ((1 - z^-1)^i A(z^-1))``."""
    zi = np.exp(-2j * np.pi * freqs * Ts)  # z^-1 on the unit circle
    integ = (1 - zi) if integrator else np.ones_like(zi)
    Gi = frf * integ
    cols = [zi ** (nk + j) for j in range(nb)] + [-Gi * zi ** (j + 1) for j in range(na)]
    base = np.column_stack(cols)
    denom_prev = np.ones_like(zi)
    params = None
    for it in range(max_iter):
        w = np.sqrt(weights) / np.abs(denom_prev * integ)
        M = base * w[:, None]
        rhs = Gi * w
        A = np.vstack([M.real, M.imag])
        b = np.concatenate([rhs.real, rhs.imag])
        scale = np.linalg.norm(A, axis=0)
        scale[scale == 0] = 1.0
        sol, *_ = np.linalg.lstsq(A / scale, b, rcond=None)
        sol = sol / scale
        a = sol[nb:]
        denom_prev = 1 + sum(a[j] * zi ** (j + 1) for j in range(na))
        if params is not None and np.max(np.abs(sol - params)) <= tol * max(1.0, np.max(np.abs(sol))):
            return sol[:nb], a, it + 1
        params = sol
    raise IdentificationError(f"BLA fit did not converge in {max_iter} iterations")


def fit_bla(freqs, frf, variance, Ts: float, na: int = 2, nb: int = 4, nk: int = 1,
            integrator: bool = True) -> DiscreteTransferFunction:
    """Rational fit of a measured FRF.

    Bins are weighted by the inverse FRF variance, floored at a relative
    accuracy of 1e-6 so noise-free data falls back to relative weighting.
    """
    frf = np.asarray(frf, dtype=complex)
    variance = np.asarray(variance, dtype=float)
    weights = 1.0 / np.maximum(variance, (1e-6 * np.abs(frf)) ** 2)
    b, a, _ = _sk_fit(np.asarray(freqs, float), frf, weights, Ts, na, nb, nk, integrator)
    den = np.concatenate([[1.0], a])
    if integrator:
        den = np.convolve(den, [1.0, -1.0])
    num = np.concatenate([np.zeros(nk), b])
    n = max(den.size, num.size)
    den_q = np.concatenate([den, np.zeros(n - den.size)])
    num_q = np.concatenate([num, np.zeros(n - num.size)])
    return DiscreteTransferFunction(num_q, den_q, Ts)


def estimate_bla(experiments, na: int = 2, nb: int = 4, nk: int = 1, integrator: bool = True,
                 transient_periods: int = 1) -> BlaEstimate:
    """Indirect closed-loop BLA from several random-phase multisine realizations.

    Per realization the FRF is ``(Y/R) / (T/R)`` on the excited bins; the
    realizations are averaged and their spread gives the variance of the mean.
    """
    experiments = list(experiments)
    if len(experiments) < 2:
        raise IdentificationError("need at least two multisine realizations")
    Ts = experiments[0].sample_time
    freqs = None
    G = []
    for ds in experiments:
        f, Y, T, R = excited_spectra(ds, transient_periods)
        if freqs is None:
            freqs = f
        elif f.shape != freqs.shape or np.any(f != freqs):
            raise IdentificationError("realizations excite different frequency grids")
        if abs(ds.sample_time - Ts) > 1e-12 * Ts:
            raise IdentificationError("realizations have different sample times")
        G.append((Y / R) / (T / R))
    G = np.array(G)
    frf = G.mean(axis=0)
    var = np.sum(np.abs(G - frf) ** 2, axis=0) / (len(G) - 1) / len(G)
    tf = fit_bla(freqs, frf, var, Ts, na, nb, nk, integrator)
    return BlaEstimate(tf_to_ss(tf), tf, freqs, frf, var)


def bla_from_model(model: DiscreteStateSpace, tf: DiscreteTransferFunction | None = None
                   ) -> BlaEstimate:
    """Wrap a known discrete model (e.g. the exact plant) as a BLA estimate."""
    if tf is None:
        tf = DiscreteTransferFunction([model.D], [1.0], model.sample_time) if not model.n_states \
            else _ss_to_tf(model)
    empty = np.zeros(0)
    return BlaEstimate(model, tf, empty, empty.astype(complex), empty)


def _ss_to_tf(model: DiscreteStateSpace) -> DiscreteTransferFunction:
    import scipy.signal
    num, den = scipy.signal.ss2tf(model.A, model.B, model.C, np.array([[model.D]]))
    return DiscreteTransferFunction(num[0], den, model.sample_time)


# -- scale estimate ---------------------------------------------------------------

def last_full_rotation(y) -> int:
    """Index of the sample at or just before the last crossing of ``2 pi n`` (n >= 1)."""
    y = np.asarray(y, dtype=float)
    turns = np.floor(y / TWO_PI)
    step = np.flatnonzero(turns[1:] != turns[:-1])
    # a crossing between k and k+1 passes the multiple max(turns[k], turns[k+1]) * 2 pi
    level = np.maximum(turns[step], turns[step + 1])
    valid = step[level >= 1]
    if valid.size == 0:
        raise IdentificationError("data contains no full rotation (max y < 2 pi)")
    return int(valid[-1])


@dataclass(frozen=True)
class ScaleScan:
    candidates: np.ndarray
    costs: np.ndarray

    def describe(self) -> str:
        i = int(np.argmin(self.costs))
        return (f"scan over c in [{self.candidates[0]:.3g}, {self.candidates[-1]:.3g}] "
                f"({self.candidates.size} points): minimum {self.costs[i]:.3g} at "
                f"c={self.candidates[i]:.4g}")


def scale_cost(c: float, bla: DiscreteStateSpace, dataset: Dataset, theta0,
               basis: BasisDescriptor, n_m: int, p: int, mode: str = "replay",
               controller: DiscreteStateSpace | None = None, r=None) -> float:
    """Squared position mismatch at the data's last full rotation for candidate ``c``."""
    model = bla.with_input_scale(1.0 / c)
    if mode not in ("replay", "closed_loop"):
        raise ValueError(f"unknown scale mode {mode!r}")
    try:
        if mode == "replay":
            _, y_sim = replay_open_loop(theta0, model, dataset.T[:p + 1], basis, n_m)
        else:
            r = dataset.r if r is None else r
            _, y_sim = simulate_model(theta0, model, controller, np.asarray(r)[:p + 1],
                                      basis, n_m)
    except SimulationDivergence:
        return float("inf")  # high loop gain candidates can destabilise the loop
    return float((y_sim[p] - dataset.y[p]) ** 2)


def estimate_scale(bla, dataset: Dataset, theta0, basis: BasisDescriptor, n_m: int,
                   controller: DiscreteStateSpace | None = None, r=None, *,
                   mode: str = "replay", bracket=(0.1, 10.0), n_scan: int = 50,
                   xtol: float = 1e-8) -> float:
    """Estimate the unknown BLA gain ``c`` such that ``bla / c`` matches the data.

    The anchor is the last sample before the reconstructed angle completes
    its final full rotation. The simulated model output at that sample is
    compared with the logged angle. ``mode="replay"`` drives the model with
    the logged torque; ``"closed_loop"`` closes the loop with ``controller``.
    The minimum is located by a logarithmic scan over ``bracket`` followed
    by golden-section refinement.
    """
    model = bla.model if isinstance(bla, BlaEstimate) else bla
    if mode == "closed_loop" and controller is None:
        raise ValueError("closed_loop mode needs the controller")
    p = last_full_rotation(dataset.y)
    args = (model, dataset, theta0, basis, n_m, p, mode, controller, r)
    cands = np.geomspace(bracket[0], bracket[1], n_scan)
    costs = np.array([scale_cost(c, *args) for c in cands])
    scan = ScaleScan(cands, costs)
    i = int(np.argmin(costs))
    if i == 0 or i == n_scan - 1:
        raise ScaleSearchError(f"scale search not bracketed: {scan.describe()}", scan)
    # golden section on log c keeps the bracket symmetric in ratio
    res = scipy.optimize.minimize_scalar(
        lambda lc: scale_cost(np.exp(lc), *args), method="golden",
        bracket=(np.log(cands[i - 1]), np.log(cands[i]), np.log(cands[i + 1])),
        options={"xtol": xtol})
    c_hat = float(np.exp(res.x))
    log.info("scale estimate c_hat=%.6g (%s)", c_hat, scan.describe())
    return c_hat


# -- simulation error minimization --------------------------------------------------

@dataclass(frozen=True)
class SemSettings:
    max_iterations: int = 30
    tolerance: float = 1e-9
    gradient_tolerance: float = 1e-12
    fd_step: float = 1e-6
    learn_hyperparameters: bool = True
    max_line_search: int = 12
    # Stop once an accepted step lowers J by less than this many residual
    # variances: fitting pure noise along one direction lowers J by a
    # sigma^2 chi-square(1) amount, whose 95% quantile is 3.84. 0 disables.
    noise_significance: float = 3.84


@dataclass(frozen=True)
class SemProblem:
    d: np.ndarray
    r: np.ndarray
    bla: DiscreteStateSpace
    controller: DiscreteStateSpace
    basis: BasisDescriptor
    n_m: int
    theta0: np.ndarray
    settings: SemSettings = SemSettings()

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] != np.size(self.r):
            raise ValueError("d must be (N, 3) with N equal to the reference length")
        if abs(self.bla.sample_time - self.controller.sample_time) > 1e-12 * self.bla.sample_time:
            raise ValueError("BLA and controller sample times differ")

    @classmethod
    def from_dataset(cls, ds: Dataset, bla, controller, basis, n_m, theta0,
                     settings: SemSettings = SemSettings()):
        model = bla.model if isinstance(bla, BlaEstimate) else bla
        if abs(ds.sample_time - model.sample_time) > 1e-9 * model.sample_time:
            raise ValueError(f"dataset sample time {ds.sample_time} differs from model "
                             f"sample time {model.sample_time}")
        return cls(ds.d, ds.r, model, controller, basis, n_m, np.asarray(theta0, float),
                   settings)

    @property
    def learns_hyperparameters(self) -> bool:
        return self.basis.variant == KERNEL and self.settings.learn_hyperparameters

    def pack(self, theta, basis=None) -> np.ndarray:
        basis = self.basis if basis is None else basis
        theta = np.asarray(theta, dtype=float)
        if self.learns_hyperparameters:
            return np.concatenate([theta, [0.5 * np.log(basis.signal_variance),
                                           np.log(basis.length_scale)]])
        return theta.copy()

    def unpack(self, x):
        """Parameter vector -> ``(theta, basis)``."""
        x = np.asarray(x, dtype=float)
        if self.learns_hyperparameters:
            sf, ell = np.exp(x[-2]), np.exp(x[-1])
            return x[:-2], self.basis.with_hyperparameters(sf ** 2, ell)
        return x, self.basis


def _simulate_flat(x, problem: SemProblem) -> np.ndarray:
    theta, basis = problem.unpack(x)
    d_sim, _ = simulate_model(theta, problem.bla, problem.controller, problem.r, basis,
                              problem.n_m)
    return d_sim


def sem_residual(x, problem: SemProblem) -> np.ndarray:
    return (problem.d - _simulate_flat(x, problem)).ravel()


def sem_cost(theta, problem: SemProblem) -> float:
    """Sum of squared Hall-voltage simulation errors; ``inf`` if the simulation diverges."""
    try:
        res = sem_residual(theta, problem)
    except SimulationDivergence as exc:
        log.debug("SEM cost: %s", exc)
        return float("inf")
    return float(res @ res)


def fd_steps(x, base: float = 1e-6) -> np.ndarray:
    return np.maximum(base, base * np.abs(x))


def fd_jacobian(x, problem: SemProblem, residual0=None) -> np.ndarray:
    """Central-difference Jacobian of the residual vector, shape (3N, n_params)."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x, problem.settings.fd_step)
    n_res = problem.d.size
    jac = np.empty((n_res, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        # residual = d - d_sim, so its derivative is -(d_sim' )
        jac[:, i] = (_simulate_flat(xm, problem) - _simulate_flat(xp, problem)).ravel() / (2 * h[i])
    return jac


def fd_gradient(x, problem: SemProblem) -> np.ndarray:
    res = sem_residual(x, problem)
    return 2.0 * fd_jacobian(x, problem) .T @ res


@dataclass
class SemResult:
    x: np.ndarray
    theta: np.ndarray
    basis: BasisDescriptor
    cost_trace: list
    iterations: int
    converged: bool
    stalled: bool
    message: str

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1]


def solve_sem(problem: SemProblem, callback=None) -> SemResult:
    """Local minimization of the SEM cost.

    Gauss-Newton steps on the central-difference Jacobian, damped
    Levenberg-Marquardt style, with backtracking on the step length. Only
    iterates that lower the cost are accepted. Iteration stops when the
    relative decrease falls below ``tolerance`` or when the decrease is no
    longer significant against the residual variance, which keeps weakly
    identifiable directions from being tuned to the noise.
    """
    s = problem.settings
    x = problem.pack(problem.theta0)
    res = sem_residual(x, problem)
    cost = float(res @ res)
    trace = [cost]
    lam = 1e-6
    converged = stalled = False
    message = "maximum iterations reached"
    it = 0
    for it in range(1, s.max_iterations + 1):
        if cost == 0.0:
            converged, message, it = True, "zero cost", it - 1
            break
        jac = fd_jacobian(x, problem)
        grad = jac.T @ res  # half the cost gradient
        hess = jac.T @ jac
        if np.max(np.abs(grad)) <= s.gradient_tolerance * max(cost, 1e-300) ** 0.5 * \
                np.sqrt(np.max(np.diag(hess)) + 1e-300):
            converged, message, it = True, "gradient below tolerance", it - 1
            break
        diag = np.diag(hess).copy()
        diag[diag <= 0] = 1.0
        accepted = False
        for _ in range(6):
            try:
                step = np.linalg.solve(hess + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            slope = 2.0 * grad @ step
            alpha = 1.0
            for _ in range(s.max_line_search):
                x_try = x + alpha * step
                c_try = sem_cost(x_try, problem)
                if c_try < cost + 1e-4 * alpha * slope:
                    accepted = True
                    break
                alpha *= 0.5
            if accepted:
                break
            lam *= 10
        if not accepted:
            if it == 1:
                stalled = True
                message = "no descent direction found at the initial point"
            else:
                converged = True
                message = "no further descent possible"
            it -= 1
            break
        rel = (cost - c_try) / cost
        x = x_try
        res = sem_residual(x, problem)
        decrease = cost - float(res @ res)
        cost = float(res @ res)
        trace.append(cost)
        lam = max(lam / 10 if alpha == 1.0 else lam, 1e-12)
        log.info("SEM iteration %d: J=%.9g (rel. decrease %.3g, step %.3g)", it, cost, rel, alpha)
        if callback is not None:
            callback(it, x, cost)
        if rel < s.tolerance:
            converged, message = True, "relative cost decrease below tolerance"
            break
        if decrease < s.noise_significance * cost / res.size:
            # further progress would only fit the measurement noise
            converged, message = True, "cost decrease not significant against noise"
            break
    theta, basis = problem.unpack(x)
    return SemResult(x, theta, basis, trace, it, converged, stalled, message)


# -- full pipeline ------------------------------------------------------------------

@dataclass
class CalibrationResult:
    theta: np.ndarray
    basis: BasisDescriptor
    n_m: int
    table: CorrectionTable
    c_hat: float
    cost_trace: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def flux_model(self) -> FluxModel:
        return FluxModel(self.basis, self.theta, self.n_m)

    def to_dict(self) -> dict:
        return {
            "flux_model": self.flux_model.to_dict(),
            "c_hat": self.c_hat,
            "cost_trace": list(self.cost_trace),
            "diagnostics": self.diagnostics,
            "table": {"M": self.table.size},
        }


def estimate_amplitude(d) -> float:
    """Median magnitude of the Clarke components, a data-only amplitude guess."""
    dt = clarke(np.asarray(d, dtype=float))
    return float(np.median(np.hypot(dt[:, 0], dt[:, 1])))


def calibrate(dataset: Dataset, bla, controller: DiscreteStateSpace, basis: BasisDescriptor,
              n_m: int, *, lut_size: int = 2048, settings: SemSettings = SemSettings(),
              scale_mode: str = "replay", estimate_c: bool = True,
              callback=None) -> CalibrationResult:
    """Run the calibration on ramp data recorded with ``f_init`` in the loop.

    Never touches the hidden ``y0`` column.
    """
    ds = dataset.without_truth()
    bla_est = bla if isinstance(bla, BlaEstimate) else bla_from_model(bla)
    theta0 = initial_theta(basis, n_m, estimate_amplitude(ds.d))
    if estimate_c:
        c_hat = estimate_scale(bla_est, ds, theta0, basis, n_m, controller, ds.r,
                               mode=scale_mode)
        bla_est = bla_est.corrected(c_hat)
    else:
        c_hat = 1.0
    problem = SemProblem.from_dataset(ds, bla_est, controller, basis, n_m, theta0, settings)
    sem = solve_sem(problem, callback=callback)
    model = FluxModel(sem.basis, sem.theta, n_m)
    table = build_lut(model, lut_size, n_m)
    report: BijectivityReport = check_bijective(table)
    diagnostics = {
        "bijective": report.ok,
        "initial_cost": sem.cost_trace[0],
        "final_cost": sem.final_cost,
        "iterations": sem.iterations,
        "converged": sem.converged,
        "stalled": sem.stalled,
        "message": sem.message,
        "samples": len(ds),
    }
    return CalibrationResult(sem.theta, sem.basis, n_m, table, c_hat, sem.cost_trace,
                             diagnostics)


def run_bla_experiments(cfg_factory, realizations: int):
    """Run ``realizations`` multisine experiments; ``cfg_factory(i)`` builds each config."""
    from .simulation import simulate_truth
    return [simulate_truth(cfg_factory(i)) for i in range(realizations)]
