import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import dlsim

from hallcal.flux_model import BasisDescriptor, FluxModel, NoiseModel, initial_theta
from hallcal.lti import DiscreteTransferFunction, tf_to_ss
from hallcal.metrics import compute_cumulative_psd
from hallcal.simulation import (
    Dataset,
    Multisine,
    Ramp,
    SimulationConfig,
    SimulationDivergence,
    generate_multisine,
    generate_ramp,
    load_dataset,
    multisine_phases,
    read_csv,
    replay_open_loop,
    save_dataset,
    simulate_model,
    simulate_truth,
    write_csv,
)

from conftest import FS, NOISE_VAR, N_M, controller_tf, plant_tf

PURE = BasisDescriptor.fourier([N_M])


def pure_truth():
    return FluxModel(PURE, initial_theta(PURE, N_M), N_M)


def ramp(duration=26.0, end=13.0):
    return Ramp(0.0, end, duration, FS)


def config(truth, reference, var=0.0, seed=1, disturbance=0.0):
    return SimulationConfig(plant_tf(), controller_tf(), truth, NoiseModel(var, seed),
                            reference, disturbance)


def linear_loop_output(plant_d, r):
    """Response of the linear loop (y = y0) from its closed-loop state matrices."""
    c = tf_to_ss(controller_tf())
    n, nc = plant_d.n_states, c.n_states
    A = np.zeros((n + nc, n + nc))
    A[:n, :n] = plant_d.A - c.D * plant_d.B @ plant_d.C
    A[:n, n:] = plant_d.B @ c.C
    A[n:, :n] = -c.B @ plant_d.C
    A[n:, n:] = c.A
    B = np.vstack([c.D * plant_d.B, c.B])
    C = np.hstack([plant_d.C, np.zeros((1, nc))])
    _, y, _ = dlsim((A, B, C, np.zeros((1, 1)), plant_d.sample_time), r)
    return y[:, 0]


# -- references -----------------------------------------------------------------

def test_ramp_study_values():
    r = generate_ramp(ramp())
    assert r.size == 104001 and r[-1] == pytest.approx(13.0, abs=1e-12)
    assert np.allclose(np.diff(r), 13.0 / 26.0 / FS, rtol=1e-9)
    assert np.all(generate_ramp(Ramp(0.0, 0.0, 1.0, FS)) == 0.0)
    with pytest.raises(ValueError):
        Ramp(0.0, 1.0, 0.0, FS)


def test_multisine_single_line():
    ms = Multisine((5.0,), 1.0, 3, 2, 1000.0)
    x = generate_multisine(ms)
    t = np.arange(x.size) / 1000.0
    phase = multisine_phases(ms)[0]
    assert np.allclose(x, np.cos(2 * np.pi * 5.0 * t + phase), atol=1e-12)
    assert ms.period_samples == 200
    assert np.array_equal(x, generate_multisine(Multisine((5.0,), 1.0, 3, 2, 1000.0)))


def test_multisine_nyquist_rejected():
    with pytest.raises(ValueError):
        Multisine((500.0,), 1.0, 0, 1, 1000.0)


def test_multisine_crest_factor_monte_carlo():
    freqs = tuple(np.arange(1, 32) * 1.0)
    for seed in range(20):
        x = generate_multisine(Multisine(freqs, 1.0, seed, 1, 1000.0))
        crest = np.max(np.abs(x)) / np.sqrt(np.mean(x ** 2))
        assert 1.4 <= crest <= 4.5


# -- truth simulator ------------------------------------------------------------

def test_pure_truth_tracks_with_constant_velocity_lag(plant_d):
    ds = simulate_truth(config(pure_truth(), ramp()))
    assert np.max(np.abs(ds.y - ds.y0)) < 1e-9
    # type-1 loop: constant ramp error v / Kv with Kv = C(1) * K / b
    c = controller_tf()
    c1 = np.polyval(np.polydiv(c.num, [1.0, -1.0])[0], 1.0) / \
        np.polyval(np.polydiv(c.den, [1.0, -1.0])[0], 1.0)
    kv = c1 * 1.663e5 / 2702.0
    e_ss = 0.5 / kv
    assert np.mean(ds.r[-4000:] - ds.y[-4000:]) == pytest.approx(e_ss, rel=1e-6)
    assert np.allclose(ds.y, linear_loop_output(plant_d, ds.r), atol=1e-9)


def test_perturbed_truth_error_is_periodic_at_pole_pairs(truth):
    ds = simulate_truth(config(truth, ramp(), NOISE_VAR))
    e = ds.y - ds.y0
    psd = compute_cumulative_psd(e[1:], ds.y0[1:])
    inc = np.diff(np.concatenate([[0.0], psd.cumulative]))
    inc[0] = 0.0  # ignore the mean offset
    assert abs(psd.frequency[np.argmax(inc)] - N_M) <= 0.5


def test_disturbance_rejection():
    td = 0.02
    ref = Ramp(0.0, 0.0, 10.0, FS)
    ds = simulate_truth(config(pure_truth(), ref, disturbance=td))
    tail = ds.T[-len(ds) // 10:]
    assert np.mean(tail) == pytest.approx(-td, rel=0.01)


def test_noise_statistics(truth):
    ds = simulate_truth(config(truth, ramp(), NOISE_VAR, seed=4))
    v = ds.d - truth(ds.y0)
    assert np.allclose(v.var(axis=0), NOISE_VAR, rtol=0.05)
    c = np.corrcoef(v.T)
    assert np.max(np.abs(c[np.triu_indices(3, 1)])) < 0.02


def test_determinism(truth):
    a = simulate_truth(config(truth, ramp(5.0, 2.5), NOISE_VAR))
    b = simulate_truth(config(truth, ramp(5.0, 2.5), NOISE_VAR))
    for name in ("d", "y", "T", "r", "y0"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_divergence_reported():
    hot = DiscreteTransferFunction([500.0], [1.0], 1 / FS)
    cfg = SimulationConfig(plant_tf(), hot, pure_truth(), NoiseModel(), ramp(2.0, 1.0))
    with pytest.raises(SimulationDivergence) as exc:
        simulate_truth(cfg)
    assert exc.value.index > 0


def test_sample_rate_mismatch_rejected():
    with pytest.raises(ValueError):
        SimulationConfig(plant_tf(), controller_tf(1000.0), pure_truth(), NoiseModel(), ramp())


# -- model simulator ------------------------------------------------------------

def test_cross_simulator_identity(truth, plant_d, controller_ss):
    ds = simulate_truth(config(truth, ramp()))
    d_sim, y_sim = simulate_model(truth.theta, plant_d, controller_ss, ds.r, truth.basis, N_M)
    assert len(ds) >= 10_000
    assert np.max(np.abs(d_sim - ds.d)) <= 1e-9
    assert np.max(np.abs(y_sim - ds.y)) <= 1e-9


def test_model_zero_reference(plant_d, controller_ss):
    d, y = simulate_model(initial_theta(PURE, N_M), plant_d, controller_ss, np.zeros(500),
                          PURE, N_M)
    assert np.all(y == 0.0)
    assert np.allclose(d, np.tile([1.0, -0.5, -0.5], (500, 1)), atol=1e-15)


def test_model_pure_sinusoids_follow_linear_loop(plant_d, controller_ss):
    r = generate_ramp(ramp(4.0, 2.0))
    d, y = simulate_model(initial_theta(PURE, N_M), plant_d, controller_ss, r, PURE, N_M)
    y_lin = linear_loop_output(plant_d, r)
    assert np.allclose(y, y_lin, atol=1e-9)
    shifts = 2 * np.pi * np.arange(3) / 3
    assert np.allclose(d, np.cos(N_M * y_lin[:, None] - shifts), atol=1e-8)


def test_replay_open_loop_matches_plant(plant_d):
    rng = np.random.default_rng(0)
    u = 1e-3 * rng.standard_normal(2000)
    y0, y = replay_open_loop(initial_theta(PURE, N_M), plant_d, u, PURE, N_M)
    assert np.allclose(y0, plant_d.simulate(u), atol=1e-14)
    assert np.allclose(y, y0, atol=1e-9)


# -- persistence ----------------------------------------------------------------

def test_csv_roundtrip_lossless(tmp_path, truth):
    ds = simulate_truth(config(truth, ramp(1.0, 0.5), NOISE_VAR))
    p = save_dataset(ds, tmp_path / "a.csv")
    back = load_dataset(p)
    for name in ("t", "d", "y", "T", "r", "y0"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert back.meta == ds.meta
    save_dataset(back, tmp_path / "b.csv")
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    assert read_csv(p)[0] == ["t", "d1", "d2", "d3", "y", "T", "r", "y0"]
    assert load_dataset(save_dataset(ds.without_truth(), tmp_path / "c.csv")).y0 is None


@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_float_text_roundtrip(values, tmp_path_factory):
    p = tmp_path_factory.mktemp("csv") / "x.csv"
    write_csv(p, ["x"], np.array(values)[:, None])
    assert np.array_equal(read_csv(p)[1][:, 0], np.array(values))


def test_dataset_column_validation():
    with pytest.raises(ValueError):
        Dataset(np.arange(3.0), np.zeros((3, 3)), np.zeros(2), np.zeros(3), np.zeros(3))
