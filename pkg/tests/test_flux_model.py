import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hallcal.flux_model import (
    BasisDescriptor,
    BasisError,
    FluxModel,
    NoiseModel,
    eval_flux,
    fourier_basis,
    initial_theta,
    kernel_basis,
    make_ground_truth,
    pure_sinusoids,
    regressor_psi,
)
from hallcal.reconstruction import ReconstructionState, f_init

angles = st.floats(-50.0, 50.0, allow_nan=False)


def test_fourier_basis_values():
    assert np.array_equal(fourier_basis(0.0, [1]), [1.0, 0.0, 1.0])
    assert np.allclose(fourier_basis(np.pi / 2, [1, 2]), [1, 1, 0, 0, -1], atol=1e-15)


def test_fourier_basis_direct_evaluation():
    y = 0.3
    h = np.arange(1, 12)
    ref = [1.0]
    for k in h:
        ref += [np.sin(k * y), np.cos(k * y)]
    assert fourier_basis(y, h).shape == (23,)
    assert np.max(np.abs(fourier_basis(y, h) - ref)) <= 1e-15


def test_fourier_basis_rejects_nonpositive():
    with pytest.raises(BasisError):
        fourier_basis(0.0, [0, 1])


def test_kernel_basis_values():
    d = BasisDescriptor.kernel(8, signal_variance=2.5, length_scale=0.7)
    row = kernel_basis(d.centers[3], d)
    assert row[3] == pytest.approx(2.5, abs=1e-15)
    d1 = BasisDescriptor.kernel(2, 1.0, 1.0)  # centers 0 and pi
    assert kernel_basis(0.0, d1)[1] == pytest.approx(np.exp(-2.0), rel=1e-15)


@given(angles)
def test_kernel_basis_periodic(y):
    d = BasisDescriptor.kernel(16, 1.3, 0.4)
    assert np.allclose(kernel_basis(y, d), kernel_basis(y + 2 * np.pi, d), rtol=0, atol=1e-12)


def test_kernel_centers_equidistant():
    c = BasisDescriptor.kernel(10).centers
    assert c[0] == 0.0 and np.all(np.diff(c) > 0) and c[-1] < 2 * np.pi
    assert np.allclose(np.diff(c), 2 * np.pi / 10)


@pytest.mark.parametrize("bad", [dict(n_centers=0), dict(n_centers=4, signal_variance=0.0),
                                 dict(n_centers=4, length_scale=-1.0)])
def test_kernel_descriptor_validation(bad):
    with pytest.raises(BasisError):
        BasisDescriptor.kernel(**bad)


def test_regressor_psi_structure():
    d = BasisDescriptor.fourier([1])
    psi = regressor_psi(0.0, d)
    assert psi.shape == (3, 9)
    expected = np.zeros((3, 9))
    for h in range(3):
        expected[h, 3 * h:3 * h + 3] = [1.0, 0.0, 1.0]
    assert np.array_equal(psi, expected)


def test_regressor_psi_matches_loop(rng):
    d = BasisDescriptor.kernel(12, 1.0, 0.5)
    theta = rng.standard_normal(36)
    y = 1.234
    beta = kernel_basis(y, d)
    loop = np.array([beta @ theta[12 * h:12 * (h + 1)] for h in range(3)])
    psi = regressor_psi(y, d)
    assert np.max(np.abs(psi @ theta - loop)) <= 1e-15 * np.abs(loop).max() * 10
    assert np.count_nonzero(psi) == 3 * 12


def test_eval_flux_pure_cosines():
    d = BasisDescriptor.fourier([1])
    m = FluxModel(d, initial_theta(d, 1), 1)
    assert np.allclose(m(0.0), [1.0, -0.5, -0.5], atol=1e-15)


@given(angles, st.integers(0, 1000))
@settings(max_examples=50)
def test_eval_flux_periodic_and_linear(y, seed):
    rng = np.random.default_rng(seed)
    d = BasisDescriptor.fourier([1, 2, 5])
    t1, t2 = rng.standard_normal((2, 21))
    a, b = rng.standard_normal(2)
    m1, m2 = FluxModel(d, t1, 1), FluxModel(d, t2, 1)
    assert np.allclose(m1(y), m1(y + 2 * np.pi), rtol=0, atol=1e-12)
    mix = FluxModel(d, a * t1 + b * t2, 1)
    assert np.allclose(mix(y), a * m1(y) + b * m2(y), rtol=0, atol=1e-12)


def test_eval_flux_matches_matrix_product(truth):
    y = np.linspace(0, 2 * np.pi, 500)
    ref = np.stack([regressor_psi(v, truth.basis) @ truth.theta for v in y])
    assert np.max(np.abs(eval_flux(truth, y) - ref)) < 1e-13


def test_initial_theta_fourier_support():
    d = BasisDescriptor.fourier(range(1, 12))
    th = initial_theta(d, 11).reshape(3, 23)
    # only the harmonic-11 sin/cos slots may be nonzero; channel 1 has no sine part
    support = np.zeros((3, 23), bool)
    support[:, 21:23] = True
    assert np.all(th[~support] == 0.0)
    assert np.count_nonzero(th) == 5
    y = np.linspace(-3, 3, 1001)
    m = FluxModel(d, th.ravel(), 11)
    assert np.max(np.abs(m(y) - pure_sinusoids(y, 11))) < 1e-9


def test_initial_theta_requires_pitch_harmonic():
    with pytest.raises(BasisError):
        initial_theta(BasisDescriptor.fourier([1, 2, 3]), 11)


def test_initial_theta_zero_amplitude():
    for d in (BasisDescriptor.fourier([11]), BasisDescriptor.kernel(64, 1.0, 0.15)):
        assert np.all(initial_theta(d, 11, 0.0) == 0.0)


def test_initial_theta_kernel_accuracy():
    d = BasisDescriptor.kernel(64, 1.0, 0.15)
    m = FluxModel(d, initial_theta(d, 11, 2.0), 11)
    y = np.linspace(0, 2 * np.pi, 20000)
    assert np.max(np.abs(m(y) - pure_sinusoids(y, 11, 2.0))) < 1e-3 * 2.0


def test_initial_theta_reconstructs_angle():
    d = BasisDescriptor.fourier(range(1, 12))
    m = FluxModel(d, initial_theta(d, 11), 11)
    ys = np.linspace(-np.pi / 11 * 0.999, np.pi / 11 * 0.999, 301)
    err = [abs(f_init(m(y), ReconstructionState(0.0), 11) - y) for y in ys]
    assert max(err) < 1e-9


def test_ground_truth_determinism_and_zero_perturbation(fourier11):
    a = make_ground_truth(fourier11, 11, 0.1, 7)
    b = make_ground_truth(fourier11, 11, 0.1, 7)
    assert np.array_equal(a.theta, b.theta)
    z = make_ground_truth(fourier11, 11, 0.0, 7)
    assert np.array_equal(z.theta, initial_theta(fourier11, 11))


def test_ground_truth_breaks_pole_pair_symmetry(fourier11):
    g = make_ground_truth(fourier11, 11, 0.1, 3)
    y = np.linspace(0, 2 * np.pi, 10_000, endpoint=False)
    diff = np.linalg.norm(g(y) - g(y + 2 * np.pi / 11), axis=1)
    assert diff.max() > 0
    assert np.allclose(g(y), g(y + 2 * np.pi), atol=1e-12)


def test_ground_truth_rejects_large_perturbation(fourier11):
    with pytest.raises(ValueError):
        make_ground_truth(fourier11, 11, 0.6, 0)


def test_noise_model_statistics():
    n = NoiseModel(7.5e-6, 5).sample(200_000)
    assert np.allclose(n.var(axis=0), 7.5e-6, rtol=0.05)
    c = np.corrcoef(n.T)
    assert np.max(np.abs(c[np.triu_indices(3, 1)])) < 0.02
    assert np.array_equal(n, NoiseModel(7.5e-6, 5).sample(200_000))
    assert np.all(NoiseModel(0.0, 5).sample(10) == 0.0)


def test_serialization_roundtrip(truth):
    back = FluxModel.from_dict(truth.to_dict())
    assert np.array_equal(back.theta, truth.theta) and back.basis == truth.basis
    k = BasisDescriptor.kernel(5, 2.0, 0.3)
    assert BasisDescriptor.from_dict(k.to_dict()) == k
    with pytest.raises(BasisError):
        BasisDescriptor.from_dict({"variant": "fourier", "harmonics": [1], "extra": 1})


def test_theta_length_checked():
    with pytest.raises(BasisError):
        FluxModel(BasisDescriptor.fourier([1]), np.zeros(8), 1)
