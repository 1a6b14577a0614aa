import numpy as np
import pytest

from hallcal.flux_model import BasisDescriptor, NoiseModel, make_ground_truth
from hallcal.lti import ContinuousTransferFunction, DiscreteTransferFunction, discretize_zoh, tf_to_ss

FS = 4000.0
N_M = 11
NOISE_VAR = 7.5e-6


def plant_tf():
    return ContinuousTransferFunction([1.663e5], [1.0, 632.6, 2702.0, 0.0], 1.2e-4)


def controller_tf(fs=FS):
    return DiscreteTransferFunction([2.94, -3.29, -2.10, 2.45],
                                    [1.0, -3.45, 4.52, -2.68, 0.61], 1.0 / fs)


@pytest.fixture(scope="session")
def plant():
    return plant_tf()


@pytest.fixture(scope="session")
def controller():
    return controller_tf()


@pytest.fixture(scope="session")
def plant_d():
    return discretize_zoh(plant_tf(), 1.0 / FS)


@pytest.fixture(scope="session")
def controller_ss():
    return tf_to_ss(controller_tf())


@pytest.fixture(scope="session")
def fourier11():
    return BasisDescriptor.fourier(range(1, 12))


@pytest.fixture(scope="session")
def truth(fourier11):
    return make_ground_truth(fourier11, N_M, 0.05, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
