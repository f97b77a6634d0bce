import numpy as np
import pytest

from ringsim.models.schemas import CavityConfig, ModulationConfig, Scenario, ServoChain, SidebandPowers
from ringsim.services.cavity import derive_params
from ringsim.services.servo import ensure_calibrated


@pytest.fixture(scope="session")
def cavity_params():
    return derive_params(CavityConfig())


@pytest.fixture(scope="session")
def plant_pole_hz(cavity_params):
    return cavity_params.cavity_pole_hz


@pytest.fixture(scope="session")
def calibrated_chain(plant_pole_hz):
    return ensure_calibrated(ServoChain(), plant_pole_hz)


@pytest.fixture(scope="session")
def modulation():
    return ModulationConfig()


@pytest.fixture
def quoted_powers():
    """Working point of the noise budget: 10 mW carrier, 3 mW per sideband."""
    return SidebandPowers(carrier_w=10e-3, sideband_w=3e-3)


@pytest.fixture
def short_scenario():
    """Noiseless locked run short enough for the fast test suite."""
    return Scenario(duration_s=0.05, sample_rate_hz=2e6, decimation=10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
