"""Regression check of the quoted apparatus figures."""
from typing import List

import structlog

from ringsim.commands.context import CommandContext
from ringsim.core import constants
from ringsim.core.exceptions import RegressionError
from ringsim.models.results import GoldenCheck, GoldenReport
from ringsim.models.schemas import CavityConfig, SidebandPowers
from ringsim.services.analysis import birefringence_from_frequency, noise_equivalent_birefringence
from ringsim.services.cavity import derive_params
from ringsim.services.noise import noise_budget

logger = structlog.get_logger(__name__)


def _check(name: str, unit: str, expected: float, actual: float, tolerance: float) -> GoldenCheck:
    error = abs(actual / expected - 1.0)
    return GoldenCheck(
        name=name,
        unit=unit,
        expected_si=expected,
        actual_si=actual,
        relative_error_dimless=error,
        relative_tolerance_dimless=tolerance,
        passed=error <= tolerance,
    )


def golden_checks() -> List[GoldenCheck]:
    """Each quoted figure against the value the tool computes from the apparatus defaults."""
    params = derive_params(CavityConfig())
    powers = SidebandPowers(carrier_w=constants.CARRIER_POWER_W, sideband_w=constants.SIDEBAND_POWER_W)
    budget = noise_budget(powers, constants.QUOTED_LINEWIDTH_HZ, params.optical_frequency_hz)
    delta_n = birefringence_from_frequency(constants.QUOTED_FREQUENCY_SENSITIVITY_HZ, params.optical_frequency_hz)
    gamma_n = noise_equivalent_birefringence(delta_n, constants.QUOTED_MEASUREMENT_TIME_S)

    return [
        _check("fsr", "hz", constants.QUOTED_FSR_HZ, params.fsr_hz, 0.01),
        _check("photon_lifetime", "s", 42e-6, params.photon_lifetime_s, 0.02),
        _check("reflected_power", "w", 8.5e-3, budget.reflected_power_w, 1e-9),
        _check("discriminator", "w_per_hz", 5.4772e-6, budget.discriminator_w_per_hz, 1e-4),
        _check("shot_power_psd", "w_per_rthz", 5.634e-11, budget.shot_power_psd_w_per_rthz, 1e-3),
        _check("shot_freq_psd", "hz_per_rthz", constants.QUOTED_SHOT_FREQ_PSD, budget.shot_freq_psd_hz_per_rthz, 0.05),
        _check("delta_n", "dimless", 1.77e-18, delta_n, 0.01),
        _check("gamma_n", "per_rthz", 1.12e-16, gamma_n, 0.01),
    ]


def run_golden(ctx: CommandContext) -> None:
    """Write golden.json; each row carries SI values plus the unit suffix in `unit`."""
    checks = golden_checks()
    report = GoldenReport(checks=checks, passed=all(check.passed for check in checks))
    ctx.write_json("golden.json", report)
    failed = [check.name for check in checks if not check.passed]
    if failed:
        logger.error("golden values regressed", failed=failed)
        raise RegressionError("golden values outside tolerance", details={"failed": failed})
    logger.info("golden values reproduced", check_count=len(checks))
