#!/usr/bin/env python3
"""
Servo calibration script for the ring-cavity metrology simulator.
Solves the overall gain and loop delay of a servo chain for the target
loop resonance and prints the resulting loop figures.
"""

import sys
from pathlib import Path

# Add the package directory to the Python path
sys.path.insert(0, str(Path(__file__).parent.parent))

import structlog

from ringsim.core.config import get_settings
from ringsim.core.exceptions import RingSimError
from ringsim.services.cavity import derive_params
from ringsim.services.scenario import default_scenario, load_scenario
from ringsim.services.servo import calibrate_chain, loop_report
from ringsim.utils.helpers import dump_json
from ringsim.utils.logging import setup_logging

setup_logging()
logger = structlog.get_logger(__name__)


def calibrate(scenario_path=None) -> bool:
    """Calibrate the servo of a scenario (defaults when no path is given)."""
    settings = get_settings()
    scenario_file = load_scenario(scenario_path) if scenario_path else default_scenario()
    params = derive_params(scenario_file.scenario.cavity)
    try:
        chain = calibrate_chain(scenario_file.scenario.servo, params.cavity_pole_hz)
        report = loop_report(chain, params.cavity_pole_hz)
    except RingSimError as e:
        logger.error("Calibration failed", error=e.code, message=e.message)
        return False

    logger.info(
        "Calibration targets",
        peak_db=settings.CALIBRATION_TARGET_PEAK_DB,
        frequency_hz=settings.CALIBRATION_TARGET_FREQUENCY_HZ,
    )
    sys.stdout.write(dump_json(report).decode())
    return True


def main():
    """Main calibration function."""
    logger.info("Starting servo calibration...")
    scenario_path = sys.argv[1] if len(sys.argv) > 1 else None
    if calibrate(scenario_path):
        logger.info("Servo calibration completed successfully!")
    else:
        logger.error("Servo calibration failed!")
        sys.exit(1)


if __name__ == "__main__":
    main()
