"""Subcommands that close the servo loop: bode, lock and sense."""
import numpy as np
import structlog

from ringsim.commands.context import CommandContext
from ringsim.core.exceptions import LockLossError
from ringsim.models.schemas import InjectionConfig, LockInConfig
from ringsim.services.analysis import (
    SETTLING_TIME_CONSTANTS,
    birefringence_from_frequency,
    lock_in,
    noise_equivalent_birefringence,
    sensitivity_scan,
    welch_psd,
)
from ringsim.services.cavity import derive_params
from ringsim.services.loop_sim import simulate
from ringsim.services.noise import noise_budget
from ringsim.services.pdh import sideband_powers
from ringsim.services.servo import bode, ensure_calibrated, loop_report, suppression

logger = structlog.get_logger(__name__)

BODE_FREQUENCIES_HZ = np.logspace(0.0, 7.0, 1401)


def run_bode(ctx: CommandContext) -> None:
    ctx.scenario_file.require("servo")
    params = derive_params(ctx.scenario.cavity)
    chain = ensure_calibrated(ctx.scenario.servo, params.cavity_pole_hz)
    report = loop_report(chain, params.cavity_pole_hz, allow_unstable=True)

    frequencies, magnitude_db, phase_deg = bode(chain, params.cavity_pole_hz, BODE_FREQUENCIES_HZ)
    suppression_db = suppression(chain, params.cavity_pole_hz, frequencies)
    ctx.write_csv(
        "bode.csv",
        ["frequency_hz", "open_loop_magnitude_db", "open_loop_phase_deg", "suppression_db"],
        [frequencies, magnitude_db, phase_deg, suppression_db],
    )
    ctx.write_json("loop_report.json", report)


def _lockin_summary(ctx: CommandContext, trace, config: LockInConfig, discriminator_w_per_hz: float) -> dict:
    injection = ctx.scenario.injection
    reading = lock_in(trace["ccw_error"], trace.sample_rate_hz, config)
    return {
        "drive_frequency_hz": injection.drive_frequency_hz,
        "fm_amplitude_hz": injection.fm_amplitude_hz,
        "magnitude_w": reading.magnitude,
        "phase_rad": reading.phase_rad,
        "in_phase_w": reading.in_phase,
        "quadrature_w": reading.quadrature,
        "equivalent_frequency_hz": reading.magnitude / discriminator_w_per_hz,
        "enbw_hz": reading.enbw_hz,
        "time_constant_s": config.time_constant_s,
        "filter_order_count": config.filter_order,
    }


def run_lock(ctx: CommandContext) -> None:
    ctx.scenario_file.require("servo")
    scenario = ctx.scenario
    try:
        run = simulate(scenario)
    except LockLossError as e:
        if e.trace is not None and len(e.trace):
            ctx.write_trace("trace.csv", e.trace)
        raise

    trace = run.trace
    ctx.write_trace("trace.csv", trace)
    ctx.write_json("run_report.json", run.report)

    params = derive_params(scenario.cavity)
    budget = noise_budget(sideband_powers(scenario.modulation), params.linewidth_hz, params.optical_frequency_hz)
    frequencies, cw_psd = welch_psd(trace["cw_error"], trace.sample_rate_hz)
    _, ccw_psd = welch_psd(trace["ccw_error"], trace.sample_rate_hz)
    ctx.write_csv(
        "psd.csv",
        ["frequency_hz", "cw_error_w2_per_hz", "ccw_error_w2_per_hz", "shot_floor_w2_per_hz"],
        [frequencies, cw_psd, ccw_psd, np.full(frequencies.size, budget.shot_power_psd_w_per_rthz ** 2)],
    )

    injection = scenario.injection
    if injection is not None and injection.drive_frequency_hz > 0:
        config = LockInConfig.for_reference(injection.drive_frequency_hz)
        if trace.duration_s >= SETTLING_TIME_CONSTANTS * config.time_constant_s:
            ctx.write_json("lockin.json", _lockin_summary(ctx, trace, config, run.report.discriminator_w_per_hz))
        else:
            logger.warning("run too short for a settled lock-in reading", time_constant_s=config.time_constant_s)


def run_sense(ctx: CommandContext) -> None:
    ctx.scenario_file.require("servo")
    scenario = ctx.scenario
    section = ctx.scenario_file.scan
    injection = scenario.injection or InjectionConfig()
    if section.lockin_time_constant_s is None:
        lockin = LockInConfig.for_reference(injection.drive_frequency_hz, filter_order=section.lockin_filter_order)
    else:
        lockin = LockInConfig(
            reference_frequency_hz=injection.drive_frequency_hz,
            time_constant_s=section.lockin_time_constant_s,
            filter_order=section.lockin_filter_order,
        )

    scan = sensitivity_scan(
        scenario.with_injection(injection),
        section.drive_amplitudes_v,
        workers=ctx.workers,
        lockin=lockin,
        extrapolation_time_s=section.extrapolation_time_s,
    )
    points = scan.points
    ctx.write_csv(
        "scan.csv",
        ["drive_amplitude_v", "fm_amplitude_hz", "lockin_w", "equivalent_hz", "lockin_phase_rad", "locked"],
        [
            [p.drive_amplitude_v for p in points],
            [p.fm_amplitude_hz for p in points],
            [p.lockin_reading_w for p in points],
            [p.equivalent_frequency_hz for p in points],
            [p.lockin_phase_rad for p in points],
            [p.locked for p in points],
        ],
    )

    summary = scan.model_dump(mode="json", exclude={"points"})
    summary["point_count"] = len(points)
    summary["lock_lost_count"] = sum(1 for p in points if not p.locked)
    if scan.floor_extrapolated_hz is not None:
        optical_frequency = derive_params(scenario.cavity).optical_frequency_hz
        delta_n = birefringence_from_frequency(scan.floor_extrapolated_hz, optical_frequency)
        summary["extrapolated_delta_n_dimless"] = delta_n
        summary["extrapolated_gamma_n_per_rthz"] = noise_equivalent_birefringence(delta_n, scan.extrapolation_time_s)
    ctx.write_json("fit_summary.json", summary)
