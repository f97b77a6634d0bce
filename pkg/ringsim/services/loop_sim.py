import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import structlog
from scipy import signal

from ringsim.core.exceptions import (
    AliasingError,
    LockLossError,
    UndersampledError,
    ValidationError,
)
from ringsim.models.results import AcquisitionReport, LoopReport, RunReport, Trace
from ringsim.models.schemas import CavityParams, Scenario, ServoChain, SidebandPowers
from ringsim.services.cavity import derive_params, reflection_coefficient
from ringsim.services.loop_kernel import CHANNELS, closed_loop_kernel
from ringsim.services.noise import noise_budget, sample_noise
from ringsim.services.pdh import capture_range, discriminator_slope, sideband_powers
from ringsim.services.servo import discretize_chain, ensure_calibrated, loop_report

logger = structlog.get_logger(__name__)

CHANNEL_UNITS: Dict[str, str] = {
    "cw_error": "w",
    "ccw_error": "w",
    "aom_cmd": "hz",
    "pzt_cmd": "hz",
    "tec_cmd": "hz",
    "true_cw_detuning": "hz",
    "true_ccw_detuning": "hz",
    "transmitted_cw": "w",
    "reflected_cw": "w",
    "transmitted_ccw": "w",
    "reflected_ccw": "w",
}

# Acquisition counts as complete once |cw detuning| stays below linewidth / LOCK_THRESHOLD_DIVISOR
LOCK_THRESHOLD_DIVISOR = 100.0


@dataclass(frozen=True)
class RunSetup:
    """Everything derived from a scenario before the first sample is simulated."""

    scenario: Scenario
    params: CavityParams
    powers: SidebandPowers
    discriminator_w_per_hz: float
    chain: ServoChain
    loop: LoopReport


@dataclass(frozen=True)
class LockRun:
    trace: Trace
    report: RunReport
    loop: LoopReport


def prepare_run(scenario: Scenario) -> RunSetup:
    params = derive_params(scenario.cavity)
    powers = sideband_powers(scenario.modulation)
    slope = discriminator_slope(powers, params.linewidth_hz)
    if slope == 0:
        raise ValidationError("discriminator slope is zero; no sideband or carrier power")

    chain = ensure_calibrated(scenario.servo, params.cavity_pole_hz)
    loop = loop_report(chain, params.cavity_pole_hz)

    fs = scenario.sample_rate_hz
    if fs < 10.0 * loop.resonance_frequency_hz or fs < 5.0 * loop.unity_gain_frequency_hz:
        raise UndersampledError(
            "sample rate does not resolve the loop resonance",
            details={
                "sample_rate_hz": fs,
                "resonance_frequency_hz": loop.resonance_frequency_hz,
                "unity_gain_frequency_hz": loop.unity_gain_frequency_hz,
            },
        )
    if scenario.injection is not None and scenario.injection.drive_frequency_hz >= fs / 2.0:
        raise AliasingError(
            "injection frequency at or above the Nyquist frequency",
            details={"drive_frequency_hz": scenario.injection.drive_frequency_hz},
        )
    return RunSetup(scenario, params, powers, slope, chain, loop)


def _optical_monitors(params: CavityParams, powers: SidebandPowers, mod_frequency_hz: float,
                      detuning_hz: np.ndarray) -> Dict[str, np.ndarray]:
    carrier_reflection = np.abs(reflection_coefficient(params, detuning_hz)) ** 2
    sideband_reflection = abs(reflection_coefficient(params, mod_frequency_hz)) ** 2
    transmitted = powers.carrier_w * (1.0 - carrier_reflection)
    reflected = powers.carrier_w * carrier_reflection + 2.0 * powers.sideband_w * sideband_reflection
    return {"transmitted": transmitted, "reflected": reflected}


def _build_trace(setup: RunSetup, block_averages: np.ndarray) -> Trace:
    scenario = setup.scenario
    channels = {name: block_averages[:, i] for i, name in enumerate(CHANNELS)}
    for direction in ("cw", "ccw"):
        monitors = _optical_monitors(
            setup.params, setup.powers, scenario.modulation.mod_frequency_hz,
            channels[f"true_{direction}_detuning"],
        )
        channels[f"transmitted_{direction}"] = monitors["transmitted"]
        channels[f"reflected_{direction}"] = monitors["reflected"]
    return Trace(
        sample_rate_hz=scenario.record_rate_hz,
        channels=channels,
        units={name: CHANNEL_UNITS[name] for name in channels},
    )


def simulate(scenario: Scenario) -> LockRun:
    """Run the closed loop sample by sample.

    Raises LockLossError carrying the partial trace once the cw detuning has
    spent, net of the time back inside, longer than the dwell outside the
    lock window.
    """
    setup = prepare_run(scenario)
    params = setup.params
    fs = scenario.sample_rate_hz
    n = scenario.sample_count
    decimation = scenario.decimation
    log = logger.bind(duration_s=scenario.duration_s, sample_rate_hz=fs, seed=scenario.noise.rng_seed)

    if n < decimation:
        raise ValidationError("run shorter than one recorded block", details={"sample_count": n})
    if n % decimation:
        log.warning("trailing samples not recorded", dropped_count=n % decimation)

    initial = scenario.initial_detuning_hz
    if scenario.servo_enabled and abs(initial) >= capture_range(scenario.modulation):
        raise LockLossError(
            "initial detuning outside the capture range",
            time_of_failure=0.0,
            details={"initial_detuning_hz": initial, "capture_range_hz": capture_range(scenario.modulation)},
        )

    filters = discretize_chain(setup.chain, params.cavity_pole_hz, fs)

    injection_hz = 0.0
    injection_rad = 0.0
    if scenario.injection is not None:
        injection_hz = scenario.injection.fm_amplitude_hz
        injection_rad = 2.0 * math.pi * scenario.injection.drive_frequency_hz / fs

    noise_on = scenario.noise.any_enabled
    if noise_on:
        shot_psd = 0.0
        if scenario.noise.shot_noise_enabled:
            shot_psd = noise_budget(setup.powers, params.linewidth_hz, params.optical_frequency_hz).shot_power_psd_w_per_rthz
        samples = sample_noise(scenario.noise, n, fs, shot_psd)
        laser, cw_noise, ccw_noise = samples.laser_frequency_hz, samples.detector_cw_w, samples.detector_ccw_w
    else:
        laser = cw_noise = ccw_noise = np.zeros(1)

    # cavity storage starts settled on the initial detuning; servo integrators at zero
    zi = signal.sosfilt_zi(filters.plant_sos)
    cw_start = initial + injection_hz
    plant_cw = np.ascontiguousarray(zi * cw_start)
    plant_ccw = np.ascontiguousarray(zi * (initial + params.anisotropy_detuning_hz))
    delay_line = np.full(filters.delay_samples, cw_start)

    empty = np.zeros((1, 6))
    pzt_sos = filters.pzt_sos if filters.pzt_sos is not None else empty
    tec_sos = filters.tec_sos if filters.tec_sos is not None else empty
    dwell = int(round(scenario.lock_loss_dwell_s * fs)) if scenario.servo_enabled else n + 1
    out = np.zeros((n // decimation, len(CHANNELS)))

    log.info("lock run started", delay_samples=filters.delay_samples, overall_gain=setup.chain.overall_gain)
    failure = closed_loop_kernel(
        n,
        decimation,
        float(initial),
        float(params.anisotropy_detuning_hz),
        float(setup.discriminator_w_per_hz),
        float(injection_hz),
        float(injection_rad),
        laser,
        cw_noise,
        ccw_noise,
        noise_on,
        filters.plant_sos,
        plant_cw,
        plant_ccw,
        filters.fast_sos,
        np.zeros((filters.fast_sos.shape[0], 2)),
        filters.fast_starts,
        filters.fast_counts,
        filters.actuator_sos,
        np.zeros((filters.actuator_sos.shape[0], 2)),
        pzt_sos,
        np.zeros((pzt_sos.shape[0], 2)),
        tec_sos,
        np.zeros((tec_sos.shape[0], 2)),
        filters.pzt_sos is not None,
        filters.tec_sos is not None,
        scenario.servo_enabled,
        float(setup.chain.overall_gain),
        float(scenario.aom_range_hz),
        float(scenario.pzt_range_hz),
        float(scenario.tec_range_hz),
        delay_line,
        params.linewidth_hz / 2.0,
        dwell,
        out,
    )

    if failure >= 0:
        blocks = (failure + 1) // decimation
        trace = _build_trace(setup, out[:blocks])
        time_of_failure = failure / fs
        log.warning("lock lost", time_of_failure_s=time_of_failure)
        raise LockLossError("lock lost", time_of_failure=time_of_failure, trace=trace)

    trace = _build_trace(setup, out)
    report = _run_report(setup, trace, filters.delay_samples, filters.realized_delay_s)
    log.info("lock run finished", residual_rms_cw_detuning_hz=report.residual_rms_cw_detuning_hz)
    return LockRun(trace=trace, report=report, loop=setup.loop)


def _run_report(setup: RunSetup, trace: Trace, delay_samples: int, realized_delay_s: float) -> RunReport:
    scenario = setup.scenario
    steady = trace.tail_from(trace.duration_s / 2.0)
    cw = steady["true_cw_detuning"]
    return RunReport(
        locked=True,
        residual_rms_cw_detuning_hz=float(np.sqrt(np.mean(cw ** 2))),
        mean_cw_error_w=float(np.mean(steady["cw_error"])),
        mean_ccw_error_w=float(np.mean(steady["ccw_error"])),
        mean_aom_cmd_hz=float(np.mean(steady["aom_cmd"])),
        mean_pzt_cmd_hz=float(np.mean(steady["pzt_cmd"])),
        mean_tec_cmd_hz=float(np.mean(steady["tec_cmd"])),
        overall_gain_dimless=setup.chain.overall_gain,
        requested_loop_delay_s=setup.chain.loop_delay_s,
        realized_loop_delay_s=realized_delay_s,
        delay_samples_count=delay_samples,
        delay_rounding_s=realized_delay_s - setup.chain.loop_delay_s,
        discriminator_w_per_hz=setup.discriminator_w_per_hz,
        duration_s=scenario.duration_s,
        sample_rate_hz=scenario.sample_rate_hz,
        decimation_count=scenario.decimation,
        rng_seed_u64=scenario.noise.rng_seed,
    )


def run_lock(scenario: Scenario) -> Trace:
    return simulate(scenario).trace


def acquire_and_hold(scenario: Scenario, initial_detuning_hz: float,
                     lock_threshold_hz: Optional[float] = None) -> AcquisitionReport:
    """Start detuned and report whether, and how fast, the loop pulls in.

    Failures are reported in the result rather than raised.
    """
    params = derive_params(scenario.cavity)
    if abs(initial_detuning_hz) >= params.fsr_hz / 2.0:
        return AcquisitionReport(
            locked=False,
            initial_detuning_hz=initial_detuning_hz,
            failure_reason=f"initial detuning beyond half a free spectral range ({params.fsr_hz / 2.0:.6g} Hz)",
        )
    threshold = lock_threshold_hz or params.linewidth_hz / LOCK_THRESHOLD_DIVISOR
    detuned = scenario.model_copy(update={"initial_detuning_hz": initial_detuning_hz})

    try:
        run = simulate(detuned)
    except LockLossError as e:
        return AcquisitionReport(
            locked=False,
            initial_detuning_hz=initial_detuning_hz,
            failure_reason=f"{e.message} at t = {e.time_of_failure:.6g} s",
        )

    detuning = run.trace["true_cw_detuning"]
    outside = np.flatnonzero(np.abs(detuning) >= threshold)
    if outside.size and outside[-1] == detuning.size - 1:
        return AcquisitionReport(
            locked=False,
            initial_detuning_hz=initial_detuning_hz,
            failure_reason="detuning did not settle within the run duration",
        )

    settled = int(outside[-1]) + 1 if outside.size else 0
    time_to_lock = settled * run.trace.time_step_s
    tail = detuning[max(settled, detuning.size // 2):]
    return AcquisitionReport(
        locked=True,
        initial_detuning_hz=initial_detuning_hz,
        time_to_lock_s=time_to_lock,
        residual_rms_detuning_hz=float(np.sqrt(np.mean(tail ** 2))),
    )
