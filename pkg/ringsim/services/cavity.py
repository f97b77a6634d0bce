import math
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
import structlog
from scipy import optimize

from ringsim.core import constants
from ringsim.core.exceptions import FitError, UndersampledError, ValidationError
from ringsim.models.results import FinesseScanEntry, RingdownFit, Trace
from ringsim.models.schemas import CavityConfig, CavityParams, validate_model
from ringsim.utils.rng import Stream, stream_generator

logger = structlog.get_logger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]

# Samples per photon lifetime and lifetimes recorded when a ring-down
# request leaves them unset
DEFAULT_SAMPLES_PER_LIFETIME = 1000
DEFAULT_RINGDOWN_LIFETIMES = 6.0


def finesse_from_amplitude(roundtrip_amplitude: float) -> float:
    return math.pi * math.sqrt(roundtrip_amplitude) / (1.0 - roundtrip_amplitude)


def solve_roundtrip_amplitude(finesse: float) -> float:
    """Invert F = pi*sqrt(rho)/(1 - rho) for rho.

    With x = sqrt(rho) the relation is the quadratic F*x^2 + pi*x - F = 0;
    its positive root is evaluated in the cancellation-free form.
    """
    if not finesse > 1:
        raise ValidationError("finesse must exceed 1", details={"finesse": finesse})
    x = 2.0 * finesse / (math.pi + math.sqrt(math.pi ** 2 + 4.0 * finesse ** 2))
    return x * x


def derive_params(config: Union[CavityConfig, Mapping]) -> CavityParams:
    config = validate_model(CavityConfig, config, "cavity")

    perimeter = config.perimeter_m
    fsr = constants.SPEED_OF_LIGHT / perimeter
    linewidth = fsr / config.finesse
    lifetime = 1.0 / (2.0 * math.pi * linewidth)
    rho = solve_roundtrip_amplitude(config.finesse)

    return CavityParams(
        fsr_hz=fsr,
        linewidth_hz=linewidth,
        photon_lifetime_s=lifetime,
        roundtrip_amplitude=rho,
        finesse=config.finesse,
        optical_frequency_hz=constants.SPEED_OF_LIGHT / config.vacuum_wavelength_m,
        perimeter_m=perimeter,
        anisotropy_detuning_hz=config.anisotropy_detuning_hz,
        coupler_loss_fraction=config.coupler_loss_fraction,
    )


def _checked_detunings(detuning: ArrayLike) -> np.ndarray:
    values = np.asarray(detuning, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValidationError("detuning must be finite")
    return values


def _mirror_amplitudes(params: CavityParams):
    """Input-coupler reflectivity and the remaining round-trip amplitude."""
    rho = params.roundtrip_amplitude
    share = params.coupler_loss_fraction
    return rho ** share, rho ** (1.0 - share)


def reflection_coefficient(params: CavityParams, detuning: ArrayLike) -> Union[complex, np.ndarray]:
    """Complex amplitude reflection of the ring seen from the input coupler.

    r = (r_in - r_rest * e^{i phi}) / (1 - rho * e^{i phi}) with
    phi = 2*pi*detuning/fsr. Vectorized over ``detuning``.
    """
    values = _checked_detunings(detuning)
    r_in, r_rest = _mirror_amplitudes(params)
    phasor = np.exp(2j * np.pi * values / params.fsr_hz)
    response = (r_in - r_rest * phasor) / (1.0 - params.roundtrip_amplitude * phasor)
    if np.ndim(response) == 0:
        return complex(response)
    return response


def intracavity_buildup(params: CavityParams, detuning: ArrayLike) -> Union[float, np.ndarray]:
    """Circulating power relative to the incident power."""
    values = _checked_detunings(detuning)
    r_in, _ = _mirror_amplitudes(params)
    phasor = np.exp(2j * np.pi * values / params.fsr_hz)
    buildup = (1.0 - r_in ** 2) / np.abs(1.0 - params.roundtrip_amplitude * phasor) ** 2
    if np.ndim(buildup) == 0:
        return float(buildup)
    return buildup


def ringdown_trace(
    params: CavityParams,
    duration_s: Optional[float] = None,
    sample_rate_hz: Optional[float] = None,
    initial_power_w: float = 1e-3,
    relative_noise: float = 0.0,
    seed: int = 0,
) -> Trace:
    """Power leaking out of the cavity after the input is switched off.

    ``relative_noise`` adds white Gaussian noise with standard deviation
    relative_noise * initial_power_w, drawn from the ring-down stream.
    """
    tau = params.photon_lifetime_s
    if duration_s is None:
        duration_s = DEFAULT_RINGDOWN_LIFETIMES * tau
    if sample_rate_hz is None:
        sample_rate_hz = DEFAULT_SAMPLES_PER_LIFETIME / tau

    if not (math.isfinite(duration_s) and duration_s > 0):
        raise ValidationError("ring-down duration must be positive", details={"duration_s": duration_s})
    if not (math.isfinite(initial_power_w) and initial_power_w > 0):
        raise ValidationError("initial power must be positive", details={"initial_power_w": initial_power_w})
    if relative_noise < 0:
        raise ValidationError("relative noise must be non-negative", details={"relative_noise": relative_noise})
    if not sample_rate_hz >= 10.0 / tau:
        raise UndersampledError(
            "sample rate too low to resolve the decay",
            details={"sample_rate_hz": sample_rate_hz, "minimum_hz": 10.0 / tau},
        )

    count = int(round(duration_s * sample_rate_hz))
    if count < 2:
        raise UndersampledError("ring-down shorter than two samples", details={"sample_count": count})

    time = np.arange(count) / sample_rate_hz
    power = initial_power_w * np.exp(-time / tau)
    if relative_noise > 0:
        rng = stream_generator(seed, Stream.RINGDOWN)
        power = power + rng.normal(0.0, relative_noise * initial_power_w, count)

    return Trace(sample_rate_hz=sample_rate_hz, channels={"power": power}, units={"power": "w"})


def _loglinear_fit(time: np.ndarray, power: np.ndarray):
    # log(P) has variance ~ (sigma/P)^2, so residuals are weighted by P
    mask = power > 0
    if np.count_nonzero(mask) < 3:
        raise FitError("ring-down has fewer than three positive samples")
    slope, intercept = np.polyfit(time[mask], np.log(power[mask]), 1, w=power[mask])
    if not slope < 0:
        raise FitError("power is not decaying", details={"log_slope_per_s": float(slope)})
    return -1.0 / slope, math.exp(intercept)


def fit_ringdown(trace: Trace, fsr_hz: float, channel: str = "power", polish: bool = True) -> RingdownFit:
    """Fit P0*exp(-t/tau) to a ring-down and recover the finesse as 2*pi*fsr*tau."""
    if channel not in trace:
        raise FitError(f"trace has no channel {channel!r}")
    power = np.asarray(trace[channel], dtype=float)
    if power.size < 3:
        raise FitError("ring-down too short to fit", details={"sample_count": int(power.size)})
    if not np.all(np.isfinite(power)):
        raise FitError("ring-down contains non-finite samples")
    if np.ptp(power) == 0:
        raise FitError("ring-down is constant")

    time = trace.time_s - trace.start_time_s
    loglinear_tau, loglinear_p0 = _loglinear_fit(time, power)
    tau, p0 = loglinear_tau, loglinear_p0

    if polish:
        # Normalized units keep both parameters near 1
        def model(t_norm, amplitude, rate):
            return amplitude * np.exp(-rate * t_norm)

        try:
            popt, _ = optimize.curve_fit(
                model, time / loglinear_tau, power / loglinear_p0, p0=(1.0, 1.0)
            )
        except RuntimeError as e:
            logger.warning("ring-down polish failed, keeping log-linear fit", error=str(e))
        else:
            if popt[1] > 0:
                tau = loglinear_tau / popt[1]
                p0 = loglinear_p0 * popt[0]

    residual = power - p0 * np.exp(-time / tau)
    return RingdownFit(
        tau_s=tau,
        finesse_dimless=2.0 * math.pi * fsr_hz * tau,
        loglinear_tau_s=loglinear_tau,
        initial_power_w=p0,
        residual_rms_w=float(np.sqrt(np.mean(residual ** 2))),
        fsr_hz=fsr_hz,
        sample_count=int(power.size),
    )


def finesse_scan(
    config: CavityConfig,
    finesse_values: Sequence[float],
    seeds: Sequence[int],
    relative_noise: float = 0.01,
    samples_per_lifetime: float = DEFAULT_SAMPLES_PER_LIFETIME,
) -> List[FinesseScanEntry]:
    """Repeat synthesize-and-fit over finesse values and seeds."""
    if not seeds:
        raise ValidationError("finesse scan needs at least one seed")
    entries = []
    for finesse in finesse_values:
        params = derive_params(config.model_copy(update={"finesse": finesse}))
        errors = []
        for seed in seeds:
            trace = ringdown_trace(
                params,
                sample_rate_hz=samples_per_lifetime / params.photon_lifetime_s,
                relative_noise=relative_noise,
                seed=seed,
            )
            fit = fit_ringdown(trace, params.fsr_hz)
            errors.append(abs(fit.finesse_dimless / finesse - 1.0))
        entries.append(FinesseScanEntry(
            finesse_dimless=finesse,
            seed_count=len(seeds),
            mean_relative_error_dimless=float(np.mean(errors)),
            max_relative_error_dimless=float(np.max(errors)),
        ))
        logger.info("finesse scan entry", finesse=finesse, max_relative_error=max(errors))
    return entries
