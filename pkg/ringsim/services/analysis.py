import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import signal, special

from ringsim.core.exceptions import FitError, LockLossError, ValidationError
from ringsim.models.results import LockInResult, SensitivityPoint, SensitivityScan, Trace
from ringsim.models.schemas import InjectionConfig, LockInConfig, Scenario
from ringsim.services.loop_sim import prepare_run, simulate
from ringsim.tasks.sweeps import ordered_map
from ringsim.utils.helpers import nearest_power_of_two

logger = structlog.get_logger(__name__)

# Lock-in output needs this many time constants of data to settle
SETTLING_TIME_CONSTANTS = 10.0
# A scan point counts as resolved when its reading exceeds the zero-injection reading by this factor
RESOLUTION_FACTOR = 3.0
# Half-width of the band around the reference used to read the floor PSD, as a fraction of it
FLOOR_BAND_FRACTION = 0.2


class WindowKind(str, Enum):
    HANN = "hann"
    HAMMING = "hamming"
    BLACKMAN = "blackman"
    BOXCAR = "boxcar"


def enbw(config: LockInConfig) -> float:
    """Equivalent noise bandwidth of ``filter_order`` cascaded single poles.

    1/(4 TC) for one pole, 1/(8 TC) for two.
    """
    n = config.filter_order
    return special.gamma(n - 0.5) / (4.0 * math.sqrt(math.pi) * special.gamma(n) * config.time_constant_s)


def lock_in(channel: Union[Sequence[float], np.ndarray], sample_rate_hz: float,
            config: LockInConfig) -> LockInResult:
    """Dual-phase demodulation at the reference frequency.

    A tone A*cos(2 pi f t + phi) reads magnitude A and phase phi once the
    low-pass has settled; the reading is taken at the last sample.
    """
    values = np.asarray(channel, dtype=float)
    if not sample_rate_hz > 0:
        raise ValidationError("sample rate must be positive", details={"sample_rate_hz": sample_rate_hz})
    required = int(math.ceil(SETTLING_TIME_CONSTANTS * config.time_constant_s * sample_rate_hz))
    if values.ndim != 1 or values.size < required:
        raise ValidationError(
            "series too short for the lock-in time constant",
            details={"sample_count": int(values.size), "required_count": required},
        )
    if not np.all(np.isfinite(values)):
        raise ValidationError("series contains non-finite samples")
    if config.reference_frequency_hz >= sample_rate_hz / 2.0:
        raise ValidationError(
            "reference frequency at or above the Nyquist frequency",
            details={"reference_frequency_hz": config.reference_frequency_hz},
        )

    phase = 2.0 * math.pi * config.reference_frequency_hz * np.arange(values.size) / sample_rate_hz
    in_phase = values * np.cos(phase)
    quadrature = values * np.sin(phase)

    alpha = 1.0 - math.exp(-1.0 / (sample_rate_hz * config.time_constant_s))
    b, a = [alpha], [1.0, -(1.0 - alpha)]
    for _ in range(config.filter_order):
        in_phase = signal.lfilter(b, a, in_phase)
        quadrature = signal.lfilter(b, a, quadrature)

    i_value = float(in_phase[-1])
    q_value = float(quadrature[-1])
    return LockInResult(
        magnitude=2.0 * math.hypot(i_value, q_value),
        phase_rad=math.atan2(-q_value, i_value),
        in_phase=i_value,
        quadrature=q_value,
        enbw_hz=enbw(config),
    )


def welch_psd(
    series: Union[Sequence[float], np.ndarray],
    sample_rate_hz: float,
    segment_length: Optional[int] = None,
    overlap_fraction: float = 0.5,
    window: Union[WindowKind, str] = WindowKind.HANN,
) -> Tuple[np.ndarray, np.ndarray]:
    """One-sided PSD in units^2/Hz; integrates to the series variance.

    The default segment is the power of two nearest to a 64th of the series.
    """
    values = np.asarray(series, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise ValidationError("series needs at least two samples")
    if not sample_rate_hz > 0:
        raise ValidationError("sample rate must be positive", details={"sample_rate_hz": sample_rate_hz})
    if segment_length is None:
        segment_length = min(values.size, max(16, nearest_power_of_two(values.size / 64.0)))
    if not 2 <= segment_length <= values.size:
        raise ValidationError(
            "segment length must lie between 2 and the series length",
            details={"segment_length": segment_length, "sample_count": int(values.size)},
        )
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValidationError("overlap fraction must lie in [0, 1)", details={"overlap_fraction": overlap_fraction})
    try:
        window = WindowKind(window)
    except ValueError:
        raise ValidationError(
            f"unknown window '{window}'",
            details={"allowed": [kind.value for kind in WindowKind]},
        )

    frequencies, psd = signal.welch(
        values,
        fs=sample_rate_hz,
        window=window.value,
        nperseg=segment_length,
        noverlap=int(overlap_fraction * segment_length),
        detrend="constant",
        return_onesided=True,
        scaling="density",
    )
    return frequencies, psd


def birefringence_from_frequency(delta_nu_hz: float, optical_frequency_hz: float) -> float:
    if not optical_frequency_hz > 0:
        raise ValidationError(
            "optical frequency must be positive",
            details={"optical_frequency_hz": optical_frequency_hz},
        )
    return delta_nu_hz / optical_frequency_hz


def noise_equivalent_birefringence(delta_n: float, measurement_time_s: float) -> float:
    """delta_n * sqrt(4 T), the sensitivity normalized to 1 Hz bandwidth."""
    if not measurement_time_s > 0:
        raise ValidationError(
            "measurement time must be positive",
            details={"measurement_time_s": measurement_time_s},
        )
    return delta_n * math.sqrt(4.0 * measurement_time_s)


def gamma_from_psd(frequency_psd_hz2_per_hz: float, optical_frequency_hz: float) -> float:
    """Noise-equivalent birefringence from a one-sided frequency-noise PSD."""
    if frequency_psd_hz2_per_hz < 0:
        raise ValidationError("PSD must be non-negative")
    return birefringence_from_frequency(math.sqrt(frequency_psd_hz2_per_hz), optical_frequency_hz)


def band_level(frequencies: np.ndarray, psd: np.ndarray, center_hz: float,
               half_width_hz: float) -> float:
    """Median PSD over ``center +- half_width``, interpolated if no bin falls inside."""
    band = (frequencies >= center_hz - half_width_hz) & (frequencies <= center_hz + half_width_hz)
    if np.any(band):
        return float(np.median(psd[band]))
    return float(np.interp(center_hz, frequencies, psd))


@dataclass(frozen=True)
class _PointRun:
    point: SensitivityPoint
    trace: Optional[Trace] = None


def _measure_point(
    template: Scenario,
    injection: InjectionConfig,
    amplitude_v: float,
    lockin: LockInConfig,
    discriminator_w_per_hz: float,
) -> _PointRun:
    drive = injection.model_copy(update={"drive_amplitude_v": amplitude_v})
    scenario = template.with_injection(drive)
    try:
        run = simulate(scenario)
    except LockLossError as e:
        logger.warning("scan point lost lock", drive_amplitude_v=amplitude_v, time_of_failure_s=e.time_of_failure)
        return _PointRun(SensitivityPoint(
            drive_amplitude_v=amplitude_v,
            fm_amplitude_hz=drive.fm_amplitude_hz,
            lockin_reading_w=0.0,
            equivalent_frequency_hz=0.0,
            locked=False,
            time_of_failure_s=e.time_of_failure,
        ))

    reading = lock_in(run.trace["ccw_error"], run.trace.sample_rate_hz, lockin)
    point = SensitivityPoint(
        drive_amplitude_v=amplitude_v,
        fm_amplitude_hz=drive.fm_amplitude_hz,
        lockin_reading_w=reading.magnitude,
        equivalent_frequency_hz=reading.magnitude / discriminator_w_per_hz,
        lockin_phase_rad=reading.phase_rad,
    )
    return _PointRun(point, run.trace if amplitude_v == 0 else None)


def _floor_psd(trace: Trace, discriminator_w_per_hz: float, reference_frequency_hz: float) -> float:
    """One-sided PSD of ccw_error/D near the reference, Hz^2/Hz."""
    frequencies, psd = welch_psd(trace["ccw_error"] / discriminator_w_per_hz, trace.sample_rate_hz)
    return band_level(frequencies, psd, reference_frequency_hz, FLOOR_BAND_FRACTION * reference_frequency_hz)


def sensitivity_scan(
    template: Scenario,
    amplitudes_v: Sequence[float],
    workers: int = 1,
    lockin: Optional[LockInConfig] = None,
    extrapolation_time_s: float = 1000.0,
) -> SensitivityScan:
    """Run the locked loop once per drive amplitude and fit the ccw lock-in response.

    A zero-amplitude run is added when absent; its reading is the noise
    floor. Points that lose lock are kept in the result, flagged, and left
    out of the log-log fit.
    """
    amplitudes = [float(v) for v in amplitudes_v]
    if len(amplitudes) < 3:
        raise ValidationError("a sensitivity scan needs at least three amplitudes", details={"amplitude_count": len(amplitudes)})
    if any(not math.isfinite(v) or v < 0 for v in amplitudes):
        raise ValidationError("drive amplitudes must be finite and non-negative")
    if not extrapolation_time_s > 0:
        raise ValidationError("extrapolation time must be positive")
    if 0.0 not in amplitudes:
        amplitudes = [0.0] + amplitudes

    injection = template.injection or InjectionConfig()
    if lockin is None:
        lockin = LockInConfig.for_reference(injection.drive_frequency_hz)
    elif lockin.reference_frequency_hz != injection.drive_frequency_hz:
        logger.warning(
            "lock-in reference differs from the drive frequency",
            reference_frequency_hz=lockin.reference_frequency_hz,
            drive_frequency_hz=injection.drive_frequency_hz,
        )

    # calibrates the servo once before runs fan out
    setup = prepare_run(template.with_injection(injection))
    slope = setup.discriminator_w_per_hz
    log = logger.bind(point_count=len(amplitudes), workers=workers, seed=template.noise.rng_seed)
    log.info("sensitivity scan started", time_constant_s=lockin.time_constant_s)

    runs = ordered_map(
        lambda amplitude: _measure_point(template, injection, amplitude, lockin, slope),
        amplitudes,
        workers,
    )
    points = [run.point for run in runs]
    locked = [p for p in points if p.locked]
    if not locked:
        raise FitError("every scan point lost lock", details={"amplitude_count": len(points)})

    floor_run = next((run for run in runs if run.point.drive_amplitude_v == 0 and run.point.locked), None)
    floor_reading = floor_run.point.equivalent_frequency_hz if floor_run else None

    fitted = [
        p for p in locked
        if p.fm_amplitude_hz > 0
        and p.equivalent_frequency_hz > 0
        and (floor_reading is None or p.equivalent_frequency_hz > RESOLUTION_FACTOR * floor_reading)
    ]
    if len(fitted) < 2:
        raise FitError("fewer than two resolved scan points", details={"resolved_count": len(fitted)})

    x = np.log10([p.fm_amplitude_hz for p in fitted])
    y = np.log10([p.equivalent_frequency_hz for p in fitted])
    # points near the floor carry its bias and count less
    weights = np.array([
        1.0 if not floor_reading else 1.0 - floor_reading / p.equivalent_frequency_hz for p in fitted
    ])
    slope_fit, intercept = np.polyfit(x, y, 1, w=weights)

    measurement_time = template.duration_s
    floor_equivalent = floor_extrapolated = None
    if floor_run is not None:
        psd = _floor_psd(floor_run.trace, slope, lockin.reference_frequency_hz)
        floor_equivalent = math.sqrt(psd) / math.sqrt(4.0 * measurement_time)
        floor_extrapolated = math.sqrt(psd) / math.sqrt(4.0 * extrapolation_time_s)

    result = SensitivityScan(
        points=points,
        slope_dimless=float(slope_fit),
        intercept_dimless=float(intercept),
        fitted_point_count=len(fitted),
        floor_reading_hz=floor_reading,
        floor_equivalent_hz=floor_equivalent,
        floor_extrapolated_hz=floor_extrapolated,
        extrapolation_time_s=extrapolation_time_s,
        smallest_resolved_hz=min(p.fm_amplitude_hz for p in fitted),
        measurement_time_s=measurement_time,
        discriminator_w_per_hz=slope,
        lockin_reference_frequency_hz=lockin.reference_frequency_hz,
        lockin_time_constant_s=lockin.time_constant_s,
        lockin_filter_order_count=lockin.filter_order,
        lockin_enbw_hz=enbw(lockin),
    )
    log.info("sensitivity scan finished", slope_dimless=result.slope_dimless, fitted_point_count=len(fitted))
    return result
