import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import optimize, signal

from ringsim.core.config import get_settings
from ringsim.core.exceptions import (
    CalibrationError,
    LoopInactiveError,
    UndersampledError,
    UnstableLoopError,
    ValidationError,
)
from ringsim.models.results import LoopReport
from ringsim.models.schemas import FilterStage, ServoChain, StageKind
from ringsim.services.loop_kernel import sos_step

logger = structlog.get_logger(__name__)

ArrayLike = Union[float, Sequence[float], np.ndarray]
Zpk = Tuple[np.ndarray, np.ndarray, float]

# Frequency window searched for loop figures
SEARCH_LOW_HZ = 1.0
SEARCH_HIGH_HZ = 1e7
POINTS_PER_DECADE = 200
RESONANCE_POINTS = 2000

# Nyquist contour: indentation radius around the origin and sampling
NYQUIST_LOW_HZ = 1e-6
NYQUIST_POINTS_PER_DECADE = 400
INDENT_POINTS = 4001

# Delay bracket searched by the calibration
DELAY_BRACKET_S = (0.5e-6, 1.3e-6)
DELAY_SCAN_POINTS = 9
GAIN_SCAN_POINTS = 41
# Reported peak height for an unstable trial loop during calibration
UNSTABLE_PEAK_DB = 200.0


def _two_pi(frequency_hz: float) -> float:
    return 2.0 * math.pi * frequency_hz


def stage_zpk(stage: FilterStage) -> Zpk:
    """Continuous zeros, poles (rad/s) and gain of one filter stage.

    PI:  Kp*(s + wi)/s
    PID: Kp*(s^2/wd + s + wi) / (s*(1 + s/wr)^2), wr = rolloff*wd
    """
    kp = stage.proportional_gain
    if stage.kind == StageKind.PURE_GAIN:
        return np.array([]), np.array([]), kp
    wi = _two_pi(stage.integrator_corner_hz)
    if stage.kind == StageKind.PI:
        return np.array([-wi]), np.array([0.0]), kp
    wd = _two_pi(stage.differentiator_corner_hz)
    wr = wd * stage.derivative_rolloff
    zeros = np.roots([1.0, wd, wi * wd])
    return zeros, np.array([0.0, -wr, -wr]), kp * wr ** 2 / wd


def actuator_zpk(chain: ServoChain) -> Zpk:
    """AOM driver: second-order low-pass at the actuator resonance, unity if Q = 0."""
    if chain.actuator_q == 0:
        return np.array([]), np.array([]), 1.0
    w0 = _two_pi(chain.actuator_resonance_hz)
    poles = np.roots([1.0, w0 / chain.actuator_q, w0 ** 2])
    return np.array([]), poles, w0 ** 2


def plant_zpk(plant_pole_hz: float) -> Zpk:
    wp = _two_pi(plant_pole_hz)
    return np.array([]), np.array([-wp]), wp


def zpk_at(zpk: Zpk, s: np.ndarray) -> np.ndarray:
    """Evaluate a ZPK at complex s (rad/s)."""
    zeros, poles, gain = zpk
    s = np.asarray(s, dtype=complex)[..., None]
    numerator = np.prod(s - zeros, axis=-1)
    denominator = np.prod(s - poles, axis=-1)
    return gain * numerator / denominator


def zpk_response(zpk: Zpk, frequency_hz: np.ndarray) -> np.ndarray:
    return zpk_at(zpk, 2j * np.pi * np.asarray(frequency_hz, dtype=float))


def stage_response(stage: FilterStage, frequency_hz: ArrayLike) -> np.ndarray:
    return zpk_response(stage_zpk(stage), _checked_frequencies(frequency_hz))


def _checked_frequencies(frequency_hz: ArrayLike) -> np.ndarray:
    values = np.asarray(frequency_hz, dtype=float)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ValidationError("frequencies must be finite and positive")
    return values


def _loop_at(chain: ServoChain, plant_pole_hz: float, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=complex)
    gain = chain.overall_gain or 0.0
    if not chain.fast_stages or gain == 0:
        return np.zeros(np.shape(s), dtype=complex)

    response = np.full(np.shape(s), gain, dtype=complex)
    for stage in chain.fast_stages:
        response = response * zpk_at(stage_zpk(stage), s)

    # AOM path plus the PZT path, itself feeding the TEC
    actuators = zpk_at(actuator_zpk(chain), s)
    if chain.pzt_stage is not None:
        pzt = zpk_at(stage_zpk(chain.pzt_stage), s)
        tec = 0.0
        if chain.tec_stage is not None:
            tec = zpk_at(stage_zpk(chain.tec_stage), s)
        actuators = actuators + pzt * (1.0 + tec)

    plant = zpk_at(plant_zpk(plant_pole_hz), s)
    delay = np.exp(-s * (chain.loop_delay_s or 0.0))
    return response * actuators * plant * delay


def _open_loop(chain: ServoChain, plant_pole_hz: float, frequency_hz: np.ndarray) -> np.ndarray:
    return _loop_at(chain, plant_pole_hz, 2j * np.pi * np.asarray(frequency_hz, dtype=float))


def open_loop_transfer(chain: ServoChain, plant_pole_hz: float, frequency_hz: ArrayLike):
    """G(f) of the cw lock: stages x actuators x cavity pole x transport delay."""
    frequencies = _checked_frequencies(frequency_hz)
    chain = ensure_calibrated(chain, plant_pole_hz)
    response = _open_loop(chain, plant_pole_hz, frequencies)
    if np.ndim(response) == 0:
        return complex(response)
    return response


def suppression(chain: ServoChain, plant_pole_hz: float, frequency_hz: ArrayLike):
    """20*log10|1 + G(f)|; positive where disturbances are suppressed."""
    values = 20.0 * np.log10(np.abs(1.0 + open_loop_transfer(chain, plant_pole_hz, frequency_hz)))
    if np.ndim(values) == 0:
        return float(values)
    return values


def bode(chain: ServoChain, plant_pole_hz: float, frequency_hz: ArrayLike):
    """(frequency_hz, magnitude_db, phase_deg) of the open loop, phase unwrapped."""
    frequencies = np.atleast_1d(_checked_frequencies(frequency_hz))
    response = np.atleast_1d(open_loop_transfer(chain, plant_pole_hz, frequencies))
    magnitude_db = 20.0 * np.log10(np.abs(response))
    phase_deg = np.degrees(np.unwrap(np.angle(response)))
    return frequencies, magnitude_db, phase_deg


@dataclass(frozen=True)
class _LoopFigures:
    unity_gain_frequency_hz: float
    phase_margin_deg: float
    phase_crossover_frequency_hz: Optional[float]
    gain_margin_db: Optional[float]
    resonance_frequency_hz: float
    resonance_peak_db: float
    encirclements: int

    @property
    def stable(self) -> bool:
        return self.encirclements == 0


def _log_grid(low_hz: float, high_hz: float, points_per_decade: int) -> np.ndarray:
    decades = math.log10(high_hz / low_hz)
    return np.logspace(math.log10(low_hz), math.log10(high_hz), int(decades * points_per_decade) + 1)


def _search_grid() -> np.ndarray:
    return _log_grid(SEARCH_LOW_HZ, SEARCH_HIGH_HZ, POINTS_PER_DECADE)


def _wrap_deg(angle_deg: float) -> float:
    return (angle_deg + 180.0) % 360.0 - 180.0


def _turning(values: np.ndarray) -> float:
    """Accumulated phase of a sampled complex path, in radians."""
    phase = np.unwrap(np.angle(values))
    return float(phase[-1] - phase[0])


def _encirclements(chain: ServoChain, plant_pole_hz: float) -> int:
    """Clockwise encirclements of -1 by G along the Nyquist contour.

    The contour climbs the imaginary axis and skirts the integrator poles
    at the origin on a small right half-circle. G has no right-half-plane
    poles, so every encirclement is an unstable closed-loop pole. |G| < 1
    above the search grid, so the remaining high-frequency tail cannot
    wind around -1.
    """
    theta = np.linspace(-0.5 * math.pi, 0.5 * math.pi, INDENT_POINTS)
    indent = 1.0 + _loop_at(chain, plant_pole_hz, _two_pi(NYQUIST_LOW_HZ) * np.exp(1j * theta))
    axis = _log_grid(NYQUIST_LOW_HZ, SEARCH_HIGH_HZ, NYQUIST_POINTS_PER_DECADE)
    branch = np.append(1.0 + _open_loop(chain, plant_pole_hz, axis), 1.0)
    # negative frequencies mirror the positive branch and turn the same way
    total = _turning(indent) + 2.0 * _turning(branch)
    return int(round(-total / (2.0 * math.pi)))


def _loop_figures(chain: ServoChain, plant_pole_hz: float) -> _LoopFigures:
    def g(f):
        return _open_loop(chain, plant_pole_hz, np.asarray(f, dtype=float))

    grid = _search_grid()
    response = g(grid)
    magnitude = np.abs(response)
    above = magnitude >= 1.0
    if not above.any():
        raise LoopInactiveError("open-loop gain never reaches unity", details={"max_gain": float(magnitude.max())})
    if above[-1]:
        raise LoopInactiveError(
            "no unity-gain crossing below the search limit",
            details={"search_limit_hz": SEARCH_HIGH_HZ},
        )

    # every unity crossing; the worst one sets the phase margin
    unity = [
        optimize.brentq(
            lambda f: math.log(abs(complex(g(f)))), grid[i], grid[i + 1], xtol=1e-9, rtol=1e-12
        )
        for i in np.flatnonzero(above[:-1] != above[1:])
    ]
    ugf = max(unity)
    phase_margin = min(_wrap_deg(180.0 + math.degrees(np.angle(complex(g(f))))) for f in unity)

    # -180 deg crossings below unity gain; the closest to unity sets the gain margin
    flips = np.flatnonzero(
        (np.sign(response.imag[:-1]) != np.sign(response.imag[1:]))
        & (response.real[:-1] < 0)
        & (response.real[1:] < 0)
    )
    margins = []
    for k in flips:
        f = optimize.brentq(lambda x: complex(g(x)).imag, grid[k], grid[k + 1], xtol=1e-9, rtol=1e-12)
        level = abs(complex(g(f)))
        if level < 1.0:
            margins.append((-20.0 * math.log10(level), float(f)))
    gain_margin, crossover = min(margins) if margins else (None, None)

    def sensitivity_db(f):
        return 20.0 * math.log10(1.0 / abs(1.0 + complex(g(f))))

    fine = np.logspace(math.log10(max(ugf / 10.0, SEARCH_LOW_HZ)), math.log10(SEARCH_HIGH_HZ), RESONANCE_POINTS)
    peaks = -20.0 * np.log10(np.abs(1.0 + g(fine)))
    k = int(np.argmax(peaks))
    low, high = fine[max(k - 1, 0)], fine[min(k + 1, fine.size - 1)]
    refined = optimize.minimize_scalar(
        lambda f: -sensitivity_db(f), bounds=(low, high), method="bounded", options={"xatol": 1e-6 * low}
    )
    if -refined.fun >= peaks[k]:
        resonance, peak = float(refined.x), float(-refined.fun)
    else:
        resonance, peak = float(fine[k]), float(peaks[k])

    return _LoopFigures(
        unity_gain_frequency_hz=float(ugf),
        phase_margin_deg=float(phase_margin),
        phase_crossover_frequency_hz=crossover,
        gain_margin_db=gain_margin,
        resonance_frequency_hz=resonance,
        resonance_peak_db=peak,
        encirclements=_encirclements(chain, plant_pole_hz),
    )


def loop_report(chain: ServoChain, plant_pole_hz: float, allow_unstable: bool = False) -> LoopReport:
    if not chain.fast_stages or chain.overall_gain == 0:
        raise LoopInactiveError("servo chain has no active gain")
    chain = ensure_calibrated(chain, plant_pole_hz)
    figures = _loop_figures(chain, plant_pole_hz)
    report = LoopReport(
        unity_gain_frequency_hz=figures.unity_gain_frequency_hz,
        gain_margin_db=figures.gain_margin_db,
        phase_margin_deg=figures.phase_margin_deg,
        resonance_frequency_hz=figures.resonance_frequency_hz,
        resonance_peak_db=figures.resonance_peak_db,
        phase_crossover_frequency_hz=figures.phase_crossover_frequency_hz,
        stable=figures.stable,
        overall_gain_dimless=chain.overall_gain,
        loop_delay_s=chain.loop_delay_s,
        plant_pole_hz=plant_pole_hz,
    )
    if not report.stable and not allow_unstable:
        details = report.model_dump(mode="json")
        details["encirclements_count"] = figures.encirclements
        raise UnstableLoopError("closed loop is unstable", details=details)
    return report


def _peak_db(chain: ServoChain, plant_pole_hz: float) -> Tuple[float, float]:
    """(peak height, peak frequency) for a trial chain; unstable loops rank as a huge peak."""
    try:
        figures = _loop_figures(chain, plant_pole_hz)
    except LoopInactiveError:
        return UNSTABLE_PEAK_DB, float("nan")
    if not figures.stable:
        return UNSTABLE_PEAK_DB, figures.resonance_frequency_hz
    return min(figures.resonance_peak_db, UNSTABLE_PEAK_DB), figures.resonance_frequency_hz


def _gain_for_peak(chain: ServoChain, plant_pole_hz: float, delay_s: float, target_db: float) -> float:
    """Overall gain on the stable low-gain branch giving the target peak height.

    Gains are scanned upward from the first stable one; the branch ends at
    the first unstable gain, where the peak diverges. The root is the first
    upward crossing of the target past the lowest peak of the branch.
    """
    def peak(gain: float) -> float:
        trial = chain.model_copy(update={"overall_gain": gain, "loop_delay_s": delay_s})
        return _peak_db(trial, plant_pole_hz)[0]

    # above the cavity pole |G| ~ K * f_pole / f
    guess = 80e3 / plant_pole_hz
    branch_gains: List[float] = []
    branch_peaks: List[float] = []
    for gain in guess * np.logspace(-1.0, 1.0, GAIN_SCAN_POINTS):
        value = peak(float(gain))
        if value >= UNSTABLE_PEAK_DB and not branch_gains:
            continue
        branch_gains.append(float(gain))
        branch_peaks.append(value)
        if value >= UNSTABLE_PEAK_DB:
            break
    if not branch_gains:
        raise CalibrationError("no stable gain in the scanned range", details={"loop_delay_s": delay_s})

    peaks = np.array(branch_peaks)
    lowest = int(np.argmin(peaks))
    if peaks[lowest] >= target_db:
        raise CalibrationError(
            "no gain reaches the target peak height",
            details={"loop_delay_s": delay_s, "min_peak_db": float(peaks[lowest]), "target_db": target_db},
        )
    beyond = np.flatnonzero(peaks[lowest:] >= target_db)
    if not beyond.size:
        raise CalibrationError("peak height never reaches the target", details={"loop_delay_s": delay_s})
    upper = lowest + int(beyond[0])
    return optimize.brentq(
        lambda k: peak(k) - target_db, branch_gains[upper - 1], branch_gains[upper], xtol=1e-9, rtol=1e-10
    )


def calibrate_chain(
    chain: ServoChain,
    plant_pole_hz: float,
    target_peak_db: Optional[float] = None,
    target_frequency_hz: Optional[float] = None,
) -> ServoChain:
    """Solve (overall_gain, loop_delay) for the target loop resonance.

    Inner search: gain giving the peak height at a fixed delay.
    Outer search: delay placing the peak at the target frequency, bracketed
    on a coarse delay scan first.
    A chain with a fixed loop_delay_s only has its gain solved.
    """
    settings = get_settings()
    target_db = settings.CALIBRATION_TARGET_PEAK_DB if target_peak_db is None else target_peak_db
    target_hz = settings.CALIBRATION_TARGET_FREQUENCY_HZ if target_frequency_hz is None else target_frequency_hz
    if not chain.fast_stages:
        raise CalibrationError("cannot calibrate a chain without fast stages")

    if chain.loop_delay_s is not None:
        gain = _gain_for_peak(chain, plant_pole_hz, chain.loop_delay_s, target_db)
        return chain.model_copy(update={"overall_gain": gain})

    def frequency_error(delay: float) -> float:
        gain = _gain_for_peak(chain, plant_pole_hz, delay, target_db)
        trial = chain.model_copy(update={"overall_gain": gain, "loop_delay_s": delay})
        return _peak_db(trial, plant_pole_hz)[1] - target_hz

    delays = np.linspace(*DELAY_BRACKET_S, DELAY_SCAN_POINTS)
    errors = []
    for delay in delays:
        try:
            errors.append(frequency_error(float(delay)))
        except CalibrationError:
            errors.append(float("nan"))
    errors = np.array(errors)
    brackets = np.flatnonzero(
        np.isfinite(errors[:-1]) & np.isfinite(errors[1:]) & (np.sign(errors[:-1]) != np.sign(errors[1:]))
    )
    if not brackets.size:
        raise CalibrationError(
            "target resonance frequency outside the searched delay range",
            details={"delay_bracket_s": list(DELAY_BRACKET_S), "target_hz": target_hz},
        )
    i = int(brackets[0])
    delay = optimize.brentq(frequency_error, delays[i], delays[i + 1], xtol=1e-12, rtol=1e-10)
    gain = _gain_for_peak(chain, plant_pole_hz, delay, target_db)
    calibrated = chain.model_copy(update={"overall_gain": gain, "loop_delay_s": delay})
    logger.info("servo calibrated", overall_gain=gain, loop_delay_s=delay, plant_pole_hz=plant_pole_hz)
    return calibrated


@lru_cache(maxsize=32)
def _cached_calibration(shape_json: str, plant_pole_hz: float, target_db: float, target_hz: float) -> Tuple[float, float]:
    chain = ServoChain.model_validate_json(shape_json)
    calibrated = calibrate_chain(chain, plant_pole_hz, target_db, target_hz)
    return calibrated.overall_gain, calibrated.loop_delay_s


def ensure_calibrated(chain: ServoChain, plant_pole_hz: float) -> ServoChain:
    """Fill in a missing overall_gain / loop_delay_s from the (cached) calibration."""
    if chain.is_calibrated:
        return chain
    settings = get_settings()
    if chain.overall_gain is not None:
        # gain fixed by the user: only the delay comes from the calibration
        shape = chain.model_copy(update={"overall_gain": None})
    else:
        shape = chain
    gain, delay = _cached_calibration(
        shape.model_dump_json(),
        plant_pole_hz,
        settings.CALIBRATION_TARGET_PEAK_DB,
        settings.CALIBRATION_TARGET_FREQUENCY_HZ,
    )
    update = {"loop_delay_s": chain.loop_delay_s if chain.loop_delay_s is not None else delay}
    update["overall_gain"] = chain.overall_gain if chain.overall_gain is not None else gain
    return chain.model_copy(update=update)


def discretize(zpk: Zpk, sample_rate_hz: float, prewarp_hz: Optional[float] = None) -> np.ndarray:
    """Bilinear transform to second-order sections, optionally prewarped at one frequency."""
    zeros, poles, gain = zpk
    if len(zeros) == 0 and len(poles) == 0:
        return np.array([[gain, 0.0, 0.0, 1.0, 0.0, 0.0]])
    fs = sample_rate_hz
    if prewarp_hz is not None:
        w = _two_pi(prewarp_hz)
        fs = w / (2.0 * math.tan(w / (2.0 * sample_rate_hz)))
    z, p, k = signal.bilinear_zpk(zeros, poles, gain, fs)
    return signal.zpk2sos(z, p, k, pairing="nearest")


class DiscreteStage:
    """Single-owner state of one discretized filter; one sample stream per instance."""

    def __init__(self, sos: np.ndarray, sample_rate_hz: float, limit: float = math.inf):
        self.sos = np.ascontiguousarray(sos, dtype=float)
        self.sample_rate_hz = sample_rate_hz
        self.limit = limit
        self.state = np.zeros((self.sos.shape[0], 2))

    @classmethod
    def from_stage(cls, stage: FilterStage, sample_rate_hz: float, limit: float = math.inf) -> "DiscreteStage":
        for corner in stage.corners_hz:
            if sample_rate_hz < 10.0 * corner:
                raise UndersampledError(
                    "sample rate below ten times a stage corner",
                    details={"sample_rate_hz": sample_rate_hz, "corner_hz": corner},
                )
        return cls(discretize(stage_zpk(stage), sample_rate_hz), sample_rate_hz, limit)

    def step(self, sample: float) -> float:
        if not math.isfinite(sample):
            raise ValidationError("non-finite filter input", details={"sample": repr(sample)})
        return sos_step(self.sos, self.state, 0, self.sos.shape[0], float(sample), self.limit)

    def reset(self) -> None:
        self.state[:] = 0.0

    def frequency_response(self, frequency_hz: ArrayLike) -> np.ndarray:
        _, response = signal.sosfreqz(self.sos, worN=np.atleast_1d(frequency_hz), fs=self.sample_rate_hz)
        return response


def step_filter(stage_state: DiscreteStage, input_sample: float, sample_rate_hz: float) -> float:
    if sample_rate_hz != stage_state.sample_rate_hz:
        raise ValidationError(
            "sample rate differs from the one the stage was discretized at",
            details={"sample_rate_hz": sample_rate_hz, "stage_rate_hz": stage_state.sample_rate_hz},
        )
    return stage_state.step(input_sample)


@dataclass(frozen=True)
class LoopFilters:
    """Discrete realization of a calibrated chain for the time-domain kernel."""

    fast_sos: np.ndarray
    fast_starts: np.ndarray
    fast_counts: np.ndarray
    actuator_sos: np.ndarray
    pzt_sos: Optional[np.ndarray]
    tec_sos: Optional[np.ndarray]
    plant_sos: np.ndarray
    delay_samples: int
    realized_delay_s: float


def discretize_chain(chain: ServoChain, plant_pole_hz: float, sample_rate_hz: float) -> LoopFilters:
    if not chain.is_calibrated:
        raise CalibrationError("chain must be calibrated before discretization")

    sections: List[np.ndarray] = []
    starts, counts = [], []
    offset = 0
    for stage in chain.fast_stages:
        sos = DiscreteStage.from_stage(stage, sample_rate_hz).sos
        sections.append(sos)
        starts.append(offset)
        counts.append(sos.shape[0])
        offset += sos.shape[0]
    fast_sos = np.vstack(sections) if sections else np.zeros((0, 6))

    actuator_sos = discretize(
        actuator_zpk(chain), sample_rate_hz,
        prewarp_hz=chain.actuator_resonance_hz if chain.actuator_q else None,
    )
    pzt_sos = DiscreteStage.from_stage(chain.pzt_stage, sample_rate_hz).sos if chain.pzt_stage else None
    tec_sos = DiscreteStage.from_stage(chain.tec_stage, sample_rate_hz).sos if chain.tec_stage else None
    plant_sos = discretize(plant_zpk(plant_pole_hz), sample_rate_hz)

    delay_samples = max(1, int(round(chain.loop_delay_s * sample_rate_hz)))
    return LoopFilters(
        fast_sos=fast_sos,
        fast_starts=np.array(starts, dtype=np.int64),
        fast_counts=np.array(counts, dtype=np.int64),
        actuator_sos=actuator_sos,
        pzt_sos=pzt_sos,
        tec_sos=tec_sos,
        plant_sos=plant_sos,
        delay_samples=delay_samples,
        realized_delay_s=delay_samples / sample_rate_hz,
    )
