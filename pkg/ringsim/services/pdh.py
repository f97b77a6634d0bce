import math
from typing import Optional, Sequence, Union

import numpy as np
import structlog
from scipy import optimize, special

from ringsim.core.exceptions import ValidationError
from ringsim.models.schemas import CavityParams, ModulationConfig, SidebandPowers
from ringsim.services.cavity import reflection_coefficient

logger = structlog.get_logger(__name__)

# Below this ratio of modulation frequency to linewidth the sidebands
# are no longer fully reflected and the slope formula loses accuracy
WELL_RESOLVED_RATIO = 100.0


def sideband_powers(mod: ModulationConfig) -> SidebandPowers:
    beta = mod.mod_depth_rad
    return SidebandPowers(
        carrier_w=special.j0(beta) ** 2 * mod.input_power_w,
        sideband_w=special.j1(beta) ** 2 * mod.input_power_w,
    )


def discriminator_slope(powers: SidebandPowers, linewidth_hz: float) -> float:
    """D = 4*sqrt(Pc*Ps)/linewidth, in W/Hz."""
    if not (math.isfinite(linewidth_hz) and linewidth_hz > 0):
        raise ValidationError("linewidth must be positive", details={"linewidth_hz": linewidth_hz})
    return 4.0 * math.sqrt(powers.carrier_w * powers.sideband_w) / linewidth_hz


def capture_range(mod: ModulationConfig) -> float:
    """Half-width of the detuning interval where the error keeps its restoring sign."""
    return mod.mod_frequency_hz


def _beat_term(params: CavityParams, mod: ModulationConfig, detunings: np.ndarray) -> np.ndarray:
    omega = mod.mod_frequency_hz
    center = reflection_coefficient(params, detunings)
    upper = reflection_coefficient(params, detunings + omega)
    lower = reflection_coefficient(params, detunings - omega)
    return center * np.conj(upper) - np.conj(center) * lower


def raw_error_signal(
    params: CavityParams,
    mod: ModulationConfig,
    detunings: Union[Sequence[float], np.ndarray],
    demod_phase_rad: Optional[float] = None,
) -> np.ndarray:
    """Unnormalized demodulated reflection, 2*sqrt(Pc*Ps)*Im[chi*e^{i phi}]."""
    values = np.atleast_1d(np.asarray(detunings, dtype=float))
    if demod_phase_rad is None:
        demod_phase_rad = 0.0 if mod.demod_phase_rad is None else mod.demod_phase_rad
    powers = sideband_powers(mod)
    chi = _beat_term(params, mod, values)
    return 2.0 * math.sqrt(powers.carrier_w * powers.sideband_w) * np.imag(chi * np.exp(1j * demod_phase_rad))


def auto_demod_phase(params: CavityParams, mod: ModulationConfig, points: int = 801) -> float:
    """Demodulation phase maximizing the peak-to-peak error over one linewidth either side."""
    grid = np.linspace(-params.linewidth_hz, params.linewidth_hz, points)
    chi = _beat_term(params, mod, grid)

    def negative_span(phase: float) -> float:
        signal = np.imag(chi * np.exp(1j * phase))
        return -float(np.ptp(signal))

    result = optimize.minimize_scalar(
        negative_span, bounds=(-math.pi / 2, math.pi / 2), method="bounded",
        options={"xatol": 1e-10},
    )
    return float(result.x)


def _resolved_phase(params: CavityParams, mod: ModulationConfig) -> float:
    if mod.demod_phase_rad is not None:
        return mod.demod_phase_rad
    return auto_demod_phase(params, mod)


def error_signal_sweep(
    params: CavityParams,
    mod: ModulationConfig,
    detunings: Union[Sequence[float], np.ndarray],
) -> np.ndarray:
    """PDH error in watts, scaled so its slope at resonance equals D.

    Positive detuning (laser above resonance) gives positive error.
    """
    values = np.asarray(detunings, dtype=float)
    if values.size == 0:
        raise ValidationError("detuning list is empty")
    if not np.all(np.isfinite(values)):
        raise ValidationError("detuning must be finite")

    if mod.mod_frequency_hz < WELL_RESOLVED_RATIO * params.linewidth_hz:
        logger.warning(
            "modulation frequency not well above the linewidth",
            mod_frequency_hz=mod.mod_frequency_hz,
            linewidth_hz=params.linewidth_hz,
        )

    phase = _resolved_phase(params, mod)
    slope_d = discriminator_slope(sideband_powers(mod), params.linewidth_hz)
    raw_slope = resonance_slope(params, mod, phase)
    if slope_d == 0 or raw_slope == 0:
        return np.zeros_like(values)
    return raw_error_signal(params, mod, values, phase) * (slope_d / raw_slope)


def resonance_slope(params: CavityParams, mod: ModulationConfig, demod_phase_rad: float) -> float:
    """Central-difference slope of the raw error at resonance, W/Hz."""
    step = params.linewidth_hz * 1e-4
    ends = raw_error_signal(params, mod, [-step, step], demod_phase_rad)
    return float((ends[1] - ends[0]) / (2.0 * step))
