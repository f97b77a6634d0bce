import math
from dataclasses import dataclass

import numpy as np
import structlog
from scipy import optimize

from ringsim.core import constants
from ringsim.core.exceptions import AliasingError, ValidationError
from ringsim.models.results import NoiseBudget
from ringsim.models.schemas import ModulationConfig, NoiseConfig, ServoChain, SidebandPowers
from ringsim.services.pdh import discriminator_slope, sideband_powers
from ringsim.services.servo import open_loop_transfer, plant_zpk, zpk_response
from ringsim.utils.rng import Stream, stream_generator

logger = structlog.get_logger(__name__)


def reflected_power(powers: SidebandPowers) -> float:
    """Mean power on the reflection photodiode, 2*Ps + Pc/4."""
    return 2.0 * powers.sideband_w + powers.carrier_w / 4.0


def noise_budget(powers: SidebandPowers, linewidth_hz: float, optical_frequency_hz: float) -> NoiseBudget:
    if powers.carrier_w <= 0 or powers.sideband_w <= 0:
        raise ValidationError(
            "noise budget needs non-zero carrier and sideband power",
            details={"carrier_w": powers.carrier_w, "sideband_w": powers.sideband_w},
        )
    if not (linewidth_hz > 0 and optical_frequency_hz > 0):
        raise ValidationError(
            "linewidth and optical frequency must be positive",
            details={"linewidth_hz": linewidth_hz, "optical_frequency_hz": optical_frequency_hz},
        )

    p_r = reflected_power(powers)
    shot_power = math.sqrt(2.0 * constants.PLANCK * optical_frequency_hz * p_r)
    slope = discriminator_slope(powers, linewidth_hz)
    shot_freq = shot_power / slope

    return NoiseBudget(
        reflected_power_w=p_r,
        shot_power_psd_w_per_rthz=shot_power,
        shot_freq_psd_hz_per_rthz=shot_freq,
        shot_birefringence_psd_per_rthz=shot_freq / optical_frequency_hz,
        discriminator_w_per_hz=slope,
        carrier_power_w=powers.carrier_w,
        sideband_power_w=powers.sideband_w,
        linewidth_hz=linewidth_hz,
        optical_frequency_hz=optical_frequency_hz,
        quoted_shot_birefringence_psd_per_rthz=constants.QUOTED_SHOT_BIREFRINGENCE_PSD,
    )


def shot_freq_psd_closed_form(powers: SidebandPowers, linewidth_hz: float, optical_frequency_hz: float) -> float:
    """gamma_sn_nu written out directly instead of going through D."""
    h_nu = constants.PLANCK * optical_frequency_hz
    ratio = (powers.carrier_w / 4.0 + 2.0 * powers.sideband_w) / (powers.carrier_w * powers.sideband_w)
    return math.sqrt(h_nu) / (2.0 * math.sqrt(2.0)) * linewidth_hz * math.sqrt(ratio)


def optimal_mod_depth(
    input_power_w: float,
    linewidth_hz: float,
    optical_frequency_hz: float,
    bounds: tuple = (0.05, 1.95),
) -> float:
    """Modulation depth minimizing the shot-noise frequency limit at fixed input power."""
    def limit(beta: float) -> float:
        mod = ModulationConfig(mod_depth_rad=beta, input_power_w=input_power_w)
        return noise_budget(sideband_powers(mod), linewidth_hz, optical_frequency_hz).shot_freq_psd_hz_per_rthz

    result = optimize.minimize_scalar(limit, bounds=bounds, method="bounded", options={"xatol": 1e-8})
    return float(result.x)


@dataclass(frozen=True)
class NoiseSamples:
    laser_frequency_hz: np.ndarray
    detector_cw_w: np.ndarray
    detector_ccw_w: np.ndarray


def flicker_frequency_noise(
    rng: np.random.Generator, count: int, sample_rate_hz: float, level: float, corner_hz: float
) -> np.ndarray:
    """FFT-shaped noise with one-sided PSD level^2 * corner/f (no DC)."""
    white = rng.standard_normal(count)
    spectrum = np.fft.rfft(white)
    frequencies = np.fft.rfftfreq(count, d=1.0 / sample_rate_hz)
    shape = np.zeros_like(frequencies)
    shape[1:] = np.sqrt(level ** 2 * corner_hz / frequencies[1:] * sample_rate_hz / 2.0)
    return np.fft.irfft(spectrum * shape, n=count)


def sample_noise(
    config: NoiseConfig,
    count: int,
    sample_rate_hz: float,
    shot_power_psd_w_per_rthz: float = 0.0,
) -> NoiseSamples:
    """Laser frequency noise (Hz) and detector noise (W) for one run.

    Each source draws from its own stream keyed by config.rng_seed.
    """
    if count <= 0:
        raise ValidationError("sample count must be positive", details={"count": count})
    if not sample_rate_hz > 0:
        raise ValidationError("sample rate must be positive", details={"sample_rate_hz": sample_rate_hz})
    nyquist = sample_rate_hz / 2.0
    for line in config.technical_lines:
        if line.frequency_hz >= nyquist:
            raise AliasingError(
                "technical line at or above the Nyquist frequency",
                details={"frequency_hz": line.frequency_hz, "nyquist_hz": nyquist},
            )

    seed = config.rng_seed
    laser = np.zeros(count)

    if config.technical_lines:
        time = np.arange(count) / sample_rate_hz
        phases = stream_generator(seed, Stream.LASER_LINES).uniform(0.0, 2.0 * math.pi, len(config.technical_lines))
        for line, phase in zip(config.technical_lines, phases):
            if line.amplitude_hz > 0:
                laser += math.sqrt(2.0) * line.amplitude_hz * np.cos(2.0 * math.pi * line.frequency_hz * time + phase)

    if config.flicker_level_hz_per_rthz > 0:
        laser += flicker_frequency_noise(
            stream_generator(seed, Stream.LASER_FLICKER),
            count,
            sample_rate_hz,
            config.flicker_level_hz_per_rthz,
            config.flicker_corner_hz,
        )

    if config.white_frequency_noise_hz_per_rthz > 0:
        sigma = config.white_frequency_noise_hz_per_rthz * math.sqrt(nyquist)
        laser += stream_generator(seed, Stream.LASER_WHITE).normal(0.0, sigma, count)

    if config.shot_noise_enabled and shot_power_psd_w_per_rthz > 0:
        sigma = shot_power_psd_w_per_rthz * math.sqrt(nyquist)
        cw = stream_generator(seed, Stream.DETECTOR_CW).normal(0.0, sigma, count)
        ccw = stream_generator(seed, Stream.DETECTOR_CCW).normal(0.0, sigma, count)
    else:
        cw = np.zeros(count)
        ccw = np.zeros(count)

    return NoiseSamples(laser_frequency_hz=laser, detector_cw_w=cw, detector_ccw_w=ccw)


def illustrative_noise_profile(
    chain: ServoChain,
    plant_pole_hz: float,
    budget: NoiseBudget,
    gap_db: float = 15.0,
    reference_frequency_hz: float = 300.0,
    flicker_corner_hz: float = 1.0,
    rng_seed: int = 0,
) -> NoiseConfig:
    """Shot noise plus a flicker laser noise level placing the in-loop residual
    ``gap_db`` above the shot floor of ccw_error at the reference frequency.

    Illustrative only; the level is not a measured laser property.
    """
    if reference_frequency_hz <= 0:
        raise ValidationError("reference frequency must be positive")
    loop = abs(1.0 + open_loop_transfer(chain, plant_pole_hz, reference_frequency_hz))
    cavity = abs(complex(zpk_response(plant_zpk(plant_pole_hz), np.asarray(reference_frequency_hz))))
    target = 10.0 ** (gap_db / 20.0) * budget.shot_freq_psd_hz_per_rthz
    level = target * loop / cavity * math.sqrt(reference_frequency_hz / flicker_corner_hz)
    logger.info(
        "illustrative noise profile",
        flicker_level_hz_per_rthz=level,
        gap_db=gap_db,
        reference_frequency_hz=reference_frequency_hz,
    )
    return NoiseConfig(
        shot_noise_enabled=True,
        flicker_corner_hz=flicker_corner_hz,
        flicker_level_hz_per_rthz=level,
        rng_seed=rng_seed,
    )

