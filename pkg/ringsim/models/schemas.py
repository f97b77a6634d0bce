import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from ringsim.core import constants
from ringsim.core.exceptions import ScenarioError


class StrictModel(BaseModel):
    """Base for every scenario-facing model: no unknown keys, no inf/nan."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)


class StageKind(str, Enum):
    """Enumeration of servo filter stage kinds."""
    PI = "pi"
    PID = "pid"
    PURE_GAIN = "pure_gain"


class CavityConfig(StrictModel):
    arm_length_m: float = Field(constants.ARM_LENGTH_M, gt=0, description="Length of one ring arm")
    mirror_count: int = Field(constants.MIRROR_COUNT, ge=3, description="Number of ring mirrors")
    finesse: float = Field(constants.FINESSE, gt=1, description="Cavity finesse")
    vacuum_wavelength_m: float = Field(constants.VACUUM_WAVELENGTH_M, gt=0, description="Laser wavelength")
    anisotropy_detuning_hz: float = Field(
        0.0,
        description="Resonance offset of the ccw direction relative to cw (the measurand)"
    )
    coupler_loss_fraction: float = Field(
        0.5,
        gt=0,
        lt=1,
        description="Share of the round-trip loss due to input coupler transmission (0.5 = matched)"
    )

    @property
    def perimeter_m(self) -> float:
        return self.mirror_count * self.arm_length_m


class CavityParams(StrictModel):
    """Spectral quantities derived from a CavityConfig."""
    fsr_hz: float = Field(..., gt=0)
    linewidth_hz: float = Field(..., gt=0)
    photon_lifetime_s: float = Field(..., gt=0)
    roundtrip_amplitude: float = Field(..., gt=0, lt=1)
    finesse: float = Field(..., gt=1)
    optical_frequency_hz: float = Field(..., gt=0)
    perimeter_m: float = Field(..., gt=0)
    anisotropy_detuning_hz: float = 0.0
    coupler_loss_fraction: float = Field(0.5, gt=0, lt=1)
    quoted_fsr_hz: float = constants.QUOTED_FSR_HZ

    @property
    def cavity_pole_hz(self) -> float:
        """Half width of the resonance; the single pole of the PDH response."""
        return self.linewidth_hz / 2.0


class ModulationConfig(StrictModel):
    mod_frequency_hz: float = Field(constants.MOD_FREQUENCY_HZ, gt=0, description="PDH modulation frequency")
    mod_depth_rad: float = Field(constants.MOD_DEPTH_RAD, ge=0, description="Phase modulation depth")
    # 10 mW in the carrier at beta = 1
    input_power_w: float = Field(0.0170786, ge=0, description="Optical power before the phase modulator")
    demod_phase_rad: Optional[float] = Field(
        None,
        description="Demodulation phase; None selects the amplitude-maximizing phase"
    )


class SidebandPowers(StrictModel):
    carrier_w: float = Field(..., ge=0)
    sideband_w: float = Field(..., ge=0)


class FilterStage(StrictModel):
    kind: StageKind = StageKind.PI
    proportional_gain: float = Field(1.0, description="Dimensionless proportional gain")
    integrator_corner_hz: Optional[float] = Field(None, gt=0)
    differentiator_corner_hz: Optional[float] = Field(None, gt=0)
    derivative_rolloff: float = Field(
        10.0,
        gt=1,
        description="Double roll-off pole placed at this multiple of the differentiator corner"
    )

    @model_validator(mode="after")
    def check_corners(self) -> "FilterStage":
        if self.kind in (StageKind.PI, StageKind.PID) and self.integrator_corner_hz is None:
            raise ValueError(f"{self.kind.value} stage requires integrator_corner_hz")
        if self.kind == StageKind.PID and self.differentiator_corner_hz is None:
            raise ValueError("pid stage requires differentiator_corner_hz")
        if self.kind == StageKind.PURE_GAIN and (
            self.integrator_corner_hz is not None or self.differentiator_corner_hz is not None
        ):
            raise ValueError("pure_gain stage takes no corner frequencies")
        return self

    @property
    def corners_hz(self) -> List[float]:
        corners = []
        if self.integrator_corner_hz is not None:
            corners.append(self.integrator_corner_hz)
        if self.differentiator_corner_hz is not None:
            corners.append(self.differentiator_corner_hz)
            corners.append(self.differentiator_corner_hz * self.derivative_rolloff)
        return corners


def slow_stage_gain(integrator_corner_hz: float, damping_time_s: float) -> float:
    """Proportional gain giving a slow stage the requested damping time.

    A slow stage fed by the command of the faster one nulls that command
    with time constant (1 + Kp) / (Kp * w_i); solved for Kp.
    """
    wi = 2.0 * math.pi * integrator_corner_hz
    product = damping_time_s * wi
    if product <= 1.0:
        raise ValueError("damping time too short for this integrator corner")
    return 1.0 / (product - 1.0)


def default_fast_stages() -> List[FilterStage]:
    return [
        FilterStage(kind=StageKind.PI, proportional_gain=1.0, integrator_corner_hz=corner)
        for corner in constants.FAST_PI_CORNERS_HZ
    ]


def default_pzt_stage() -> FilterStage:
    return FilterStage(
        kind=StageKind.PID,
        proportional_gain=slow_stage_gain(constants.PZT_INTEGRATOR_HZ, constants.PZT_DAMPING_TIME_S),
        integrator_corner_hz=constants.PZT_INTEGRATOR_HZ,
        differentiator_corner_hz=constants.PZT_DIFFERENTIATOR_HZ,
    )


def default_tec_stage() -> FilterStage:
    return FilterStage(
        kind=StageKind.PID,
        proportional_gain=slow_stage_gain(constants.TEC_INTEGRATOR_HZ, constants.TEC_DAMPING_TIME_S),
        integrator_corner_hz=constants.TEC_INTEGRATOR_HZ,
        differentiator_corner_hz=constants.TEC_DIFFERENTIATOR_HZ,
    )


class ServoChain(StrictModel):
    fast_stages: List[FilterStage] = Field(default_factory=default_fast_stages)
    pzt_stage: Optional[FilterStage] = Field(default_factory=default_pzt_stage)
    tec_stage: Optional[FilterStage] = Field(default_factory=default_tec_stage)
    loop_delay_s: Optional[float] = Field(None, ge=0, description="Transport delay; None = calibrate")
    overall_gain: Optional[float] = Field(None, ge=0, description="Loop gain; None = calibrate")
    actuator_resonance_hz: float = Field(260e3, gt=0, description="AOM driver resonance")
    actuator_q: float = Field(3.0, ge=0, description="AOM driver quality factor; 0 disables")

    @model_validator(mode="after")
    def check_tec_needs_pzt(self) -> "ServoChain":
        if self.tec_stage is not None and self.pzt_stage is None:
            raise ValueError("tec_stage is fed by the pzt command and requires a pzt_stage")
        return self

    @property
    def is_calibrated(self) -> bool:
        return self.loop_delay_s is not None and self.overall_gain is not None


class TechnicalLine(StrictModel):
    frequency_hz: float = Field(..., gt=0)
    amplitude_hz: float = Field(..., ge=0, description="RMS laser frequency excursion")


class NoiseConfig(StrictModel):
    shot_noise_enabled: bool = False
    technical_lines: List[TechnicalLine] = Field(default_factory=list)
    flicker_corner_hz: float = Field(1.0, gt=0)
    flicker_level_hz_per_rthz: float = Field(0.0, ge=0, description="Frequency noise density at the corner")
    white_frequency_noise_hz_per_rthz: float = Field(0.0, ge=0)
    rng_seed: int = Field(0, ge=0, lt=2 ** 64)

    @property
    def any_enabled(self) -> bool:
        return (
            self.shot_noise_enabled
            or any(line.amplitude_hz > 0 for line in self.technical_lines)
            or self.flicker_level_hz_per_rthz > 0
            or self.white_frequency_noise_hz_per_rthz > 0
        )


class InjectionConfig(StrictModel):
    drive_amplitude_v: float = Field(1.0, ge=0, description="bEOM drive amplitude V_FM")
    drive_frequency_hz: float = Field(constants.INJECTION_FREQUENCIES_HZ[0], ge=0, description="f_FM")
    eom_depth_rad_per_v: float = Field(constants.EOM_DEPTH_RAD_PER_V, ge=0, description="bEOM depth")

    @property
    def fm_amplitude_hz(self) -> float:
        """Frequency excursion of the phase modulation, beta * V * f."""
        return self.eom_depth_rad_per_v * self.drive_amplitude_v * self.drive_frequency_hz


class RingdownConfig(StrictModel):
    duration_s: Optional[float] = Field(None, gt=0, description="None = six photon lifetimes")
    sample_rate_hz: Optional[float] = Field(None, gt=0, description="None = 1000 samples per lifetime")
    initial_power_w: float = Field(1e-3, gt=0)
    relative_noise: float = Field(0.0, ge=0)


class Scenario(StrictModel):
    cavity: CavityConfig = Field(default_factory=CavityConfig)
    modulation: ModulationConfig = Field(default_factory=ModulationConfig)
    servo: ServoChain = Field(default_factory=ServoChain)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    injection: Optional[InjectionConfig] = None
    ringdown: RingdownConfig = Field(default_factory=RingdownConfig)
    duration_s: float = Field(1.0, gt=0)
    sample_rate_hz: float = Field(2e6, gt=0)
    aom_range_hz: float = Field(2e6, gt=0)
    pzt_range_hz: float = Field(50e6, gt=0)
    tec_range_hz: float = Field(10e9, gt=0)
    initial_detuning_hz: float = 0.0
    servo_enabled: bool = True
    decimation: int = Field(1, ge=1)
    lock_loss_dwell_s: float = Field(1e-3, gt=0)

    @field_validator("sample_rate_hz")
    @classmethod
    def check_sample_rate(cls, v: float) -> float:
        if v < 1e3:
            raise ValueError("sample_rate_hz is far too low for a loop simulation")
        return v

    @property
    def sample_count(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def record_rate_hz(self) -> float:
        return self.sample_rate_hz / self.decimation

    def with_injection(self, injection: Optional[InjectionConfig]) -> "Scenario":
        return self.model_copy(update={"injection": injection})

    def with_seed(self, seed: int) -> "Scenario":
        noise = self.noise.model_copy(update={"rng_seed": seed})
        return self.model_copy(update={"noise": noise})


class LockInConfig(StrictModel):
    reference_frequency_hz: float = Field(..., gt=0)
    time_constant_s: float = Field(..., gt=0)
    filter_order: int = Field(2, ge=1)

    @model_validator(mode="after")
    def check_time_constant(self) -> "LockInConfig":
        if self.time_constant_s <= 1.0 / self.reference_frequency_hz:
            raise ValueError("time_constant_s must exceed one reference period")
        return self

    @classmethod
    def for_reference(cls, reference_frequency_hz: float, periods: float = 100.0,
                      filter_order: int = 2) -> "LockInConfig":
        """Default settings: time constant of 100 reference periods, order 2."""
        return cls(
            reference_frequency_hz=reference_frequency_hz,
            time_constant_s=periods / reference_frequency_hz,
            filter_order=filter_order,
        )




def validate_model(model_cls, data, section: str = ""):
    """Validate ``data`` into ``model_cls``, reporting failures as ScenarioError.

    Each pydantic error is flattened to ``section.key: message`` so the
    offending key is named in the error report.
    """
    if isinstance(data, model_cls):
        return data
    try:
        return model_cls.model_validate(data)
    except PydanticValidationError as e:
        problems = []
        for error in e.errors():
            location = ".".join(str(part) for part in (section, *error["loc"]) if part != "")
            problems.append(f"{location or model_cls.__name__}: {error['msg']}")
        raise ScenarioError(
            "; ".join(problems),
            details={"section": section or None, "errors": problems},
        )
