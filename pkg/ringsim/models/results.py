from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class ReportModel(BaseModel):
    """Base for computed results. Every numeric key carries its unit suffix."""

    model_config = ConfigDict(frozen=True)


@dataclass(frozen=True)
class Trace:
    """Multichannel series on a uniform time grid.

    Channels are stored read-only, so a finished trace can be handed to
    other threads.
    """

    sample_rate_hz: float
    channels: Mapping[str, np.ndarray]
    start_time_s: float = 0.0
    units: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        frozen: Dict[str, np.ndarray] = {}
        length = None
        for name, values in self.channels.items():
            array = np.array(values, dtype=float)
            if array.ndim != 1:
                raise ValueError(f"channel {name} is not one-dimensional")
            if length is None:
                length = array.size
            elif array.size != length:
                raise ValueError(f"channel {name} has {array.size} samples, expected {length}")
            array.flags.writeable = False
            frozen[name] = array
        object.__setattr__(self, "channels", frozen)

    def __len__(self) -> int:
        for values in self.channels.values():
            return values.size
        return 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def __contains__(self, name: str) -> bool:
        return name in self.channels

    def __iter__(self) -> Iterator[str]:
        return iter(self.channels)

    @property
    def names(self) -> List[str]:
        return list(self.channels)

    @property
    def time_step_s(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def time_s(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self)) / self.sample_rate_hz

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def tail_from(self, time_s: float) -> "Trace":
        """Samples at or after ``time_s``."""
        start = int(np.ceil((time_s - self.start_time_s) * self.sample_rate_hz - 1e-9))
        start = min(max(start, 0), len(self))
        return Trace(
            sample_rate_hz=self.sample_rate_hz,
            channels={name: values[start:] for name, values in self.channels.items()},
            start_time_s=self.start_time_s + start / self.sample_rate_hz,
            units=dict(self.units),
        )


class RingdownFit(ReportModel):
    tau_s: float = Field(..., description="Fitted photon lifetime")
    finesse_dimless: float = Field(..., description="Finesse recovered as 2*pi*fsr*tau")
    loglinear_tau_s: float = Field(..., description="Lifetime from the weighted log-linear fit alone")
    initial_power_w: float
    residual_rms_w: float
    fsr_hz: float
    sample_count: int


class FinesseScanEntry(ReportModel):
    finesse_dimless: float
    seed_count: int
    mean_relative_error_dimless: float
    max_relative_error_dimless: float


class LoopReport(ReportModel):
    unity_gain_frequency_hz: float
    gain_margin_db: Optional[float] = Field(None, description="None when the phase never crosses -180 deg")
    phase_margin_deg: float
    resonance_frequency_hz: float
    resonance_peak_db: float
    phase_crossover_frequency_hz: Optional[float] = None
    stable: bool
    overall_gain_dimless: float
    loop_delay_s: float
    plant_pole_hz: float


class NoiseBudget(ReportModel):
    reflected_power_w: float
    shot_power_psd_w_per_rthz: float
    shot_freq_psd_hz_per_rthz: float
    shot_birefringence_psd_per_rthz: float
    discriminator_w_per_hz: float
    carrier_power_w: float
    sideband_power_w: float
    linewidth_hz: float
    optical_frequency_hz: float
    quoted_shot_birefringence_psd_per_rthz: float


class RunReport(ReportModel):
    locked: bool
    time_of_failure_s: Optional[float] = None
    residual_rms_cw_detuning_hz: float
    mean_cw_error_w: float
    mean_ccw_error_w: float
    mean_aom_cmd_hz: float
    mean_pzt_cmd_hz: float
    mean_tec_cmd_hz: float
    overall_gain_dimless: float
    requested_loop_delay_s: float
    realized_loop_delay_s: float
    delay_samples_count: int
    delay_rounding_s: float
    discriminator_w_per_hz: float
    duration_s: float
    sample_rate_hz: float
    decimation_count: int
    rng_seed_u64: int


class AcquisitionReport(ReportModel):
    locked: bool
    initial_detuning_hz: float
    time_to_lock_s: Optional[float] = None
    residual_rms_detuning_hz: Optional[float] = None
    failure_reason: Optional[str] = None


class LockInResult(ReportModel):
    magnitude: float = Field(..., description="Amplitude of the tone, in channel units")
    phase_rad: float
    in_phase: float
    quadrature: float
    enbw_hz: float


class SensitivityPoint(ReportModel):
    drive_amplitude_v: float
    fm_amplitude_hz: float = Field(..., ge=0, description="Injected frequency excursion")
    lockin_reading_w: float = Field(..., ge=0)
    equivalent_frequency_hz: float = Field(..., ge=0, description="Lock-in reading divided by D")
    lockin_phase_rad: float = 0.0
    locked: bool = True
    time_of_failure_s: Optional[float] = None


class SensitivityScan(ReportModel):
    points: List[SensitivityPoint]
    slope_dimless: float
    intercept_dimless: float
    fitted_point_count: int
    floor_reading_hz: Optional[float] = None
    floor_equivalent_hz: Optional[float] = None
    floor_extrapolated_hz: Optional[float] = None
    extrapolation_time_s: float
    smallest_resolved_hz: Optional[float] = None
    measurement_time_s: float
    discriminator_w_per_hz: float
    lockin_reference_frequency_hz: float
    lockin_time_constant_s: float
    lockin_filter_order_count: int
    lockin_enbw_hz: float


class GoldenCheck(ReportModel):
    """One quoted figure against the computed one.

    Checks of different quantities share one row layout, so the unit travels
    in ``unit`` (the suffix the quantity carries in every other report) and
    ``expected_si`` / ``actual_si`` hold plain SI values in that unit.
    """

    name: str
    unit: str = Field(..., description="Unit suffix of the checked quantity, e.g. hz, s, w_per_hz")
    expected_si: float
    actual_si: float
    relative_error_dimless: float
    relative_tolerance_dimless: float
    passed: bool


class GoldenReport(ReportModel):
    checks: List[GoldenCheck]
    passed: bool


class RunManifest(ReportModel):
    subcommand: str
    scenario_path: Optional[str] = None
    rng_seed_u64: Optional[int] = None
    output_dir: str
    tool_version: str
    started_at: str
    wall_clock_s: float
    files: List[str] = Field(default_factory=list)


class ErrorReport(BaseModel):
    error: str = Field(..., description="Error code")
    message: str = Field(..., description="Human-readable error message")
    details: Optional[Dict[str, Any]] = Field(
        None,
        description="Additional error details"
    )

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "error": "invalid_scenario",
                "message": "missing section [servo]",
                "details": {"section": "servo"},
            }
        }
    )
