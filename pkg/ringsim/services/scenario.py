"""Scenario files: TOML sections mapped onto the domain models.

Every section is validated by a model that forbids unknown keys, so a
misspelled key is an error rather than a silently ignored default.
"""
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional, Union

import structlog
from pydantic import Field, model_validator

from ringsim.core import constants
from ringsim.core.exceptions import ScenarioError
from ringsim.models.schemas import (
    CavityConfig,
    FilterStage,
    InjectionConfig,
    ModulationConfig,
    NoiseConfig,
    RingdownConfig,
    Scenario,
    ServoChain,
    StageKind,
    StrictModel,
    TechnicalLine,
    slow_stage_gain,
    validate_model,
)
from ringsim.services.cavity import derive_params
from ringsim.services.noise import illustrative_noise_profile, noise_budget
from ringsim.services.pdh import sideband_powers
from ringsim.services.servo import ensure_calibrated

logger = structlog.get_logger(__name__)


class FastSection(StrictModel):
    integrator_corners_hz: List[float] = Field(default_factory=lambda: list(constants.FAST_PI_CORNERS_HZ))
    proportional_gains: Optional[List[float]] = None

    @model_validator(mode="after")
    def check_lengths(self) -> "FastSection":
        if self.proportional_gains is not None and len(self.proportional_gains) != len(self.integrator_corners_hz):
            raise ValueError("proportional_gains and integrator_corners_hz differ in length")
        return self

    def stages(self) -> List[FilterStage]:
        gains = self.proportional_gains or [1.0] * len(self.integrator_corners_hz)
        return [
            FilterStage(kind=StageKind.PI, proportional_gain=gain, integrator_corner_hz=corner)
            for corner, gain in zip(self.integrator_corners_hz, gains)
        ]


class SlowSection(StrictModel):
    """A PZT or TEC stage. Without an explicit gain, the gain follows from damping_time_s."""

    enabled: bool = True
    kind: StageKind = StageKind.PID
    proportional_gain: Optional[float] = None
    integrator_corner_hz: Optional[float] = Field(None, gt=0)
    differentiator_corner_hz: Optional[float] = Field(None, gt=0)
    derivative_rolloff: float = Field(10.0, gt=1)
    damping_time_s: Optional[float] = Field(None, gt=0)

    def stage(self, default: FilterStage, default_damping_s: float) -> Optional[FilterStage]:
        if not self.enabled:
            return None
        integrator = self.integrator_corner_hz or default.integrator_corner_hz
        differentiator = self.differentiator_corner_hz or default.differentiator_corner_hz
        if self.kind == StageKind.PI:
            differentiator = None
        elif self.kind == StageKind.PURE_GAIN:
            integrator = differentiator = None

        gain = self.proportional_gain
        if gain is None:
            if integrator is None:
                gain = 1.0
            else:
                try:
                    gain = slow_stage_gain(integrator, self.damping_time_s or default_damping_s)
                except ValueError as e:
                    raise ScenarioError(str(e), details={"section": "servo"}) from e
        return FilterStage(
            kind=self.kind,
            proportional_gain=gain,
            integrator_corner_hz=integrator,
            differentiator_corner_hz=differentiator,
            derivative_rolloff=self.derivative_rolloff,
        )


class ServoSection(StrictModel):
    overall_gain: Optional[float] = Field(None, ge=0)
    loop_delay_s: Optional[float] = Field(None, ge=0)
    actuator_resonance_hz: float = Field(260e3, gt=0)
    actuator_q: float = Field(3.0, ge=0)
    fast: FastSection = Field(default_factory=FastSection)
    pzt: SlowSection = Field(default_factory=SlowSection)
    tec: SlowSection = Field(default_factory=SlowSection)

    def chain(self) -> ServoChain:
        defaults = ServoChain()
        return validate_model(ServoChain, {
            "fast_stages": self.fast.stages(),
            "pzt_stage": self.pzt.stage(defaults.pzt_stage, constants.PZT_DAMPING_TIME_S),
            "tec_stage": self.tec.stage(defaults.tec_stage, constants.TEC_DAMPING_TIME_S),
            "loop_delay_s": self.loop_delay_s,
            "overall_gain": self.overall_gain,
            "actuator_resonance_hz": self.actuator_resonance_hz,
            "actuator_q": self.actuator_q,
        }, "servo")


class NoiseSection(StrictModel):
    shot_noise_enabled: bool = False
    flicker_corner_hz: float = Field(1.0, gt=0)
    flicker_level_hz_per_rthz: float = Field(0.0, ge=0)
    white_frequency_noise_hz_per_rthz: float = Field(0.0, ge=0)
    line_frequencies_hz: List[float] = Field(default_factory=list)
    line_amplitudes_hz: List[float] = Field(default_factory=list)
    # replaces the flicker level with the illustrative profile
    illustrative_profile: bool = False
    illustrative_gap_db: float = 15.0
    illustrative_reference_hz: float = Field(300.0, gt=0)

    @model_validator(mode="after")
    def check_lines(self) -> "NoiseSection":
        if len(self.line_frequencies_hz) != len(self.line_amplitudes_hz):
            raise ValueError("line_frequencies_hz and line_amplitudes_hz differ in length")
        return self

    def config(self, seed: int) -> NoiseConfig:
        return NoiseConfig(
            shot_noise_enabled=self.shot_noise_enabled,
            technical_lines=[
                TechnicalLine(frequency_hz=f, amplitude_hz=a)
                for f, a in zip(self.line_frequencies_hz, self.line_amplitudes_hz)
            ],
            flicker_corner_hz=self.flicker_corner_hz,
            flicker_level_hz_per_rthz=self.flicker_level_hz_per_rthz,
            white_frequency_noise_hz_per_rthz=self.white_frequency_noise_hz_per_rthz,
            rng_seed=seed,
        )


class RunSection(StrictModel):
    duration_s: float = Field(1.0, gt=0)
    sample_rate_hz: float = Field(2e6, gt=0)
    aom_range_hz: float = Field(2e6, gt=0)
    pzt_range_hz: float = Field(50e6, gt=0)
    tec_range_hz: float = Field(10e9, gt=0)
    initial_detuning_hz: float = 0.0
    servo_enabled: bool = True
    decimation: int = Field(1, ge=1)
    lock_loss_dwell_s: float = Field(1e-3, gt=0)
    seed: int = Field(0, ge=0, lt=2 ** 64)


class RingdownSection(RingdownConfig):
    scan_finesse: List[float] = Field(default_factory=list)
    scan_seed_count: int = Field(100, ge=1)
    scan_relative_noise: float = Field(0.01, ge=0)


class SweepSection(StrictModel):
    span_hz: Optional[float] = Field(None, gt=0, description="Full span; None = three modulation frequencies")
    point_count: int = Field(2001, ge=2)


class ScanSection(StrictModel):
    drive_amplitudes_v: List[float] = Field(
        default_factory=lambda: [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0]
    )
    lockin_time_constant_s: Optional[float] = Field(None, gt=0)
    lockin_filter_order: int = Field(2, ge=1)
    extrapolation_time_s: float = Field(constants.QUOTED_MEASUREMENT_TIME_S, gt=0)


class BudgetSection(StrictModel):
    """Direct operating point for the noise budget; unset values come from the scenario."""

    carrier_power_w: Optional[float] = Field(None, gt=0)
    sideband_power_w: Optional[float] = Field(None, gt=0)
    linewidth_hz: Optional[float] = Field(None, gt=0)


SECTIONS: Dict[str, type] = {
    "cavity": CavityConfig,
    "modulation": ModulationConfig,
    "servo": ServoSection,
    "noise": NoiseSection,
    "injection": InjectionConfig,
    "run": RunSection,
    "ringdown": RingdownSection,
    "sweep": SweepSection,
    "scan": ScanSection,
    "budget": BudgetSection,
}


@dataclass(frozen=True)
class ScenarioFile:
    """A parsed scenario: the simulation model plus the per-subcommand sections."""

    scenario: Scenario
    path: Optional[Path] = None
    present: FrozenSet[str] = frozenset()
    noise: NoiseSection = field(default_factory=NoiseSection)
    ringdown: RingdownSection = field(default_factory=RingdownSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    scan: ScanSection = field(default_factory=ScanSection)
    budget: BudgetSection = field(default_factory=BudgetSection)

    @property
    def seed(self) -> int:
        return self.scenario.noise.rng_seed

    def require(self, *sections: str) -> None:
        missing = [name for name in sections if name not in self.present]
        if missing:
            raise ScenarioError(
                f"missing section [{missing[0]}]",
                details={"section": missing[0], "missing": missing},
            )

    def with_seed(self, seed: int) -> "ScenarioFile":
        return replace(self, scenario=self.scenario.with_seed(seed))


def _with_illustrative_noise(scenario: Scenario, section: NoiseSection) -> Scenario:
    params = derive_params(scenario.cavity)
    chain = ensure_calibrated(scenario.servo, params.cavity_pole_hz)
    budget = noise_budget(sideband_powers(scenario.modulation), params.linewidth_hz, params.optical_frequency_hz)
    profile = illustrative_noise_profile(
        chain,
        params.cavity_pole_hz,
        budget,
        gap_db=section.illustrative_gap_db,
        reference_frequency_hz=section.illustrative_reference_hz,
        flicker_corner_hz=section.flicker_corner_hz,
        rng_seed=scenario.noise.rng_seed,
    )
    noise = scenario.noise.model_copy(update={
        "shot_noise_enabled": True,
        "flicker_level_hz_per_rthz": profile.flicker_level_hz_per_rthz,
    })
    return scenario.model_copy(update={"noise": noise})


def parse_scenario(data: Mapping[str, Any], path: Optional[Path] = None) -> ScenarioFile:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ScenarioError(
            f"unknown section [{unknown[0]}]",
            details={"section": unknown[0], "allowed": sorted(SECTIONS)},
        )
    for name, value in data.items():
        if not isinstance(value, Mapping):
            raise ScenarioError(f"[{name}] must be a table", details={"section": name})

    sections = {name: validate_model(model, data.get(name, {}), name) for name, model in SECTIONS.items()}
    run: RunSection = sections["run"]
    servo: ServoSection = sections["servo"]
    noise: NoiseSection = sections["noise"]
    ringdown: RingdownSection = sections["ringdown"]

    scenario = validate_model(Scenario, {
        "cavity": sections["cavity"],
        "modulation": sections["modulation"],
        "servo": servo.chain(),
        "noise": noise.config(run.seed),
        "injection": sections["injection"] if "injection" in data else None,
        "ringdown": RingdownConfig(**ringdown.model_dump(include=set(RingdownConfig.model_fields))),
        **run.model_dump(exclude={"seed"}),
    }, "run")
    if noise.illustrative_profile:
        scenario = _with_illustrative_noise(scenario, noise)

    return ScenarioFile(
        scenario=scenario,
        path=path,
        present=frozenset(data),
        noise=noise,
        ringdown=ringdown,
        sweep=sections["sweep"],
        scan=sections["scan"],
        budget=sections["budget"],
    )


def load_scenario(path: Union[str, Path]) -> ScenarioFile:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as e:
        raise ScenarioError(f"scenario file not found: {path}", details={"path": str(path)}) from e
    except tomllib.TOMLDecodeError as e:
        raise ScenarioError(f"scenario file is not valid TOML: {e}", details={"path": str(path)}) from e
    logger.info("scenario loaded", path=str(path), sections=sorted(data))
    return parse_scenario(data, path)


def resolved_defaults(scenario_file: ScenarioFile) -> Dict[str, Any]:
    """The fully resolved configuration, with calibrated servo values filled in."""
    scenario = scenario_file.scenario
    params = derive_params(scenario.cavity)
    chain = ensure_calibrated(scenario.servo, params.cavity_pole_hz)
    resolved = scenario.model_copy(update={"servo": chain}).model_dump(mode="json")
    resolved["derived"] = params.model_dump(mode="json")
    resolved["sweep"] = scenario_file.sweep.model_dump(mode="json")
    resolved["scan"] = scenario_file.scan.model_dump(mode="json")
    resolved["budget"] = scenario_file.budget.model_dump(mode="json")
    resolved["ringdown"] = scenario_file.ringdown.model_dump(mode="json")
    return resolved


def default_scenario() -> ScenarioFile:
    """Built-in defaults, treated as a file that declares every section except [injection]."""
    parsed = parse_scenario({})
    return replace(parsed, present=frozenset(set(SECTIONS) - {"injection"}))
