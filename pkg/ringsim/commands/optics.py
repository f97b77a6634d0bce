"""Subcommands that need no servo: ringdown, sweep and budget."""
import numpy as np
import structlog

from ringsim.commands.context import CommandContext
from ringsim.models.schemas import SidebandPowers
from ringsim.services.cavity import (
    derive_params,
    finesse_scan,
    fit_ringdown,
    intracavity_buildup,
    reflection_coefficient,
    ringdown_trace,
)
from ringsim.services.noise import noise_budget, optimal_mod_depth, shot_freq_psd_closed_form
from ringsim.services.pdh import auto_demod_phase, error_signal_sweep, sideband_powers

logger = structlog.get_logger(__name__)


def run_ringdown(ctx: CommandContext) -> None:
    ctx.scenario_file.require("cavity")
    params = derive_params(ctx.scenario.cavity)
    config = ctx.scenario.ringdown
    trace = ringdown_trace(
        params,
        duration_s=config.duration_s,
        sample_rate_hz=config.sample_rate_hz,
        initial_power_w=config.initial_power_w,
        relative_noise=config.relative_noise,
        seed=ctx.scenario_file.seed,
    )
    fit = fit_ringdown(trace, params.fsr_hz)
    logger.info("ring-down fitted", finesse=fit.finesse_dimless, configured_finesse=params.finesse)

    ctx.write_trace("ringdown.csv", trace)
    ctx.write_json("ringdown_fit.json", {
        **fit.model_dump(mode="json"),
        "configured_finesse_dimless": params.finesse,
        "photon_lifetime_s": params.photon_lifetime_s,
        "relative_error_dimless": fit.finesse_dimless / params.finesse - 1.0,
    })

    section = ctx.scenario_file.ringdown
    if section.scan_finesse:
        seeds = [ctx.scenario_file.seed + i for i in range(section.scan_seed_count)]
        entries = finesse_scan(ctx.scenario.cavity, section.scan_finesse, seeds, section.scan_relative_noise)
        ctx.write_json("finesse_scan.json", {
            "entries": [entry.model_dump(mode="json") for entry in entries],
            "relative_noise_dimless": section.scan_relative_noise,
        })


def run_sweep(ctx: CommandContext) -> None:
    ctx.scenario_file.require("cavity", "modulation")
    params = derive_params(ctx.scenario.cavity)
    mod = ctx.scenario.modulation
    span = ctx.scenario_file.sweep.span_hz or 3.0 * mod.mod_frequency_hz
    detunings = np.linspace(-span / 2.0, span / 2.0, ctx.scenario_file.sweep.point_count)
    if mod.demod_phase_rad is None:
        mod = mod.model_copy(update={"demod_phase_rad": auto_demod_phase(params, mod)})

    ctx.write_csv(
        "sweep.csv",
        ["detuning_hz", "error_w", "reflected_fraction_dimless", "buildup_dimless"],
        [
            detunings,
            error_signal_sweep(params, mod, detunings),
            np.abs(reflection_coefficient(params, detunings)) ** 2,
            intracavity_buildup(params, detunings),
        ],
    )


def run_budget(ctx: CommandContext) -> None:
    scenario = ctx.scenario
    section = ctx.scenario_file.budget
    params = derive_params(scenario.cavity)
    derived = sideband_powers(scenario.modulation)
    powers = SidebandPowers(
        carrier_w=section.carrier_power_w or derived.carrier_w,
        sideband_w=section.sideband_power_w or derived.sideband_w,
    )
    linewidth = section.linewidth_hz or params.linewidth_hz
    budget = noise_budget(powers, linewidth, params.optical_frequency_hz)
    optimal_depth = None
    if scenario.modulation.input_power_w > 0:
        optimal_depth = optimal_mod_depth(scenario.modulation.input_power_w, linewidth, params.optical_frequency_hz)

    ctx.write_json("budget.json", {
        **budget.model_dump(mode="json"),
        "closed_form_shot_freq_psd_hz_per_rthz": shot_freq_psd_closed_form(
            powers, linewidth, params.optical_frequency_hz
        ),
        "optimal_mod_depth_rad": optimal_depth,
    })
