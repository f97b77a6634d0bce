from typing import Callable, Dict, NamedTuple

from ringsim.commands.context import CommandContext
from ringsim.commands.golden import run_golden
from ringsim.commands.loop import run_bode, run_lock, run_sense
from ringsim.commands.optics import run_budget, run_ringdown, run_sweep


class Command(NamedTuple):
    handler: Callable[[CommandContext], None]
    help: str


COMMANDS: Dict[str, Command] = {
    "ringdown": Command(run_ringdown, "synthesize a ring-down trace and fit the finesse"),
    "sweep": Command(run_sweep, "PDH error signal versus detuning"),
    "bode": Command(run_bode, "calibrated open-loop response and loop report"),
    "lock": Command(run_lock, "time-domain closed-loop run"),
    "sense": Command(run_sense, "sensitivity scan over injection amplitudes"),
    "budget": Command(run_budget, "shot-noise budget"),
    "golden": Command(run_golden, "check the quoted apparatus figures"),
}

__all__ = ["COMMANDS", "Command", "CommandContext"]
