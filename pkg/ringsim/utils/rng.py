"""Seed-deterministic random streams.

Every stochastic source draws from its own Philox counter-based generator
keyed by (seed, stream), so sources never share state and a run can be
reproduced on any platform from its seed alone.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    LASER_LINES = 0
    LASER_FLICKER = 1
    LASER_WHITE = 2
    DETECTOR_CW = 3
    DETECTOR_CCW = 4
    RINGDOWN = 5


def stream_generator(seed: int, stream: Stream) -> np.random.Generator:
    sequence = np.random.SeedSequence([int(seed), int(stream)])
    return np.random.Generator(np.random.Philox(sequence))
