"""Deterministic random streams keyed by experiment coordinates.

Every draw in a simulation comes from a stream identified by
``(base_seed, purpose, repeat, reach)``. Per-step randomness is drawn as a
block of ``T_max`` rows at the start of a reach, so row ``t`` always belongs
to step ``t`` no matter how the closed loop evolved before it.
"""
from __future__ import annotations

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    ENCODER = 1
    GOAL = 2
    NEURAL = 3
    ASSIST = 4
    MISMATCH = 5
    MIXING = 6
    CALIBRATION = 7
    STREAM = 8


def stream(base_seed: int, purpose: Purpose, repeat: int = 0, reach: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence([int(base_seed), int(purpose), int(repeat), int(reach)])
    return np.random.Generator(np.random.PCG64(seq))
