"""Keyed random substreams.

Every stochastic component draws from a generator keyed by an explicit path
(phase, step, component id) under one root seed. Components therefore consume
independent streams regardless of evaluation order or how many other
components exist, which is what makes runs reproducible across worker counts
and lets structurally different filters share the exact same noise.
"""

from __future__ import annotations

import numpy as np

# Phase tags used as the first path component after any run-level prefix.
PHASE_INIT = 1
PHASE_PREDICT = 2
PHASE_RESAMPLE = 3
PHASE_DEPLETE = 4
PHASE_OBSERVE = 5
PHASE_SCENARIO = 6
PHASE_DATA = 7


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Coerce an int or SeedSequence into a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def child_seed(seed, *path: int) -> np.random.SeedSequence:
    """Derive a child SeedSequence by appending `path` to the spawn key."""
    ss = as_seed_sequence(seed)
    key = tuple(int(p) for p in path)
    return np.random.SeedSequence(entropy=ss.entropy, spawn_key=tuple(ss.spawn_key) + key)


def substream(seed, *path: int) -> np.random.Generator:
    """A fresh Generator for the stream addressed by `path` under `seed`."""
    return np.random.default_rng(child_seed(seed, *path))
