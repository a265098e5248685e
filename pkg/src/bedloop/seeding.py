"""Deterministic named RNG streams derived from one master seed.

Labels are hashed into spawn keys so every component (rollouts, per-stage
inference, per-stage refinement, environments) consumes an independent
stream; adding or skipping one component never shifts another's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    key = tuple(zlib.crc32(str(label).encode()) for label in labels)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def rng_stream(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *labels))
