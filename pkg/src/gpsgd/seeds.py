"""Seed derivation for reproducible randomness.

All randomness flows from one root seed. Component streams are derived as a
pure function of (root, component tag, repetition index) using Philox, a
counter-based generator, so any stream can be reconstructed without replaying
the others. Per-iteration minibatch draws are likewise a pure function of
(stream seed, iteration).
"""

from __future__ import annotations

import zlib

import numpy as np

_ITERATION_TAG = 0x6D696E69  # distinguishes iteration streams from component streams


def component_seed(root: int, tag: str, rep: int = 0) -> np.random.SeedSequence:
    """Derive the seed sequence for (root seed, component tag, repetition)."""
    return np.random.SeedSequence([int(root), zlib.crc32(tag.encode()), int(rep)])


def component_rng(root: int, tag: str, rep: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(component_seed(root, tag, rep)))


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    """Generator for one optimizer iteration; pure function of (seed, k)."""
    ss = np.random.SeedSequence([int(seed), _ITERATION_TAG, int(iteration)])
    return np.random.Generator(np.random.Philox(ss))


def derived_seed(root: int, tag: str, rep: int = 0) -> int:
    """Integer sub-seed for components that take a plain seed."""
    return int(component_seed(root, tag, rep).generate_state(1, np.uint64)[0])
