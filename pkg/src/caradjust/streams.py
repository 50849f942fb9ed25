"""Reproducible random-number substreams.

Every stochastic component draws from a generator keyed by a root seed plus
an integer path, e.g. ``substream(seed, rep, DATA)``. Streams derived this
way are independent of each other and of execution order, so Monte Carlo
replications can be scheduled on any number of workers without changing the
result. numpy's ``SeedSequence`` spawn keys provide the counter-based
derivation.
"""

from __future__ import annotations

import secrets

import numpy as np

# Channel indices used by the simulation harness.
DATA = 0
ASSIGN = 1
TUNING = 2


def substream(seed: int, *path: int) -> np.random.Generator:
    """Return a Generator for the stream identified by ``(seed, *path)``.

    The same ``(seed, path)`` always yields the same stream; distinct paths
    yield statistically independent streams.
    """
    if not all(isinstance(p, (int, np.integer)) and p >= 0 for p in path):
        raise ValueError(f"stream path must be non-negative integers, got {path!r}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)


def fresh_seed() -> int:
    """Draw a root seed from OS entropy (used when the caller gave none)."""
    return secrets.randbits(63)
