"""Reproducible random substreams keyed by (seed, *path).

Every stochastic routine in the package draws from a counter-based
generator derived from an experiment seed plus a structured key such as
``("task", "src03", "features")``.  Streams for distinct keys are
independent, so adding new tasks or new purposes never perturbs draws on
existing streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _component(part) -> int:
    """Map one key component to a stable uint32."""
    if isinstance(part, (bool, float)):
        part = repr(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def substream(seed: int, *path) -> np.random.Generator:
    """Independent counter-based generator for (seed, *path).

    Path components may be ints or strings; strings are hashed with a
    fixed algorithm so keys are stable across processes and platforms.
    """
    key = tuple(_component(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seed=ss))
