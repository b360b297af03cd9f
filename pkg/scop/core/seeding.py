"""Named random streams.

Every stage draws from ``stream(seed, "stage", ...)`` so re-running one stage
in isolation reproduces the numbers it drew inside a full run.
"""

import hashlib

import numpy as np


def _token(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return int.from_bytes(hashlib.sha256(str(part).encode("utf-8")).digest()[:4], "little")


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_token(n) for n in names)])


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))
