"""Counter-based seed derivation so every replication is reproducible on its own.

Replication ``r`` at sample size ``n`` under master seed ``s`` draws from
``PCG64(mix(s, n, r))`` where ``mix`` chains the splitmix64 finalizer:

    mix(s, n, r) = sm(sm(sm(s) ^ n) ^ r)

Sample size ``0`` is reserved for the normal-means limit experiment.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
LIMIT_N = 0


def splitmix64(x: int) -> int:
    """One splitmix64 step: golden-ratio increment followed by the finalizer."""
    z = (int(x) + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def derive_seed(master_seed: int, n: int, rep: int) -> int:
    """64-bit seed for replication ``rep`` at sample size ``n``.

    >>> derive_seed(1, 200, 0) == derive_seed(1, 200, 0)
    True
    >>> derive_seed(1, 200, 0) != derive_seed(1, 200, 1)
    True
    """
    h = splitmix64(int(master_seed) & MASK)
    h = splitmix64(h ^ (int(n) & MASK))
    return splitmix64(h ^ (int(rep) & MASK))


def rng_for(master_seed: int, n: int, rep: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, n, rep)))
