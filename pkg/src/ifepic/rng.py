"""Counter-based random streams for reproducible parallel particle loading.

Every random draw in a simulation comes from a Philox stream whose 256-bit
counter block encodes (context, species, step, entity). Streams keyed by
*global* structure (face cell, cell slab, facet cell) rather than by rank,
so the same config+seed produces the same particles under any domain
decomposition and any worker scheduling.
"""

from __future__ import annotations

import numpy as np

# context tags; each (context, species, step, entity) tuple owns one stream
CTX_PRELOAD = 1
CTX_INJECT = 2
CTX_EMIT = 3
CTX_MISC = 9

_MASK64 = (1 << 64) - 1


def stream(master_seed: int, context: int, species: int = 0, step: int = 0,
           entity: int = 0) -> np.random.Generator:
    """Return the Generator for one (context, species, step, entity) stream.

    Distinct tag tuples get disjoint Philox counter blocks, so streams are
    independent by construction (no seeding collisions possible as long as
    fewer than 2**64 values are drawn per stream).
    """
    key = np.array([master_seed & _MASK64, 0x9E3779B97F4A7C15], dtype=np.uint64)
    counter = np.array(
        [0,
         ((context & 0xFFFF) << 48) | (species & 0xFFFFFFFF),
         step & _MASK64,
         entity & _MASK64],
        dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
