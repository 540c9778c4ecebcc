"""Seeded random streams.

All randomness in the library flows from a single integer seed through
Philox, a counter-based 64-bit generator with a portable bit-stream.
Independent sub-streams are derived from the seed via SeedSequence spawn
keys, so an instance stream and an init stream never overlap and a run is
reproducible from (seed, config) alone.
"""

import numpy as np

# Spawn-key ids for the named sub-streams.
STREAM_INSTANCE = 0  # problem data (targets, design matrices)
STREAM_INIT = 1      # factor initialization
STREAM_PROPS = 2     # property/invariant sampling
STREAM_PROBE = 3     # timing and finite-difference probes


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """Generator for sub-stream `stream_id` of `seed`."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(seq))
