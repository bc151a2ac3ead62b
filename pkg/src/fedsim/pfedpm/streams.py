"""Named pseudo-random streams derived from one master seed.

Every consumer of randomness draws from its own Philox stream keyed by
``(stream id, client id)`` under the master seed, so adding clients or
reordering work never perturbs the draws of anybody else. Draws every client
shares, such as the initial body weights, use client 0.
"""
from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Stream identifiers, recorded in the run manifest."""

    PARTITION = 1
    POOL = 2
    BODY = 3
    DECISION = 4
    RELATION = 5
    SHUFFLE = 6
    RELATION_SHUFFLE = 7
    BLOBS = 8


def generator(seed: int, stream: Stream, client: int = 0) -> np.random.Generator:
    """Returns the generator of ``stream`` for ``client`` under the master ``seed``."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(client)))
    return np.random.Generator(np.random.Philox(sequence))


def stream_ids() -> dict[str, int]:
    """Stream name to id mapping, as written in run manifests."""
    return {s.name.lower(): int(s) for s in Stream}
