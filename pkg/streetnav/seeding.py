"""Named, reproducible random substreams derived from one root seed."""
import hashlib

import numpy as np

from .exceptions import DomainError

SEED_LIMIT = 2**64


def stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """
    Philox generator for the substream `name` of `seed`; the same pair always
    yields the same sequence, independent of any other stream's draws
    """
    if not 0 <= seed < SEED_LIMIT:
        raise DomainError(f"seed must be in [0, 2**64), got {seed}")
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.Philox(sequence))
