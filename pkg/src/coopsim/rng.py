"""Named deterministic random substreams.

Every stochastic stage draws from its own generator keyed by (root seed,
stage name, indices). Streams are independent of execution order and of how
work is split across processes, which is what makes --jobs a no-op for
outputs.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream"]


def substream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the named stage.

    Same (root_seed, name, indices) always yields the same stream; distinct
    names or indices yield statistically independent streams.
    """
    key = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
