"""Deterministic random-stream derivation.

Every random draw in the artifact comes from a PCG64 generator keyed by
(seed, path) through numpy's SeedSequence spawn mechanism. The path names the
consumer (e.g. ("key", 3) for the fourth obfuscation key, ("init", "blk0.wq")
for a parameter tensor, ("mask", step, block, site) for a dropout mask), so
independent consumers get independent streams and the same (seed, path) always
reproduces the same values within one build.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"substream path parts must be int or str, got {type(part)!r}")


def substream(seed: int, *path) -> np.random.Generator:
    """Independent PCG64 generator for the given seed and path."""
    spawn_key = tuple(_key_part(p) for p in path)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & _MASK64, spawn_key=spawn_key)))
