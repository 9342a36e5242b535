"""Name-keyed deterministic random streams.

Every (seed, tensor name, constituent index) triple gets its own stream, so
the draws for a tensor do not depend on which other tensors were processed
before it, or in what order.

Key derivation: ``k = splitmix64(splitmix64(seed ^ fnv1a64(name)) + index)``.
The 64-bit key seeds numpy's PCG64 bit generator, and uniforms come from
``Generator.random`` (53-bit doubles in [0, 1)).
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (the state is advanced first)."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, name: str, index: int = 0) -> int:
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    inner = splitmix64((seed & _MASK) ^ fnv1a64(name))
    return splitmix64((inner + index) & _MASK)


def stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Fresh generator for one (seed, name, index) key."""
    return np.random.Generator(np.random.PCG64(stream_key(seed, name, index)))


def child_seed(seed: int, label: str) -> int:
    """Derive an independent 63-bit seed, e.g. one per repeat or per cell."""
    return stream_key(seed, label) >> 1
