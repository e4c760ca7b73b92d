"""
Seed streams
SplitMix64 generator (scalar and vectorized) plus helpers that derive
independent 64-bit seeds from structured keys.
"""
from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX_1 = 0xBF58476D1CE4E5B9
_MIX_2 = 0x94D049BB133111EB
_TWO_POW_NEG_53 = 2.0 ** -53


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX_1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX_2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def next_float(self) -> float:
        """Uniform in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _TWO_POW_NEG_53

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_float()

    def next_below(self, n: int) -> int:
        return self.next_u64() % n


def splitmix64_block(seed: int, n: int) -> np.ndarray:
    """
    The first n outputs of SplitMix64(seed) as a uint64 array.
    Element i equals the (i+1)-th call of SplitMix64(seed).next_u64().
    """
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = steps * np.uint64(GOLDEN_GAMMA) + np.uint64(seed & MASK64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_2)
    return z ^ (z >> np.uint64(31))


def open_unit_uniforms(seed: int, n: int) -> np.ndarray:
    """n uniforms in (0, 1]: u = 1 - (x >> 11) * 2^-53."""
    bits = splitmix64_block(seed, n) >> np.uint64(11)
    return 1.0 - bits.astype(np.float64) * _TWO_POW_NEG_53


def derive_seed(*parts: int) -> int:
    """Fold integer keys into one 64-bit seed; order matters."""
    h = 0
    for part in parts:
        h = mix64((h ^ (part & MASK64)) + GOLDEN_GAMMA)
    return h
