"""Counter-based per-trial seed derivation.

A trial's seed is a pure function of (master_seed, trial_index), so trial order,
worker count and scheduling never change what any trial samples.
"""

import torch

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int) -> int:
    """64-bit seed for stream `index` of `master_seed`."""
    if index < 0:
        raise ValueError(f"stream index must be non-negative, got {index}")
    return splitmix64(splitmix64(int(master_seed) & _MASK64) ^ (int(index) & _MASK64))


def make_generator(seed: int) -> torch.Generator:
    return torch.Generator(device="cpu").manual_seed(int(seed) & _MASK64)
