"""Deterministic seed derivation for candidate-level parallelism."""

MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int = 0) -> int:
    """Stateless splitmix64 stream: child seed for (master seed, index)."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return (z ^ (z >> 31)) & MASK64
