import numpy as np
import pytest


def random_codes(rng: np.random.Generator, n: int, d_bits: int) -> np.ndarray:
    """Uniform random packed codes, (n, d_bits // 64) uint64."""
    words = d_bits // 64
    raw = rng.integers(0, 2**63, size=(n, words), dtype=np.int64).astype(np.uint64)
    # integers() tops out below 2**63; fold a random sign bit back in
    sign = rng.integers(0, 2, size=(n, words), dtype=np.int64).astype(np.uint64)
    return raw | (sign << np.uint64(63))


def hamming_per_bit(a: np.ndarray, b: np.ndarray) -> int:
    """Per-bit reference Hamming distance for packed uint64 codes."""
    total = 0
    for word_a, word_b in zip(a.tolist(), b.tolist()):
        x = word_a ^ word_b
        for bit in range(64):
            total += (x >> bit) & 1
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
