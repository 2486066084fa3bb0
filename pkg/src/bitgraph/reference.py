"""Deterministic synthetic datasets for tests and benchmarks.

Points are drawn from a seeded Gaussian mixture (component means spread
a few standard deviations apart), so the data has the clusterable
structure the pipeline is built for while staying fully reproducible.
The real vectors are kept alongside the binarized codes; queries come
from the same mixture but use their own label space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binarizer import HyperplaneCoder, fit
from .bitcodes import BinaryDataset, RealDataset
from .errors import UsageError

MIXTURE_SALT = 0x6E4C0DE


@dataclass(frozen=True)
class ReferenceSet:
    codes: BinaryDataset
    reals: RealDataset
    query_codes: np.ndarray  # (queries, words) packed
    query_reals: np.ndarray  # (queries, dim) float32
    coder: HyperplaneCoder


def generate_reference(
    n: int,
    queries: int,
    d_bits: int = 128,
    dim: int = 64,
    components: int = 64,
    scale: float = 2.0,
    seed: int = 0,
) -> ReferenceSet:
    """Mixture-of-Gaussians points plus held-out queries, binarized."""
    if n < 1 or queries < 0:
        raise UsageError("need at least one point and a non-negative query count")
    if components < 1:
        raise UsageError("components must be at least 1")
    rng = np.random.default_rng([seed, MIXTURE_SALT])
    means = rng.standard_normal((components, dim)) * scale

    def draw(count: int) -> np.ndarray:
        picks = rng.integers(0, components, size=count)
        return (means[picks] + rng.standard_normal((count, dim))).astype(np.float32)

    vectors = draw(n)
    query_vectors = draw(queries)

    coder = fit(vectors, d_bits, seed)
    labels = np.arange(n, dtype=np.uint64)
    reals = RealDataset(labels, vectors)
    codes = coder.encode_dataset(reals)
    query_codes = coder.encode(query_vectors)
    return ReferenceSet(codes, reals, query_codes, query_vectors, coder)
