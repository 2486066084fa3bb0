"""Random-hyperplane binarizer: real vectors to locality-preserving bit codes.

Each output bit is the sign of the dot product between a fixed random
unit-norm direction and the mean-centered input vector. Nearby vectors (in
angle around the sample mean) disagree on few bits, so Hamming distance over
the codes tracks angular distance over the reals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitcodes import RealDataset, BinaryDataset, pack_bits
from .errors import FormatError, UsageError

CODER_MAGIC = b"BDC\x01"
_CODER_HEADER = struct.Struct("<QII")  # seed, dim, d_bits


@dataclass(frozen=True)
class HyperplaneCoder:
    """Fitted binarizer: sample mean plus d_bits unit-norm directions."""

    seed: int
    mean: np.ndarray  # (dim,) float32
    planes: np.ndarray  # (d_bits, dim) float32

    def __post_init__(self):
        object.__setattr__(self, "mean", np.ascontiguousarray(self.mean, dtype=np.float32))
        object.__setattr__(self, "planes", np.ascontiguousarray(self.planes, dtype=np.float32))
        if self.planes.ndim != 2 or self.planes.shape[1] != self.mean.shape[0]:
            raise UsageError("planes must be (d_bits, dim) matching the mean")
        if self.d_bits % 64 != 0 or self.d_bits == 0:
            raise UsageError(f"d_bits must be a positive multiple of 64, got {self.d_bits}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def d_bits(self) -> int:
        return self.planes.shape[0]

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        """Encode (n, dim) float vectors into (n, d_bits // 64) packed codes.

        Bit i is 1 iff dot(plane_i, v - mean) >= 0.
        """
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float32))
        if vectors.shape[1] != self.dim:
            raise UsageError(f"expected dim {self.dim}, got {vectors.shape[1]}")
        projections = (vectors - self.mean) @ self.planes.T
        return pack_bits((projections >= 0.0).astype(np.uint8))

    def encode_dataset(self, data: RealDataset) -> BinaryDataset:
        return BinaryDataset(data.labels.copy(), self.encode(data.vectors))


def fit(vectors: np.ndarray, d_bits: int, seed: int) -> HyperplaneCoder:
    """Fit a coder: mean from the sample, directions from the seeded RNG.

    The directions are i.i.d. Gaussian rows normalized to unit length;
    normalization never changes a sign so it is cosmetic for encoding but
    keeps the stored coder well-conditioned.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise UsageError("fit requires a non-empty (n, dim) sample")
    if d_bits <= 0 or d_bits % 64 != 0:
        raise UsageError(f"d_bits must be a positive multiple of 64, got {d_bits}")
    mean = vectors.mean(axis=0, dtype=np.float64).astype(np.float32)
    rng = np.random.default_rng([seed, 0xB17C0DE])
    planes = rng.standard_normal((d_bits, vectors.shape[1]), dtype=np.float64)
    planes /= np.linalg.norm(planes, axis=1, keepdims=True)
    return HyperplaneCoder(seed=seed, mean=mean, planes=planes.astype(np.float32))


def write_coder(coder: HyperplaneCoder, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(CODER_MAGIC)
        f.write(_CODER_HEADER.pack(coder.seed, coder.dim, coder.d_bits))
        f.write(coder.mean.astype("<f4").tobytes())
        f.write(coder.planes.astype("<f4").tobytes())


def read_coder(path: str | Path) -> HyperplaneCoder:
    raw = Path(path).read_bytes()
    if raw[:4] != CODER_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CODER_MAGIC!r}")
    body = raw[4:]
    if len(body) < _CODER_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    seed, dim, d_bits = _CODER_HEADER.unpack_from(body)
    body = body[_CODER_HEADER.size:]
    expected = 4 * dim + 4 * d_bits * dim
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} body bytes, found {len(body)}")
    mean = np.frombuffer(body, dtype="<f4", count=dim)
    planes = np.frombuffer(body, dtype="<f4", offset=4 * dim).reshape(d_bits, dim)
    try:
        return HyperplaneCoder(seed=seed, mean=mean.copy(), planes=planes.copy())
    except UsageError as e:
        raise FormatError(f"{path}: {e}") from e
