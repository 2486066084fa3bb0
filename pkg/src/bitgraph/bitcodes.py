"""Packed binary codes: bit packing, Hamming kernels, and dataset file IO.

A code of ``d_bits`` bits (d_bits must be a positive multiple of 64) is
stored as ``d_bits // 64`` little-endian uint64 words; bit ``i`` of the code
is bit ``i % 64`` of word ``i // 64``. On disk the same code occupies
``d_bits // 8`` bytes with bit 0 in the lowest bit of the first byte, which
is exactly the little-endian byte image of the word array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

WORD_BITS = 64

CODE_MAGIC = b"BDG\x01"
REAL_MAGIC = b"BDR\x01"

_CODE_HEADER = struct.Struct("<QI")  # n, d_bits
_REAL_HEADER = struct.Struct("<QI")  # n, dim


def words_for_bits(d_bits: int) -> int:
    """Number of uint64 words backing a ``d_bits``-bit code."""
    if d_bits <= 0 or d_bits % WORD_BITS != 0:
        raise UsageError(f"d_bits must be a positive multiple of {WORD_BITS}, got {d_bits}")
    return d_bits // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (n, d_bits) 0/1 array into (n, d_bits // 64) uint64 words."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 2:
        raise UsageError("pack_bits expects a 2-D array")
    words = words_for_bits(bits.shape[1])
    if bits.shape[0] == 0:
        return np.empty((0, words), dtype=np.uint64)
    packed = np.packbits(bits, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").reshape(bits.shape[0], -1)

def unpack_bits(codes: np.ndarray) -> np.ndarray:
    """Inverse of pack_bits: (n, w) uint64 words to (n, 64 * w) 0/1 uint8."""
    codes = np.ascontiguousarray(codes, dtype="<u8")
    as_bytes = codes.view(np.uint8).reshape(codes.shape[0], -1)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two packed codes (1-D word arrays)."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise UsageError(f"width mismatch: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum(dtype=np.int64))


def hamming_to_many(query: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Hamming distances from one packed code to each row of ``codes``."""
    query = np.asarray(query, dtype=np.uint64)
    if query.shape != codes.shape[1:]:
        raise UsageError(f"width mismatch: {query.shape} vs {codes.shape[1:]}")
    return np.bitwise_count(codes ^ query).sum(axis=1, dtype=np.int32)


def hamming_cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense (len(a), len(b)) int32 Hamming distance matrix.

    Loops over words so the largest temporary is one (len(a), len(b))
    plane; callers are expected to block the rows of ``a`` when the
    product gets large.
    """
    if a.shape[1] != b.shape[1]:
        raise UsageError(f"width mismatch: {a.shape[1]} vs {b.shape[1]} words")
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.int32)
    for w in range(a.shape[1]):
        out += np.bitwise_count(a[:, w, None] ^ b[None, :, w])
    return out


def hamming_cross_gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """hamming_cross via a +/-1 matmul; much faster for large blocks.

    hamming(x, y) == (d - <s_x, s_y>) / 2 with s in {-1, +1}^d. The dot
    products are exact in float32 for d <= 2**22, so the result is
    bit-identical to the XOR kernel.
    """
    d_bits = a.shape[1] * WORD_BITS
    sa = unpack_bits(a).astype(np.float32) * 2.0 - 1.0
    sb = unpack_bits(b).astype(np.float32) * 2.0 - 1.0
    dot = sa @ sb.T
    return ((d_bits - dot) * 0.5).astype(np.int32)


def l2_squared(a: np.ndarray, b: np.ndarray) -> float:
    """Squared euclidean distance, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def l2_squared_to_many(query: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Squared euclidean distances from one vector to each row of ``vectors``."""
    diff = vectors.astype(np.float64) - np.asarray(query, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def _check_labels(labels: np.ndarray) -> None:
    if labels.ndim != 1:
        raise UsageError("labels must be 1-D")
    if len(np.unique(labels)) != len(labels):
        raise UsageError("labels must be unique")


@dataclass(frozen=True)
class BinaryDataset:
    """Labeled packed codes; row order reflects the source (file) order."""

    labels: np.ndarray  # (n,) uint64
    codes: np.ndarray  # (n, d_bits // 64) uint64

    def __post_init__(self):
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.uint64))
        object.__setattr__(self, "codes", np.ascontiguousarray(self.codes, dtype=np.uint64))
        if self.codes.ndim != 2 or self.codes.shape[0] != self.labels.shape[0]:
            raise UsageError("codes must be (n, words) aligned with labels")
        _check_labels(self.labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def d_bits(self) -> int:
        return self.codes.shape[1] * WORD_BITS

    def code_bytes(self) -> np.ndarray:
        """Row-major (n, d_bits // 8) uint8 view of the packed codes."""
        return self.codes.view(np.uint8).reshape(self.n, -1)


@dataclass(frozen=True)
class RealDataset:
    """Labeled float32 vectors; row order reflects the source order."""

    labels: np.ndarray  # (n,) uint64
    vectors: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        object.__setattr__(self, "labels", np.ascontiguousarray(self.labels, dtype=np.uint64))
        object.__setattr__(self, "vectors", np.ascontiguousarray(self.vectors, dtype=np.float32))
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.labels.shape[0]:
            raise UsageError("vectors must be (n, dim) aligned with labels")
        _check_labels(self.labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def check_aligned(codes: BinaryDataset, reals: RealDataset) -> None:
    """Require the two datasets to cover the same label set."""
    if codes.n != reals.n or not np.array_equal(
        np.sort(codes.labels), np.sort(reals.labels)
    ):
        raise UsageError("code and real-vector datasets cover different label sets")


class CodeTable:
    """Label -> packed-code lookup over a BinaryDataset."""

    def __init__(self, data: BinaryDataset):
        order = np.argsort(data.labels, kind="stable")
        self._labels = data.labels[order]
        self._codes = data.codes[order]
        self.d_bits = data.d_bits

    def rows_for(self, labels: np.ndarray) -> np.ndarray:
        """Row indices (into the sorted table) of the given labels."""
        labels = np.asarray(labels, dtype=np.uint64)
        if len(self._labels) == 0:
            if len(labels):
                raise UsageError(f"label {int(labels[0])} has no stored code")
            return np.empty(0, dtype=np.int64)
        pos = np.searchsorted(self._labels, labels)
        bad = (pos >= len(self._labels)) | (self._labels[np.minimum(pos, len(self._labels) - 1)] != labels)
        if bad.any():
            missing = labels[bad][0]
            raise UsageError(f"label {int(missing)} has no stored code")
        return pos

    def codes_for(self, labels: np.ndarray) -> np.ndarray:
        return self._codes[self.rows_for(labels)]


# ---------------------------------------------------------------------------
# File IO. Both formats are little-endian, strict on length, and round-trip
# byte-identically (read preserves row order, write emits rows as stored).
# ---------------------------------------------------------------------------


def _read_exact(path: Path, magic: bytes, header: struct.Struct):
    raw = Path(path).read_bytes()
    if len(raw) < len(magic) or raw[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    body = raw[len(magic):]
    if len(body) < header.size:
        raise FormatError(f"{path}: truncated header")
    return header.unpack_from(body), body[header.size:]


def write_codes(data: BinaryDataset, path: str | Path) -> None:
    n = data.n
    row_bytes = data.d_bits // 8
    rows = np.empty(n, dtype=np.dtype([("label", "<u8"), ("code", "u1", (row_bytes,))]))
    rows["label"] = data.labels
    rows["code"] = data.code_bytes()
    with open(path, "wb") as f:
        f.write(CODE_MAGIC)
        f.write(_CODE_HEADER.pack(n, data.d_bits))
        f.write(rows.tobytes())


def read_codes(path: str | Path) -> BinaryDataset:
    (n, d_bits), body = _read_exact(Path(path), CODE_MAGIC, _CODE_HEADER)
    if d_bits <= 0 or d_bits % WORD_BITS != 0:
        raise FormatError(f"{path}: d_bits={d_bits} is not a positive multiple of {WORD_BITS}")
    row_bytes = d_bits // 8
    expected = n * (8 + row_bytes)
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} row bytes, found {len(body)}")
    rows = np.frombuffer(body, dtype=np.dtype([("label", "<u8"), ("code", "u1", (row_bytes,))]))
    codes = np.ascontiguousarray(rows["code"]).view("<u8").reshape(n, -1)
    try:
        return BinaryDataset(rows["label"].copy(), codes.copy())
    except UsageError as e:
        raise FormatError(f"{path}: {e}") from e


def write_reals(data: RealDataset, path: str | Path) -> None:
    n = data.n
    rows = np.empty(n, dtype=np.dtype([("label", "<u8"), ("vec", "<f4", (data.dim,))]))
    rows["label"] = data.labels
    rows["vec"] = data.vectors
    with open(path, "wb") as f:
        f.write(REAL_MAGIC)
        f.write(_REAL_HEADER.pack(n, data.dim))
        f.write(rows.tobytes())


def read_reals(path: str | Path) -> RealDataset:
    (n, dim), body = _read_exact(Path(path), REAL_MAGIC, _REAL_HEADER)
    if dim <= 0:
        raise FormatError(f"{path}: non-positive dimension {dim}")
    expected = n * (8 + 4 * dim)
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} row bytes, found {len(body)}")
    rows = np.frombuffer(body, dtype=np.dtype([("label", "<u8"), ("vec", "<f4", (dim,))]))
    try:
        return RealDataset(rows["label"].copy(), rows["vec"].copy())
    except UsageError as e:
        raise FormatError(f"{path}: {e}") from e
