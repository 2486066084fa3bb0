"""Binary k-means: cluster packed codes with centers constrained to bit vectors.

Assignment is an exhaustive Hamming argmin over the centers; the update step
sets each center bit by majority vote over its members (exact ties round to
1), which minimizes the summed Hamming distance to the members bit by bit.
The objective (total Hamming distance of points to their assigned centers)
is therefore non-increasing across full assign/update iterations.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bitcodes import BinaryDataset, hamming_cross, unpack_bits, pack_bits, WORD_BITS
from .errors import FormatError, UsageError

log = logging.getLogger(__name__)

CENTERS_MAGIC = b"BDK\x01"
_CENTERS_HEADER = struct.Struct("<II")  # m, d_bits

_ASSIGN_BLOCK = 4096
_COUNT_BLOCK = 65536


@dataclass(frozen=True)
class CenterSet:
    """Cluster centers as packed codes, plus member counts per center."""

    codes: np.ndarray  # (m, d_bits // 64) uint64
    member_counts: np.ndarray  # (m,) int64

    def __post_init__(self):
        object.__setattr__(self, "codes", np.ascontiguousarray(self.codes, dtype=np.uint64))
        object.__setattr__(
            self, "member_counts", np.ascontiguousarray(self.member_counts, dtype=np.int64)
        )
        if self.codes.ndim != 2 or self.member_counts.shape != (self.codes.shape[0],):
            raise UsageError("centers must be (m, words) with m member counts")

    @property
    def m(self) -> int:
        return self.codes.shape[0]

    @property
    def d_bits(self) -> int:
        return self.codes.shape[1] * WORD_BITS


@dataclass
class TrainResult:
    centers: CenterSet
    assignment: np.ndarray  # (n,) int32 over the training sample
    objectives: list[int] = field(default_factory=list)  # one per iteration
    converged: bool = False


def down_sample(data: BinaryDataset, m: int, seed: int, fraction: float | None = None) -> BinaryDataset:
    """Training subset: min(n, max(100 * m, 1_000_000)) points by default.

    ``fraction`` overrides the default cap with ceil(n * fraction).
    """
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise UsageError(f"sample fraction must be in (0, 1], got {fraction}")
        size = min(data.n, int(np.ceil(data.n * fraction)))
    else:
        size = min(data.n, max(100 * m, 1_000_000))
    if size == data.n:
        return data
    rng = np.random.default_rng([seed, 0x5A3B1E])
    rows = np.sort(rng.choice(data.n, size=size, replace=False))
    return BinaryDataset(data.labels[rows], data.codes[rows])


def init_centers(sample: BinaryDataset, m: int, seed: int) -> CenterSet:
    """m centers drawn uniformly without replacement from the sample rows."""
    if not 1 <= m <= sample.n:
        raise UsageError(f"m must be in [1, {sample.n}], got {m}")
    rng = np.random.default_rng([seed, 0xC3A7E5])
    rows = rng.choice(sample.n, size=m, replace=False)
    return CenterSet(sample.codes[rows].copy(), np.zeros(m, dtype=np.int64))


def assign_step(data: BinaryDataset, centers: CenterSet) -> np.ndarray:
    """Nearest-center index per point (ties to the lowest center index)."""
    if data.d_bits != centers.d_bits:
        raise UsageError(f"width mismatch: data {data.d_bits} vs centers {centers.d_bits}")
    out = np.empty(data.n, dtype=np.int32)
    for start in range(0, data.n, _ASSIGN_BLOCK):
        block = data.codes[start:start + _ASSIGN_BLOCK]
        dists = hamming_cross(block, centers.codes)
        out[start:start + _ASSIGN_BLOCK] = np.argmin(dists, axis=1)
    return out


def _center_bit_counts(codes: np.ndarray, assignment: np.ndarray, m: int) -> np.ndarray:
    """Per-center count of one-bits over members, (m, d_bits) int64."""
    d_bits = codes.shape[1] * WORD_BITS
    ones = np.zeros((m, d_bits), dtype=np.int64)
    order = np.argsort(assignment, kind="stable")
    sorted_assign = assignment[order]
    for start in range(0, len(order), _COUNT_BLOCK):
        rows = order[start:start + _COUNT_BLOCK]
        assign_block = sorted_assign[start:start + _COUNT_BLOCK]
        bits = unpack_bits(codes[rows]).astype(np.int64)
        seg_starts = np.concatenate(([0], np.flatnonzero(np.diff(assign_block)) + 1))
        sums = np.add.reduceat(bits, seg_starts, axis=0)
        ones[assign_block[seg_starts]] += sums  # segment centers are unique per block
    return ones


def update_step(data: BinaryDataset, assignment: np.ndarray, centers: CenterSet) -> CenterSet:
    """Majority-vote update; empty centers keep their previous code."""
    m = centers.m
    counts = np.bincount(assignment, minlength=m).astype(np.int64)
    ones = _center_bit_counts(data.codes, assignment, m)
    majority = (2 * ones >= counts[:, None]).astype(np.uint8)
    new_codes = pack_bits(majority)
    empty = counts == 0
    if empty.any():
        new_codes[empty] = centers.codes[empty]
    return CenterSet(new_codes, counts)


def objective(data: BinaryDataset, assignment: np.ndarray, centers: CenterSet) -> int:
    """Total Hamming distance from each point to its assigned center."""
    total = 0
    for start in range(0, data.n, _COUNT_BLOCK):
        block = data.codes[start:start + _COUNT_BLOCK]
        assigned = centers.codes[assignment[start:start + _COUNT_BLOCK]]
        total += int(np.bitwise_count(block ^ assigned).sum(dtype=np.int64))
    return total


def write_centers(centers: CenterSet, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(CENTERS_MAGIC)
        f.write(_CENTERS_HEADER.pack(centers.m, centers.d_bits))
        f.write(np.ascontiguousarray(centers.codes, dtype="<u8").tobytes())
        f.write(centers.member_counts.astype("<u8").tobytes())


def read_centers(path: str | Path) -> CenterSet:
    raw = Path(path).read_bytes()
    if raw[:4] != CENTERS_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CENTERS_MAGIC!r}")
    body = raw[4:]
    if len(body) < _CENTERS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    m, d_bits = _CENTERS_HEADER.unpack_from(body)
    if d_bits <= 0 or d_bits % WORD_BITS != 0:
        raise FormatError(f"{path}: d_bits={d_bits} is not a positive multiple of {WORD_BITS}")
    body = body[_CENTERS_HEADER.size:]
    code_bytes = m * (d_bits // 8)
    if len(body) != code_bytes + 8 * m:
        raise FormatError(f"{path}: expected {code_bytes + 8 * m} body bytes, found {len(body)}")
    codes = np.frombuffer(body, dtype="<u8", count=m * (d_bits // WORD_BITS)).reshape(m, -1)
    counts = np.frombuffer(body, dtype="<u8", offset=code_bytes).astype(np.int64)
    return CenterSet(codes.copy(), counts)


def train(sample: BinaryDataset, m: int, max_iters: int = 10, seed: int = 0) -> TrainResult:
    """Cluster the sample; stops early once the assignment is stable.

    Returns the final centers (with member counts from the last assignment)
    and the per-iteration objective values.
    """
    if max_iters < 1:
        raise UsageError(f"max_iters must be >= 1, got {max_iters}")
    centers = init_centers(sample, m, seed)
    assignment = assign_step(sample, centers)
    objectives = [objective(sample, assignment, centers)]
    converged = False
    for it in range(1, max_iters):
        centers = update_step(sample, assignment, centers)
        new_assignment = assign_step(sample, centers)
        objectives.append(objective(sample, new_assignment, centers))
        if np.array_equal(new_assignment, assignment):
            assignment = new_assignment
            converged = True
            break
        assignment = new_assignment
    counts = np.bincount(assignment, minlength=m).astype(np.int64)
    centers = CenterSet(centers.codes, counts)
    log.info(
        "bkmeans: m=%d n=%d iters=%d converged=%s objective %d -> %d",
        m, sample.n, len(objectives), converged, objectives[0], objectives[-1],
    )
    return TrainResult(centers, assignment, objectives, converged)
