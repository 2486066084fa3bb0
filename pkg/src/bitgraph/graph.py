"""k-NN graph container and serialization.

Nodes are stored in ascending label order with CSR-style neighbor arrays.
Every neighbor list is sorted by (distance, label), never contains the
owner's own label, and holds at most ``k_max`` entries. A fixed set of
entry-point labels (sampled once at build time) rides along with the graph
so searches are reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .bitcodes import WORD_BITS
from .errors import FormatError, UsageError

GRAPH_MAGIC = b"BDG\x02"
_GRAPH_HEADER = struct.Struct("<QIII")  # n, k_max, d_bits, entry_count
_NODE_HEADER = struct.Struct("<QI")  # label, degree

_EDGE_DTYPE = np.dtype([("label", "<u8"), ("dist", "<u4")])


def top_k_merge(
    labels: np.ndarray,
    dists: np.ndarray,
    k: int,
    exclude_label: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Best k entries by (distance, label) with duplicate labels dropped.

    Duplicates are assumed to carry equal distances (all distances here are
    exact); the first instance in rank order is kept.
    """
    labels = np.asarray(labels, dtype=np.uint64)
    dists = np.asarray(dists, dtype=np.uint32)
    if exclude_label is not None:
        keep = labels != np.uint64(exclude_label)
        labels, dists = labels[keep], dists[keep]
    order = np.lexsort((labels, dists))
    labels, dists = labels[order], dists[order]
    _, first = np.unique(labels, return_index=True)
    first.sort()
    labels, dists = labels[first], dists[first]
    return labels[:k].copy(), dists[:k].copy()


@dataclass
class KnnGraph:
    """Immutable adjacency snapshot; build/refine stages produce new ones."""

    node_labels: np.ndarray  # (n,) uint64, ascending
    offsets: np.ndarray  # (n + 1,) int64
    nbr_labels: np.ndarray  # (total_edges,) uint64
    nbr_dists: np.ndarray  # (total_edges,) uint32
    entry_labels: np.ndarray  # (E,) uint64
    k_max: int
    d_bits: int

    def __post_init__(self):
        self.node_labels = np.ascontiguousarray(self.node_labels, dtype=np.uint64)
        self.offsets = np.ascontiguousarray(self.offsets, dtype=np.int64)
        self.nbr_labels = np.ascontiguousarray(self.nbr_labels, dtype=np.uint64)
        self.nbr_dists = np.ascontiguousarray(self.nbr_dists, dtype=np.uint32)
        self.entry_labels = np.ascontiguousarray(self.entry_labels, dtype=np.uint64)
        if self.offsets.shape != (self.n + 1,):
            raise UsageError("offsets must have n + 1 entries")
        if self.n and (np.diff(self.node_labels.astype(np.int64)) <= 0).any():
            raise UsageError("node labels must be strictly ascending")

    @property
    def n(self) -> int:
        return self.node_labels.shape[0]

    @property
    def total_edges(self) -> int:
        return self.nbr_labels.shape[0]

    def row_of(self, label: int) -> int:
        pos = int(np.searchsorted(self.node_labels, np.uint64(label)))
        if pos >= self.n or self.node_labels[pos] != np.uint64(label):
            raise UsageError(f"label {label} is not a node of this graph")
        return pos

    def neighbors_at(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[row], self.offsets[row + 1]
        return self.nbr_labels[lo:hi], self.nbr_dists[lo:hi]

    def neighbors(self, label: int) -> tuple[np.ndarray, np.ndarray]:
        return self.neighbors_at(self.row_of(label))

    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def iter_nodes(self) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for row in range(self.n):
            labels, dists = self.neighbors_at(row)
            yield int(self.node_labels[row]), labels, dists

    def equals(self, other: "KnnGraph") -> bool:
        return (
            self.k_max == other.k_max
            and self.d_bits == other.d_bits
            and np.array_equal(self.node_labels, other.node_labels)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.nbr_labels, other.nbr_labels)
            and np.array_equal(self.nbr_dists, other.nbr_dists)
            and np.array_equal(self.entry_labels, other.entry_labels)
        )

    def validate(self) -> None:
        """Check the neighbor-list invariants; raises UsageError on violation."""
        for label, labels, dists in self.iter_nodes():
            if len(labels) > self.k_max:
                raise UsageError(f"node {label}: degree {len(labels)} exceeds k_max")
            if (labels == np.uint64(label)).any():
                raise UsageError(f"node {label}: contains a self edge")
            if len(np.unique(labels)) != len(labels):
                raise UsageError(f"node {label}: duplicate neighbor labels")
            if len(labels) > 1:
                pairs = list(zip(dists.tolist(), labels.tolist()))
                if pairs != sorted(pairs):
                    raise UsageError(f"node {label}: list not sorted by (distance, label)")


def from_lists(
    items: Iterable[tuple[int, np.ndarray, np.ndarray]],
    entry_labels: np.ndarray,
    k_max: int,
    d_bits: int,
) -> KnnGraph:
    """Assemble a graph from (label, neighbor labels, distances) triples."""
    rows = sorted(items, key=lambda item: item[0])
    node_labels = np.array([label for label, _, _ in rows], dtype=np.uint64)
    degrees = np.array([len(nbrs) for _, nbrs, _ in rows], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(degrees)))
    if len(rows):
        nbr_labels = np.concatenate([np.asarray(nbrs, dtype=np.uint64) for _, nbrs, _ in rows])
        nbr_dists = np.concatenate([np.asarray(d, dtype=np.uint32) for _, _, d in rows])
    else:
        nbr_labels = np.empty(0, dtype=np.uint64)
        nbr_dists = np.empty(0, dtype=np.uint32)
    return KnnGraph(node_labels, offsets, nbr_labels, nbr_dists,
                    np.asarray(entry_labels, dtype=np.uint64), k_max, d_bits)


def sample_entries(labels: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Deterministic entry-point sample: min(count, n) labels, stored sorted."""
    labels = np.asarray(labels, dtype=np.uint64)
    count = min(count, len(labels))
    rng = np.random.default_rng([seed, 0xE17B1E5])
    picked = rng.choice(len(labels), size=count, replace=False)
    return np.sort(labels[picked])


def graph_to_bytes(graph: KnnGraph) -> bytes:
    parts = [
        GRAPH_MAGIC,
        _GRAPH_HEADER.pack(graph.n, graph.k_max, graph.d_bits, len(graph.entry_labels)),
        graph.entry_labels.astype("<u8").tobytes(),
    ]
    degrees = graph.degrees()
    edges = np.empty(graph.total_edges, dtype=_EDGE_DTYPE)
    edges["label"] = graph.nbr_labels
    edges["dist"] = graph.nbr_dists
    edge_bytes = edges.tobytes()
    for row in range(graph.n):
        lo, hi = int(graph.offsets[row]), int(graph.offsets[row + 1])
        parts.append(_NODE_HEADER.pack(int(graph.node_labels[row]), int(degrees[row])))
        parts.append(edge_bytes[lo * _EDGE_DTYPE.itemsize : hi * _EDGE_DTYPE.itemsize])
    return b"".join(parts)


def write_graph(graph: KnnGraph, path: str | Path) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def read_graph(path: str | Path) -> KnnGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != GRAPH_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {GRAPH_MAGIC!r}")
    body = memoryview(raw)[4:]
    if len(body) < _GRAPH_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    n, k_max, d_bits, entry_count = _GRAPH_HEADER.unpack_from(body)
    if d_bits <= 0 or d_bits % WORD_BITS != 0:
        raise FormatError(f"{path}: d_bits={d_bits} is not a positive multiple of {WORD_BITS}")
    offset = _GRAPH_HEADER.size
    if len(body) < offset + 8 * entry_count:
        raise FormatError(f"{path}: truncated entry table")
    entries = np.frombuffer(body, dtype="<u8", count=entry_count, offset=offset).copy()
    offset += 8 * entry_count

    node_labels = np.empty(n, dtype=np.uint64)
    degrees = np.empty(n, dtype=np.int64)
    chunks: list[np.ndarray] = []
    for row in range(n):
        if len(body) < offset + _NODE_HEADER.size:
            raise FormatError(f"{path}: truncated at node {row}")
        label, degree = _NODE_HEADER.unpack_from(body, offset)
        offset += _NODE_HEADER.size
        need = degree * _EDGE_DTYPE.itemsize
        if len(body) < offset + need:
            raise FormatError(f"{path}: truncated edges at node {row}")
        node_labels[row] = label
        degrees[row] = degree
        chunks.append(np.frombuffer(body, dtype=_EDGE_DTYPE, count=degree, offset=offset))
        offset += need
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} trailing bytes")
    edges = (
        np.concatenate(chunks) if chunks else np.empty(0, dtype=_EDGE_DTYPE)
    )
    offsets = np.concatenate(([0], np.cumsum(degrees)))
    try:
        return KnnGraph(
            node_labels,
            offsets,
            edges["label"].astype(np.uint64),
            edges["dist"].astype(np.uint32),
            entries,
            k_max,
            d_bits,
        )
    except UsageError as e:
        raise FormatError(f"{path}: {e}") from e
