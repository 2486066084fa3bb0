"""Online search: sampled entry selection, best-first graph walk, rerank.

A query first scans a fixed sample of entry points (the wide jumps across
the dataset) and starts the graph walk at the nearest one. The walk keeps
a frontier of evaluated-but-unexpanded nodes and a bounded result pool;
it expands the closest frontier node, evaluates its unvisited neighbors,
and stops once the closest frontier item can no longer improve a full
pool. Distances in the walk are Hamming over packed codes; an optional
final pass re-sorts the pool by squared L2 over the stored real vectors.

Counters keep the two phases separate: entry-scan evaluations are "long"
jumps, traversal evaluations are "short" steps, and rerank contributes L2
evaluations. All tie-breaks are (distance, then label), making every
search deterministic for a given index and parameter set.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .bitcodes import (
    BinaryDataset,
    CodeTable,
    RealDataset,
    hamming_to_many,
    l2_squared_to_many,
)
from .errors import IndexDataError, UsageError
from .graph import KnnGraph

RERANK_EF_CAP = 1000  # rerank re-sorts the whole pool, so the pool stays small
ENTRY_SAMPLE_SALT = 0x53A3C7


@dataclass(frozen=True)
class SearchParams:
    ef: int = 512
    topn: int = 10
    entry_samples: int | None = None  # None: scan every persisted entry
    rerank: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.topn < 1:
            raise UsageError("topn must be at least 1")
        if self.ef < self.topn:
            raise UsageError(f"ef ({self.ef}) must be at least topn ({self.topn})")
        if self.entry_samples is not None and self.entry_samples < 1:
            raise UsageError("entry_samples must be at least 1")
        if self.rerank and self.ef > RERANK_EF_CAP:
            object.__setattr__(self, "ef", RERANK_EF_CAP)


@dataclass
class SearchStats:
    hamming_evals_long: int = 0
    hamming_evals_short: int = 0
    l2_evals: int = 0
    hops: int = 0
    truncated: bool = False  # pool came up short of topn


@dataclass(frozen=True)
class ResultSet:
    labels: np.ndarray  # uint64, ascending (distance, label)
    distances: np.ndarray  # uint32 Hamming, or float64 squared L2
    metric: str  # "hamming" | "l2sq"

    def __len__(self) -> int:
        return len(self.labels)


def select_entry(query: np.ndarray, entry_labels: np.ndarray, table: CodeTable) -> int:
    """Nearest entry label by Hamming distance, ties to the lower label."""
    if len(entry_labels) == 0:
        raise IndexDataError("no entry points stored")
    dists = hamming_to_many(query, table.codes_for(entry_labels))
    return int(entry_labels[np.lexsort((entry_labels, dists))[0]])


class SearchIndex:
    """Immutable search-time view of a graph plus its codes.

    Node positions follow the graph's ascending label order, so comparing
    positions is the same as comparing labels; the hot loop works in
    positions and python ints (whole codes XOR in one machine-word op per
    stored word) and only touches numpy at the edges.
    """

    def __init__(
        self,
        graph: KnnGraph,
        codes: BinaryDataset,
        reals: RealDataset | None = None,
    ):
        self.graph = graph
        self.d_bits = graph.d_bits
        if codes.d_bits != graph.d_bits:
            raise IndexDataError(
                f"code width {codes.d_bits} does not match graph width {graph.d_bits}"
            )
        table = CodeTable(codes)
        try:
            node_codes = table.codes_for(graph.node_labels)
        except UsageError as e:
            raise IndexDataError(str(e)) from e
        blob = node_codes.tobytes()
        stride = node_codes.shape[1] * 8
        self._code_ints = [
            int.from_bytes(blob[i * stride : (i + 1) * stride], "little")
            for i in range(graph.n)
        ]
        self._node_codes = node_codes

        nbr_pos = np.searchsorted(graph.node_labels, graph.nbr_labels)
        bad = (nbr_pos >= graph.n) | (graph.node_labels[np.minimum(nbr_pos, graph.n - 1)] != graph.nbr_labels)
        if bad.any():
            raise IndexDataError(
                f"neighbor label {int(graph.nbr_labels[bad][0])} is not a graph node"
            )
        self._nbr_pos = nbr_pos.astype(np.int64)
        self._offsets = graph.offsets

        entry_pos = np.searchsorted(graph.node_labels, graph.entry_labels)
        bad = (entry_pos >= graph.n) | (
            graph.node_labels[np.minimum(entry_pos, graph.n - 1)] != graph.entry_labels
        )
        if bad.any():
            raise IndexDataError(
                f"entry label {int(graph.entry_labels[bad][0])} is not a graph node"
            )
        self._entry_pos = entry_pos.astype(np.int64)

        self._reals = reals
        if reals is not None:
            order = np.argsort(reals.labels, kind="stable")
            self._real_labels = reals.labels[order]
            self._real_vectors = reals.vectors[order]

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def has_reals(self) -> bool:
        return self._reals is not None

    def codes_dataset(self) -> BinaryDataset:
        """The indexed codes keyed by node label (node order)."""
        return BinaryDataset(self.graph.node_labels.copy(), self._node_codes.copy())

    def reals_dataset(self) -> RealDataset:
        if self._reals is None:
            raise UsageError("index holds no real vectors")
        return self._reals

    def _entry_subset(self, params: SearchParams) -> np.ndarray:
        pos = self._entry_pos
        if len(pos) == 0:
            raise IndexDataError("no entry points stored")
        if params.entry_samples is None or params.entry_samples >= len(pos):
            return pos
        rng = np.random.default_rng([params.seed, ENTRY_SAMPLE_SALT])
        picks = rng.choice(len(pos), size=params.entry_samples, replace=False)
        return np.sort(pos[picks])

    def _beam(
        self, query_int: int, ef: int, start_pos: int, start_dist: int, stats: SearchStats
    ) -> list[tuple[int, int]]:
        """Best-first walk; returns the pool as (distance, position) ascending."""
        code_ints = self._code_ints
        nbr_pos = self._nbr_pos
        offsets = self._offsets
        visited = {start_pos}
        frontier = [(start_dist, start_pos)]
        pool = [(-start_dist, -start_pos)]  # max-heap: root is the worst kept
        while frontier:
            d, pos = heapq.heappop(frontier)
            if len(pool) == ef:
                worst_d, worst_pos = -pool[0][0], -pool[0][1]
                if (d, pos) > (worst_d, worst_pos):
                    break
            stats.hops += 1
            for q in nbr_pos[offsets[pos] : offsets[pos + 1]]:
                q = int(q)
                if q in visited:
                    continue
                visited.add(q)
                dq = (code_ints[q] ^ query_int).bit_count()
                stats.hamming_evals_short += 1
                heapq.heappush(frontier, (dq, q))
                if len(pool) < ef:
                    heapq.heappush(pool, (-dq, -q))
                elif (-dq, -q) > pool[0]:
                    heapq.heapreplace(pool, (-dq, -q))
        return sorted((-d, -pos) for d, pos in pool)

    def search(
        self,
        query_code: np.ndarray,
        params: SearchParams,
        query_real: np.ndarray | None = None,
    ) -> tuple[ResultSet, SearchStats]:
        stats = SearchStats()
        if params.rerank and (self._reals is None or query_real is None):
            raise UsageError("rerank needs stored real vectors and a real query vector")

        entry_pos = self._entry_subset(params)
        entry_dists = hamming_to_many(query_code, self._node_codes[entry_pos])
        stats.hamming_evals_long += len(entry_pos)
        best = int(np.lexsort((entry_pos, entry_dists))[0])
        start_pos, start_dist = int(entry_pos[best]), int(entry_dists[best])

        query_int = int.from_bytes(
            np.asarray(query_code, dtype=np.uint64).tobytes(), "little"
        )
        pool = self._beam(query_int, params.ef, start_pos, start_dist, stats)
        labels = self.graph.node_labels[[pos for _, pos in pool]]
        dists = np.array([d for d, _ in pool], dtype=np.uint32)

        if params.rerank:
            labels, l2 = self._rerank(labels, query_real, stats)
            result = ResultSet(labels[: params.topn], l2[: params.topn], "l2sq")
        else:
            result = ResultSet(labels[: params.topn], dists[: params.topn], "hamming")
        stats.truncated = len(result) < params.topn
        return result, stats

    def _rerank(
        self, labels: np.ndarray, query_real: np.ndarray, stats: SearchStats
    ) -> tuple[np.ndarray, np.ndarray]:
        pos = np.searchsorted(self._real_labels, labels)
        bad = (pos >= len(self._real_labels)) | (
            self._real_labels[np.minimum(pos, len(self._real_labels) - 1)] != labels
        )
        if bad.any():
            raise IndexDataError(f"label {int(labels[bad][0])} has no real vector")
        l2 = l2_squared_to_many(query_real, self._real_vectors[pos])
        stats.l2_evals += len(labels)
        order = np.lexsort((labels, l2))
        return labels[order], l2[order]


def beam_search(
    index: SearchIndex, query_code: np.ndarray, ef: int, entry_label: int
) -> tuple[np.ndarray, np.ndarray]:
    """Walk from a given entry; returns pool (labels, distances) ascending.

    Convenience wrapper around the index's walk with the entry fixed by the
    caller; the entry evaluation is counted as the first short step.
    """
    if ef < 1:
        raise UsageError("ef must be at least 1")
    graph = index.graph
    pos = int(np.searchsorted(graph.node_labels, np.uint64(entry_label)))
    if pos >= graph.n or graph.node_labels[pos] != entry_label:
        raise IndexDataError(f"entry label {entry_label} is not a graph node")
    query_int = int.from_bytes(np.asarray(query_code, dtype=np.uint64).tobytes(), "little")
    stats = SearchStats()
    start_dist = (index._code_ints[pos] ^ query_int).bit_count()
    stats.hamming_evals_short += 1
    pool = index._beam(query_int, ef, pos, start_dist, stats)
    labels = graph.node_labels[[p for _, p in pool]]
    dists = np.array([d for d, _ in pool], dtype=np.uint32)
    return labels, dists
