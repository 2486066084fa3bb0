"""Neighborhood propagation: improve a k-NN graph via two-hop candidates.

Each round runs two stages. In the expand stage every node sends a reverse
record to each listed neighbor, carrying its own code and its current
worst (distance, label) entry; a node's group then scores every reverse
source against the node's own neighbor list and emits the scored pairs as
candidates back to the source. In the merge stage candidates are folded
into the source's previous list, keeping the best k by (distance, label).

The worst-entry payload doubles as a shuffle filter: a candidate that
cannot beat the source's current worst entry is dropped at the emitting
side, shrinking the second shuffle without changing the merged result (the
comparison uses the full (distance, label) order, so even exact-distance
ties resolve identically with the filter on or off).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bitcodes import BinaryDataset, CodeTable
from .build import _PAIR_DTYPE, parse_neighbor_payload
from .engine import MapReduceEngine, StagePlan
from .errors import PipelineError, UsageError
from .graph import KnnGraph, from_lists, top_k_merge

log = logging.getLogger(__name__)

_TAG_OWNER = b"\x00"      # the group key's own neighbor list
_TAG_VISITOR = b"\x01"    # an incoming reverse record / scored candidate

_NO_TAU_DIST = 0xFFFFFFFF
_NO_TAU_LABEL = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class PropagationParams:
    rounds: int = 2
    filter_enabled: bool = True

    def __post_init__(self):
        if self.rounds < 0:
            raise UsageError(f"rounds must be >= 0, got {self.rounds}")


@dataclass
class RoundStats:
    reverse_records: int = 0
    candidate_records: int = 0  # expand-stage output == second-shuffle input
    improved_nodes: int = 0
    quality: float | None = None
    stage_plans: list[StagePlan] = field(default_factory=list)


@dataclass
class PropagationStats:
    rounds: list[RoundStats] = field(default_factory=list)

    @property
    def candidate_records_total(self) -> int:
        return sum(r.candidate_records for r in self.rounds)


def _edge_dtype(code_bytes: int) -> np.dtype:
    return np.dtype([("label", "<u8"), ("dist", "<u4"), ("code", "u1", (code_bytes,))])


def _reverse_dtype(code_bytes: int) -> np.dtype:
    return np.dtype(
        [
            ("tag", "u1"),
            ("source", "<u8"),
            ("tau_dist", "<u4"),
            ("tau_label", "<u8"),
            ("code", "u1", (code_bytes,)),
        ]
    )


def _expand_reducer_factory(words: int, filter_enabled: bool):
    code_bytes = words * 8
    edge_dtype = _edge_dtype(code_bytes)
    reverse_dtype = _reverse_dtype(code_bytes)

    def reducer(node: int, payloads: list[bytes]):
        if not payloads or payloads[0][0] != 0:
            raise PipelineError(f"propagation group {node} is missing its base list")
        if len(payloads) > 1 and payloads[1][0] == 0:
            raise PipelineError(f"propagation group {node} has duplicate base lists")
        if len(payloads) == 1:
            return  # no reverse sources reached this node
        base = np.frombuffer(payloads[0], dtype=edge_dtype, offset=1)
        if len(base) == 0:
            return  # isolated node: nothing to offer its reverse sources
        reverse = np.frombuffer(b"".join(payloads[1:]), dtype=reverse_dtype)
        base_codes = np.ascontiguousarray(base["code"]).view("<u8").reshape(len(base), words)
        rev_codes = np.ascontiguousarray(reverse["code"]).view("<u8").reshape(len(reverse), words)

        dists = np.zeros((len(reverse), len(base)), dtype=np.uint32)
        for w in range(words):
            dists += np.bitwise_count(rev_codes[:, w, None] ^ base_codes[None, :, w])

        base_labels = base["label"][None, :]
        keep = reverse["source"][:, None] != base_labels  # never score a node against itself
        if filter_enabled:
            tau_d = reverse["tau_dist"][:, None]
            tau_l = reverse["tau_label"][:, None]
            beats = (dists < tau_d) | ((dists == tau_d) & (base_labels < tau_l))
            keep &= beats

        rows, cols = np.nonzero(keep)
        if len(rows) == 0:
            return
        out = np.empty(len(rows), dtype=_PAIR_DTYPE)
        out["label"] = base["label"][cols]
        out["dist"] = dists[rows, cols]
        sources = reverse["source"][rows]
        blob = out.tobytes()
        size = _PAIR_DTYPE.itemsize
        for i in range(len(rows)):
            yield int(sources[i]), _TAG_VISITOR + blob[i * size : (i + 1) * size]

    return reducer


def _merge_reducer_factory(k: int):
    def reducer(node: int, payloads: list[bytes]):
        if not payloads or payloads[0][0] != 0:
            raise PipelineError(f"merge group {node} is missing its previous list")
        previous = np.frombuffer(payloads[0], dtype=_PAIR_DTYPE, offset=1)
        candidates = np.frombuffer(
            b"".join(p[1:] for p in payloads[1:]), dtype=_PAIR_DTYPE
        )
        merged_labels = np.concatenate([previous["label"], candidates["label"]])
        merged_dists = np.concatenate([previous["dist"], candidates["dist"]])
        labels, dists = top_k_merge(merged_labels, merged_dists, k, exclude_label=node)
        out = np.empty(len(labels), dtype=_PAIR_DTYPE)
        out["label"] = labels
        out["dist"] = dists
        yield node, _TAG_OWNER + out.tobytes()

    return reducer


def propagate_round(
    graph: KnnGraph,
    codes: CodeTable,
    params: PropagationParams,
    engine: MapReduceEngine,
) -> tuple[KnnGraph, RoundStats]:
    """One expand + merge round; returns the refined graph and its stats."""
    if codes.d_bits != graph.d_bits:
        raise UsageError(f"width mismatch: graph {graph.d_bits} vs codes {codes.d_bits}")
    words = graph.d_bits // 64
    code_bytes = words * 8
    edge_dtype = _edge_dtype(code_bytes)
    stats = RoundStats()

    node_code_rows = codes.codes_for(graph.node_labels).view(np.uint8).reshape(graph.n, -1)
    nbr_code_rows = (
        codes.codes_for(graph.nbr_labels).view(np.uint8).reshape(graph.total_edges, -1)
        if graph.total_edges
        else np.empty((0, code_bytes), dtype=np.uint8)
    )
    rev_header = struct.Struct("<QIQ")

    def expand_mapper(row: int):
        lo, hi = int(graph.offsets[row]), int(graph.offsets[row + 1])
        label = int(graph.node_labels[row])
        entries = np.empty(hi - lo, dtype=edge_dtype)
        entries["label"] = graph.nbr_labels[lo:hi]
        entries["dist"] = graph.nbr_dists[lo:hi]
        entries["code"] = nbr_code_rows[lo:hi]
        out = [(label, _TAG_OWNER + entries.tobytes())]
        if hi - lo == graph.k_max:
            tau = rev_header.pack(
                label, int(graph.nbr_dists[hi - 1]), int(graph.nbr_labels[hi - 1])
            )
        else:
            tau = rev_header.pack(label, _NO_TAU_DIST, _NO_TAU_LABEL)
        payload = _TAG_VISITOR + tau + node_code_rows[row].tobytes()
        out.extend((int(z), payload) for z in graph.nbr_labels[lo:hi])
        return out

    candidates, plan1 = engine.run_stage(
        "propagate-expand",
        range(graph.n),
        expand_mapper,
        _expand_reducer_factory(words, params.filter_enabled),
    )
    stats.stage_plans.append(plan1)
    stats.reverse_records = plan1.counters.emitted - graph.n  # minus identity records
    stats.candidate_records = len(candidates)

    # local join: each node's previous list enters the merge alongside the
    # candidate records (exactly one owner record per node)
    previous_lists: list[tuple[int, bytes]] = []
    for row in range(graph.n):
        lo, hi = int(graph.offsets[row]), int(graph.offsets[row + 1])
        entries = np.empty(hi - lo, dtype=_PAIR_DTYPE)
        entries["label"] = graph.nbr_labels[lo:hi]
        entries["dist"] = graph.nbr_dists[lo:hi]
        previous_lists.append((int(graph.node_labels[row]), _TAG_OWNER + entries.tobytes()))

    merged, plan2 = engine.run_stage(
        "propagate-merge",
        previous_lists + candidates,
        None,
        _merge_reducer_factory(graph.k_max),
    )
    stats.stage_plans.append(plan2)
    if len(merged) != graph.n:
        raise PipelineError(f"merge produced {len(merged)} lists for {graph.n} nodes")

    items = []
    for label, payload in merged:
        nbr_labels, nbr_dists = parse_neighbor_payload(payload[1:])
        items.append((label, nbr_labels, nbr_dists))
    new_graph = from_lists(items, graph.entry_labels, graph.k_max, graph.d_bits)
    stats.improved_nodes = sum(
        not np.array_equal(new_graph.neighbors_at(r)[0], graph.neighbors_at(r)[0])
        for r in range(graph.n)
    )
    return new_graph, stats


def propagate(
    graph: KnnGraph,
    codes: BinaryDataset | CodeTable,
    params: PropagationParams,
    engine: MapReduceEngine,
    quality_fn: Callable[[KnnGraph], float] | None = None,
) -> tuple[KnnGraph, PropagationStats]:
    """Run ``params.rounds`` propagation rounds over the graph.

    ``quality_fn`` (optional) is evaluated on each round's output graph and
    recorded in the per-round stats; pass something backed by a brute-force
    ground truth when measuring refinement progress.
    """
    table = codes if isinstance(codes, CodeTable) else CodeTable(codes)
    stats = PropagationStats()
    current = graph
    for round_index in range(params.rounds):
        current, round_stats = propagate_round(current, table, params, engine)
        if quality_fn is not None:
            round_stats.quality = quality_fn(current)
        stats.rounds.append(round_stats)
        log.info(
            "propagation round %d: reverse=%d candidates=%d improved=%d quality=%s",
            round_index + 1,
            round_stats.reverse_records,
            round_stats.candidate_records,
            round_stats.improved_nodes,
            round_stats.quality,
        )
    return current, stats
