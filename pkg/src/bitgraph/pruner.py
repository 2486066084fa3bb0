"""Degree-bounded edge pruning for neighbor graphs.

Long neighbor lists buy recall at search time but cost memory and hops.
This pass walks each node's list in ascending (distance, label) order and
keeps an edge only if no already-kept neighbor sits strictly closer to the
candidate than the node itself does; a kept neighbor that close will lead
the search to the candidate anyway. Scanning stops once ``max_degree``
edges survive. Every node is handled independently, so the stage is
map-only: the reducer just forwards each node's pruned list.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .bitcodes import CodeTable, hamming_cross
from .engine import MapReduceEngine, StagePlan
from .errors import PipelineError, UsageError
from .graph import _EDGE_DTYPE, KnnGraph, from_lists

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PruneParams:
    max_degree: int = 50
    occlusion: bool = True  # False: plain truncation to max_degree

    def __post_init__(self):
        if self.max_degree < 1:
            raise UsageError("max_degree must be at least 1")


@dataclass
class PruneStats:
    kept_edges: int = 0
    occluded_edges: int = 0
    overflow_edges: int = 0
    stage_plans: list[StagePlan] = field(default_factory=list)


def prune_list(
    dists: np.ndarray, pairwise: np.ndarray, params: PruneParams
) -> tuple[list[int], int, int]:
    """Select surviving positions from one (dist, label)-ordered list.

    ``pairwise[i, j]`` is the distance between candidates i and j. Returns
    (kept positions, occluded count, overflow count).
    """
    total = len(dists)
    if not params.occlusion:
        kept = list(range(min(total, params.max_degree)))
        return kept, 0, total - len(kept)
    kept: list[int] = []
    occluded = 0
    for j in range(total):
        if len(kept) == params.max_degree:
            return kept, occluded, total - j
        if kept and bool(np.any(pairwise[kept, j] < dists[j])):
            occluded += 1
            continue
        kept.append(j)
    return kept, occluded, 0


def prune_graph(
    graph: KnnGraph,
    codes: CodeTable,
    params: PruneParams,
    engine: MapReduceEngine,
) -> tuple[KnnGraph, PruneStats]:
    """Prune every node's list; returns a graph with k_max = max_degree."""
    stats = PruneStats()
    tally_lock = threading.Lock()
    codes.rows_for(graph.node_labels)  # fail fast if any node has no code

    def mapper(row: int):
        labels, dists = graph.neighbors_at(row)
        if len(labels) == 0:
            yield int(graph.node_labels[row]), b""
            return
        nbr_codes = codes.codes_for(labels)
        pairwise = hamming_cross(nbr_codes, nbr_codes)
        kept, occluded, overflow = prune_list(dists, pairwise, params)
        with tally_lock:
            stats.kept_edges += len(kept)
            stats.occluded_edges += occluded
            stats.overflow_edges += overflow
        out = np.empty(len(kept), dtype=_EDGE_DTYPE)
        out["label"] = labels[kept]
        out["dist"] = dists[kept]
        yield int(graph.node_labels[row]), out.tobytes()

    def reducer(node: int, payloads: list[bytes]):
        if len(payloads) != 1:
            raise PipelineError(f"prune group {node} has {len(payloads)} lists")
        yield node, payloads[0]

    records, plan = engine.run_stage("prune", list(range(graph.n)), mapper, reducer)
    stats.stage_plans.append(plan)
    if len(records) != graph.n:
        raise PipelineError(f"prune produced {len(records)} lists for {graph.n} nodes")

    items = []
    for node, payload in records:
        edges = np.frombuffer(payload, dtype=_EDGE_DTYPE)
        items.append((node, edges["label"].copy(), edges["dist"].copy()))
    pruned = from_lists(items, graph.entry_labels, params.max_degree, graph.d_bits)
    log.info(
        "prune: kept %d edges, occluded %d, overflow %d",
        stats.kept_edges,
        stats.occluded_edges,
        stats.overflow_edges,
    )
    return pruned, stats
