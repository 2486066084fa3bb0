"""Single-pass k-NN graph construction over clustered codes.

Every point emits one record per probed cluster: clusters are probed in
ascending (distance, center index) order while the running sum of cluster
sizes stays within ``coarse_num``, and the record for the point's nearest
cluster carries flag 0 (it is a *member* there), all others flag 1. Inside
each cluster group, every record is searched exhaustively against the
flag-0 members, and the per-cluster partial lists are merged into each
point's final top-k in a second reduce. One pass over the data therefore
yields both local and cross-cluster edges; with ``coarse_num >= n`` the
result degenerates to the exact brute-force graph.
"""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .bitcodes import BinaryDataset, hamming_cross, hamming_to_many
from .bkmeans import CenterSet, assign_step
from .engine import MapReduceEngine, StagePlan, balance_groups
from .errors import PipelineError, UsageError
from .graph import KnnGraph, from_lists, sample_entries, top_k_merge

log = logging.getLogger(__name__)

_QUERY_BLOCK = 1024
_PAIR_DTYPE = np.dtype([("label", "<u8"), ("dist", "<u4")])


@dataclass(frozen=True)
class BuildParams:
    """Knobs for one graph-construction pass."""

    k: int = 50
    m: int = 8192
    coarse_num: int = 100_000
    seed: int = 0
    entry_samples: int = 1024
    group_comparison_warn: int = 100_000_000

    def __post_init__(self):
        if self.k < 1:
            raise UsageError(f"k must be >= 1, got {self.k}")
        if self.m < 1:
            raise UsageError(f"m must be >= 1, got {self.m}")
        if self.coarse_num < 1:
            raise UsageError(f"coarse_num must be >= 1, got {self.coarse_num}")
        if self.entry_samples < 1:
            raise UsageError(f"entry_samples must be >= 1, got {self.entry_samples}")


@dataclass
class BuildStats:
    stage_plans: list[StagePlan] = field(default_factory=list)
    probe_records: int = 0
    partial_lists: int = 0
    empty_lists: int = 0
    comparisons: int = 0


def cluster_sizes(data: BinaryDataset, centers: CenterSet) -> np.ndarray:
    """Members per center under nearest-center assignment, (m,) int64."""
    assignment = assign_step(data, centers)
    return np.bincount(assignment, minlength=centers.m).astype(np.int64)


def probe_centers(
    code: np.ndarray,
    centers: CenterSet,
    sizes: np.ndarray,
    coarse_num: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Probe list for one point: (center indices, flags).

    Centers are visited in ascending (distance, index) order; the walk stops
    before the first center whose cluster size would push the cumulative
    candidate count past ``coarse_num``. The nearest center is always probed
    and is the single flag-0 entry.
    """
    dists = hamming_to_many(code, centers.codes)
    order = np.argsort(dists, kind="stable")
    within = np.cumsum(sizes[order]) <= coarse_num
    within[0] = True
    cut = int(np.argmin(within)) if not within.all() else len(order)
    probes = order[:cut].astype(np.int64)
    flags = np.ones(len(probes), dtype=np.uint8)
    flags[0] = 0
    return probes, flags


def _probe_dtype(code_bytes: int) -> np.dtype:
    return np.dtype([("label", "<u8"), ("flag", "u1"), ("code", "u1", (code_bytes,))])


def _group_reducer_factory(params: BuildParams, words: int, stats: BuildStats):
    code_bytes = words * 8
    probe_dtype = _probe_dtype(code_bytes)
    tally_lock = threading.Lock()

    def reducer(center: int, payloads: list[bytes]):
        records = np.frombuffer(b"".join(payloads), dtype=probe_dtype)
        member_rows = np.flatnonzero(records["flag"] == 0)
        if len(member_rows) == 0:
            return  # cluster with no members contributes no candidates
        all_codes = np.ascontiguousarray(records["code"]).view("<u8").reshape(len(records), words)
        cand_order = member_rows[np.argsort(records["label"][member_rows], kind="stable")]
        cand_labels = records["label"][cand_order]
        cand_codes = all_codes[cand_order]

        comparisons = len(records) * len(cand_order)
        with tally_lock:
            stats.comparisons += comparisons
        if comparisons > params.group_comparison_warn:
            log.warning(
                "cluster group %d: %d x %d comparisons exceeds the warn budget",
                center, len(records), len(cand_order),
            )

        k = params.k
        for start in range(0, len(records), _QUERY_BLOCK):
            block = slice(start, min(start + _QUERY_BLOCK, len(records)))
            dists = hamming_cross(all_codes[block], cand_codes)
            # candidates are label-sorted, so a stable sort on distance
            # yields (distance, label) rank order
            ranked = np.argsort(dists, axis=1, kind="stable")[:, : k + 1]
            for i, query_label in enumerate(records["label"][block]):
                cols = ranked[i]
                picked = cols[cand_labels[cols] != query_label][:k]
                pairs = np.empty(len(picked), dtype=_PAIR_DTYPE)
                pairs["label"] = cand_labels[picked]
                pairs["dist"] = dists[i][picked]
                yield int(query_label), pairs.tobytes()

    return reducer


def merge_partials_reducer(k: int):
    """Second-stage reducer: merge per-cluster partial lists into a top-k."""

    def reducer(label: int, payloads: list[bytes]):
        pairs = np.frombuffer(b"".join(payloads), dtype=_PAIR_DTYPE)
        labels, dists = top_k_merge(pairs["label"], pairs["dist"], k, exclude_label=label)
        out = np.empty(len(labels), dtype=_PAIR_DTYPE)
        out["label"] = labels
        out["dist"] = dists
        yield label, out.tobytes()

    return reducer


def parse_neighbor_payload(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.frombuffer(payload, dtype=_PAIR_DTYPE)
    return pairs["label"].astype(np.uint64), pairs["dist"].astype(np.uint32)


def build_base_graph(
    data: BinaryDataset,
    centers: CenterSet,
    params: BuildParams,
    engine: MapReduceEngine,
) -> tuple[KnnGraph, BuildStats]:
    """Construct the first-pass k-NN graph for ``data`` under ``centers``."""
    if data.n == 0:
        raise UsageError("cannot build a graph over an empty dataset")
    if data.d_bits != centers.d_bits:
        raise UsageError(
            f"width mismatch: data {data.d_bits} vs centers {centers.d_bits}"
        )
    stats = BuildStats()
    sizes = cluster_sizes(data, centers)
    words = data.codes.shape[1]

    labels = data.labels
    code_rows = data.code_bytes()
    header = struct.Struct("<QB")

    def mapper(row: int):
        probes, flags = probe_centers(data.codes[row], centers, sizes, params.coarse_num)
        payload_tail = code_rows[row].tobytes()
        label = int(labels[row])
        return [
            (int(center), header.pack(label, int(flag)) + payload_tail)
            for center, flag in zip(probes, flags)
        ]

    placement = balance_groups(
        [(int(c), int(s)) for c, s in enumerate(sizes)], engine.workers
    )
    group_records, plan1 = engine.run_stage(
        "graph-build-search",
        range(data.n),
        mapper,
        _group_reducer_factory(params, words, stats),
        placement=placement,
    )
    stats.stage_plans.append(plan1)
    stats.probe_records = plan1.counters.emitted
    stats.partial_lists = plan1.counters.reduced_out

    final_records, plan2 = engine.run_stage(
        "graph-build-merge",
        group_records,
        None,
        merge_partials_reducer(params.k),
    )
    stats.stage_plans.append(plan2)
    if len(final_records) != data.n:
        raise PipelineError(
            f"merge produced {len(final_records)} lists for {data.n} points"
        )

    items = []
    for label, payload in final_records:
        nbr_labels, nbr_dists = parse_neighbor_payload(payload)
        if len(nbr_labels) == 0:
            stats.empty_lists += 1
        items.append((label, nbr_labels, nbr_dists))
    if stats.empty_lists:
        log.info("graph build: %d nodes ended with empty neighbor lists", stats.empty_lists)

    entries = sample_entries(data.labels, params.entry_samples, params.seed)
    graph = from_lists(items, entries, params.k, data.d_bits)
    return graph, stats
