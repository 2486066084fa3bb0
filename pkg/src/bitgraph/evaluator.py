"""Exact ground truth, recall, parameter sweeps, and graph quality.

Ground truth comes from exhaustive scans under an explicit metric tag
("hamming" over packed codes, "l2sq" over real vectors) with the same
(distance, label) tie-break the rest of the package uses, so recall
comparisons are exact set arithmetic with no tolerance. Comparing a
result against truth computed under a different metric is an error, not
a number.

The sweep runs every query once per pool size and derives each smaller
result count from the prefix of the same pool, which keeps timing and
counter columns directly comparable across rows.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bitcodes import (
    BinaryDataset,
    RealDataset,
    hamming_cross,
    hamming_cross_gemm,
    l2_squared_to_many,
)
from .errors import FormatError, UsageError
from .graph import KnnGraph
from .searcher import ResultSet, SearchParams

log = logging.getLogger(__name__)

METRIC_HAMMING = "hamming"
METRIC_L2SQ = "l2sq"

# above this many pairwise distances the scan switches to the matmul
# kernel, which is bit-exact for any realistic code width
_GEMM_THRESHOLD = 4_000_000

CSV_HEADER = [
    "ef",
    "topn",
    "metric",
    "rerank",
    "recall_mean",
    "time_ms_mean",
    "time_ms_p50",
    "hamming_evals_mean_long",
    "hamming_evals_mean_short",
    "l2_evals_mean",
]


@dataclass(frozen=True)
class GroundTruth:
    metric: str
    depth: int  # result count per query (clamped to dataset size)
    labels: np.ndarray  # (queries, depth) uint64, (distance, label) ascending

    def row(self, i: int, n: int | None = None) -> set[int]:
        n = self.depth if n is None else n
        if n > self.depth:
            raise UsageError(f"truth holds top-{self.depth}, asked for top-{n}")
        return set(self.labels[i, :n].tolist())


def _top_positions(dists: np.ndarray, n: int) -> np.ndarray:
    """First n positions by (distance, position), exact under ties."""
    if n >= len(dists):
        return np.argsort(dists, kind="stable")
    part = np.argpartition(dists, n - 1)[:n]
    worst = dists[part].max()
    strict = np.nonzero(dists < worst)[0]
    ties = np.sort(np.nonzero(dists == worst)[0])[: n - len(strict)]
    top = np.concatenate([strict, ties])
    return top[np.lexsort((top, dists[top]))]


def brute_force_topn(
    queries: np.ndarray,
    data: BinaryDataset | RealDataset,
    metric: str,
    n: int,
    exclude_labels: np.ndarray | None = None,
) -> GroundTruth:
    """Exhaustive top-n per query row under the stated metric.

    ``exclude_labels`` gives one label per query to leave out of its own
    result (a node is not its own neighbor).
    """
    if n < 1:
        raise UsageError("n must be at least 1")
    if metric == METRIC_HAMMING:
        if not isinstance(data, BinaryDataset):
            raise UsageError("hamming truth needs packed binary codes")
    elif metric == METRIC_L2SQ:
        if not isinstance(data, RealDataset):
            raise UsageError("l2sq truth needs real vectors")
    else:
        raise UsageError(f"unknown metric {metric!r}")

    order = np.argsort(data.labels, kind="stable")
    labels = data.labels[order]
    queries = np.asarray(queries)
    q = len(queries)
    depth = min(n, data.n - (1 if exclude_labels is not None else 0))
    if depth < 1:
        raise UsageError("dataset too small for the requested depth")

    if exclude_labels is not None:
        pos = np.searchsorted(labels, exclude_labels)
        bad = (pos >= len(labels)) | (labels[np.minimum(pos, len(labels) - 1)] != exclude_labels)
        if bad.any():
            raise UsageError(f"excluded label {int(exclude_labels[bad][0])} not in dataset")
        exclude_pos = pos
    else:
        exclude_pos = None

    out = np.empty((q, depth), dtype=np.uint64)
    if metric == METRIC_HAMMING:
        rows = data.codes[order]
        block = max(1, _GEMM_THRESHOLD // max(1, data.n))
        use_gemm = q * data.n > _GEMM_THRESHOLD
        for start in range(0, q, block):
            chunk = queries[start : start + block]
            if use_gemm:
                dists = hamming_cross_gemm(chunk, rows)
            else:
                dists = hamming_cross(chunk, rows)
            for i in range(len(chunk)):
                d = dists[i]
                if exclude_pos is not None:
                    d = d.copy()
                    d[exclude_pos[start + i]] = np.iinfo(d.dtype).max
                out[start + i] = labels[_top_positions(d, depth)]
    else:
        rows = data.vectors[order]
        for i in range(q):
            d = l2_squared_to_many(queries[i], rows)
            if exclude_pos is not None:
                d[exclude_pos[i]] = np.inf
            out[i] = labels[_top_positions(d, depth)]
    return GroundTruth(metric, depth, out)


def recall(
    result: ResultSet,
    truth: GroundTruth,
    row: int,
    n: int | None = None,
    allow_cross_metric: bool = False,
) -> float:
    """Fraction of the true top-n present in the result (clamped depth).

    A result ordered under one metric scored against truth from another is
    normally a mistake and raises; pass ``allow_cross_metric`` for the one
    legitimate case, measuring a binary ordering against real-value truth.
    """
    if result.metric != truth.metric and not allow_cross_metric:
        raise UsageError(
            f"metric mismatch: result is {result.metric}, truth is {truth.metric}"
        )
    n = truth.depth if n is None else min(n, truth.depth)
    true_set = truth.row(row, n)
    got = set(result.labels[:n].tolist())
    return len(got & true_set) / n


def graph_quality(graph: KnnGraph, data: BinaryDataset, k: int, truth: GroundTruth | None = None) -> float:
    """Mean per-node fraction of true k-nearest neighbors stored.

    Pass a precomputed self-excluded Hamming truth over the node labels to
    amortize the exhaustive scan across repeated measurements.
    """
    if k < 1:
        raise UsageError("k must be at least 1")
    if truth is None:
        truth = node_truth(graph, data, k)
    if truth.metric != METRIC_HAMMING or truth.depth < min(k, data.n - 1):
        raise UsageError("need self-excluded hamming truth at depth k")
    depth = min(k, truth.depth)
    total = 0.0
    for i in range(graph.n):  # truth rows follow graph node order
        stored = graph.neighbors_at(i)[0][:k]
        total += len(truth.row(i, depth) & set(stored.tolist())) / depth
    return total / graph.n


def node_truth(graph: KnnGraph, data: BinaryDataset, k: int) -> GroundTruth:
    """Self-excluded Hamming truth for every graph node, in node order."""
    order = np.argsort(data.labels, kind="stable")
    table_labels = data.labels[order]
    table_codes = data.codes[order]
    pos = np.searchsorted(table_labels, graph.node_labels)
    bad = (pos >= data.n) | (table_labels[np.minimum(pos, data.n - 1)] != graph.node_labels)
    if bad.any():
        raise UsageError(f"node label {int(graph.node_labels[bad][0])} has no code")
    return brute_force_topn(
        table_codes[pos], data, METRIC_HAMMING, k, exclude_labels=graph.node_labels
    )


@dataclass(frozen=True)
class SweepRow:
    ef: int
    topn: int
    metric: str
    rerank: bool
    recall_mean: float
    time_ms_mean: float
    time_ms_p50: float
    hamming_evals_mean_long: float
    hamming_evals_mean_short: float
    l2_evals_mean: float


def sweep(
    index,
    query_codes: np.ndarray,
    truth: GroundTruth,
    ef_list: list[int],
    topn_list: list[int],
    rerank: bool = False,
    query_reals: np.ndarray | None = None,
    entry_samples: int | None = None,
    seed: int = 0,
) -> list[SweepRow]:
    """Search every query at each pool size; one row per (ef, topn).

    ``index`` is anything with a ``search(query_code, params, query_real)``
    method. Rows at the same ef share one set of searches: smaller result
    counts are prefixes of the same pool.
    """
    top_max = max(topn_list)
    if min(topn_list) < 1:
        raise UsageError("result counts must be positive")
    for ef in ef_list:
        if ef < top_max:
            raise UsageError(f"ef {ef} is smaller than result count {top_max}")
    if rerank and query_reals is None:
        raise UsageError("rerank sweep needs real query vectors")

    rows = []
    q = len(query_codes)
    for ef in ef_list:
        params = SearchParams(
            ef=ef, topn=top_max, entry_samples=entry_samples, rerank=rerank, seed=seed
        )
        results = []
        times = np.empty(q)
        long_evals = np.empty(q)
        short_evals = np.empty(q)
        l2_evals = np.empty(q)
        for i in range(q):
            real = query_reals[i] if rerank else None
            t0 = time.perf_counter()
            result, stats = index.search(query_codes[i], params, real)
            times[i] = (time.perf_counter() - t0) * 1000.0
            results.append(result)
            long_evals[i] = stats.hamming_evals_long
            short_evals[i] = stats.hamming_evals_short
            l2_evals[i] = stats.l2_evals
        for topn in topn_list:
            depth = min(topn, truth.depth)
            mean_recall = float(
                np.mean(
                    [
                        recall(results[i], truth, i, depth, allow_cross_metric=True)
                        for i in range(q)
                    ]
                )
            )
            rows.append(
                SweepRow(
                    ef=ef,
                    topn=topn,
                    metric=truth.metric,
                    rerank=rerank,
                    recall_mean=mean_recall,
                    time_ms_mean=float(times.mean()),
                    time_ms_p50=float(np.median(times)),
                    hamming_evals_mean_long=float(long_evals.mean()),
                    hamming_evals_mean_short=float(short_evals.mean()),
                    l2_evals_mean=float(l2_evals.mean()),
                )
            )
        log.info(
            "sweep ef=%d: recall@%d %.4f, %.2f ms/query",
            ef,
            top_max,
            rows[-1].recall_mean,
            rows[-1].time_ms_mean,
        )
    return rows


def write_report_csv(rows: list[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.ef,
                    row.topn,
                    row.metric,
                    str(row.rerank).lower(),
                    f"{row.recall_mean:.6f}",
                    f"{row.time_ms_mean:.4f}",
                    f"{row.time_ms_p50:.4f}",
                    f"{row.hamming_evals_mean_long:.2f}",
                    f"{row.hamming_evals_mean_short:.2f}",
                    f"{row.l2_evals_mean:.2f}",
                ]
            )


def read_report_csv(path: str | Path) -> list[SweepRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise FormatError(f"{path}: unexpected report header {header}")
        rows = []
        for record in reader:
            if len(record) != len(CSV_HEADER):
                raise FormatError(f"{path}: short row {record}")
            rows.append(
                SweepRow(
                    ef=int(record[0]),
                    topn=int(record[1]),
                    metric=record[2],
                    rerank=record[3] == "true",
                    recall_mean=float(record[4]),
                    time_ms_mean=float(record[5]),
                    time_ms_p50=float(record[6]),
                    hamming_evals_mean_long=float(record[7]),
                    hamming_evals_mean_short=float(record[8]),
                    l2_evals_mean=float(record[9]),
                )
            )
    return rows
