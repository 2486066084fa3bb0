"""Deterministic local map-shuffle-reduce engine.

Stages move (key, payload) records: keys are non-negative ints, payloads are
opaque bytes. The output of a stage is independent of the worker count:
groups are reduced in ascending key order and each group's payload list is
sorted lexicographically before the reducer sees it, so any placement of
groups onto workers yields identical results. Shuffle buffers spill to
sorted run files on disk once they exceed a configurable byte budget; runs
are merged back in (key, payload) order, which reproduces the in-memory
ordering exactly.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import os
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeAlias

from .errors import PipelineError, UsageError

log = logging.getLogger(__name__)

KVRecord: TypeAlias = tuple[int, bytes]

DEFAULT_MEMORY_BUDGET = 256 * 1024 * 1024

_FRAME = struct.Struct("<QI")  # key, payload length


def default_workers() -> int:
    env = os.environ.get("BITGRAPH_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def default_memory_budget() -> int:
    env = os.environ.get("BITGRAPH_SHUFFLE_BUDGET")
    if env:
        return max(1, int(env))
    return DEFAULT_MEMORY_BUDGET


def balance_groups(sizes: Sequence[tuple[int, int]], workers: int) -> dict[int, int]:
    """Assign group keys to workers, greedily levelling the load.

    Longest-processing-time order: keys sorted by descending size (ties by
    ascending key) are placed one at a time on the currently least-loaded
    worker (ties by lowest worker index). Guarantees max load within 4/3 of
    the optimal makespan.

    Args:
        sizes: (key, size) pairs; sizes must be non-negative.
        workers: number of workers, >= 1.

    Returns:
        Mapping of every key to a worker index in [0, workers).
    """
    if workers < 1:
        raise UsageError(f"workers must be >= 1, got {workers}")
    seen = set()
    for key, size in sizes:
        if size < 0:
            raise UsageError(f"negative group size for key {key}")
        if key in seen:
            raise UsageError(f"duplicate group key {key}")
        seen.add(key)
    heap = [(0, w) for w in range(workers)]
    heapq.heapify(heap)
    placement: dict[int, int] = {}
    for key, size in sorted(sizes, key=lambda item: (-item[1], item[0])):
        load, worker = heapq.heappop(heap)
        placement[key] = worker
        heapq.heappush(heap, (load + size, worker))
    return placement


@dataclass
class StageCounters:
    mapped_in: int = 0
    emitted: int = 0
    shuffled: int = 0
    groups: int = 0
    reduced_out: int = 0
    spill_runs: int = 0


@dataclass
class StagePlan:
    """Execution record of one stage: worker count, group placement, counters."""

    name: str
    worker_count: int
    placement: dict[int, int] = field(default_factory=dict)
    counters: StageCounters = field(default_factory=StageCounters)
    seconds: float = 0.0


class _ShuffleBuffer:
    """Accumulates records, spilling sorted runs to disk above the budget."""

    def __init__(self, budget_bytes: int, spill_dir: str | None):
        self._budget = budget_bytes
        self._spill_dir = spill_dir
        self._items: list[KVRecord] = []
        self._bytes = 0
        self._run_paths: list[Path] = []
        self._tmpdir: tempfile.TemporaryDirectory | None = None

    @property
    def spill_runs(self) -> int:
        return len(self._run_paths)

    def add(self, key: int, payload: bytes) -> None:
        self._items.append((key, payload))
        self._bytes += len(payload) + 24
        if self._bytes > self._budget:
            self._spill()

    def _spill(self) -> None:
        if not self._items:
            return
        if self._tmpdir is None:
            self._tmpdir = tempfile.TemporaryDirectory(
                prefix="bitgraph-shuffle-", dir=self._spill_dir
            )
        self._items.sort()
        path = Path(self._tmpdir.name) / f"run-{len(self._run_paths):05d}"
        with open(path, "wb") as f:
            for key, payload in self._items:
                f.write(_FRAME.pack(key, len(payload)))
                f.write(payload)
        self._run_paths.append(path)
        self._items = []
        self._bytes = 0

    @staticmethod
    def _read_run(path: Path) -> Iterator[KVRecord]:
        with open(path, "rb") as f:
            while True:
                head = f.read(_FRAME.size)
                if not head:
                    return
                key, length = _FRAME.unpack(head)
                yield key, f.read(length)

    def iter_groups(self) -> Iterator[tuple[int, list[bytes]]]:
        """Yield (key, payloads) with ascending keys and sorted payloads."""
        if self._run_paths:
            self._spill()  # flush the residue so everything streams from runs
            streams = [self._read_run(p) for p in self._run_paths]
            merged: Iterable[KVRecord] = heapq.merge(*streams)
        else:
            self._items.sort()
            merged = self._items
        for key, group in itertools.groupby(merged, key=lambda rec: rec[0]):
            yield key, [payload for _, payload in group]

    def close(self) -> None:
        if self._tmpdir is not None:
            self._tmpdir.cleanup()
            self._tmpdir = None


class MapReduceEngine:
    """Runs map-shuffle-reduce stages locally with deterministic output.

    Args:
        workers: logical worker count; the stage output never depends on it.
        memory_budget: shuffle buffer bytes held in memory before spilling.
        spill_dir: directory for spill files (default: system temp dir).
    """

    def __init__(
        self,
        workers: int | None = None,
        memory_budget: int | None = None,
        spill_dir: str | None = None,
    ):
        self.workers = workers if workers is not None else default_workers()
        if self.workers < 1:
            raise UsageError(f"workers must be >= 1, got {self.workers}")
        self.memory_budget = (
            memory_budget if memory_budget is not None else default_memory_budget()
        )
        self.spill_dir = spill_dir
        self.plans: list[StagePlan] = []

    def run_stage(
        self,
        name: str,
        inputs: Sequence,
        mapper: Callable[[object], Iterable[KVRecord]] | None,
        reducer: Callable[[int, list[bytes]], Iterable[KVRecord]],
        placement: dict[int, int] | None = None,
        valid_out_key: Callable[[int], bool] | None = None,
    ) -> tuple[list[KVRecord], StagePlan]:
        """Run one stage and return (output records, execution plan).

        Args:
            name: stage name for logs and plan records.
            inputs: input items; fed to ``mapper`` one at a time. When
                ``mapper`` is None the items must already be KVRecords and
                pass through the shuffle unchanged.
            mapper: pure per-item function emitting (key, payload) records.
            reducer: pure per-group function; receives the key and the
                lexicographically sorted payload list, emits output records.
            placement: optional pre-computed key -> worker table (e.g. from
                known cluster sizes). Keys absent from the table are a
                pipeline error. Default: balanced on observed group sizes.
            valid_out_key: optional predicate; a reducer emitting a key that
                fails it aborts the stage with a pipeline error.
        """
        t0 = time.perf_counter()
        plan = StagePlan(name=name, worker_count=self.workers)
        counters = plan.counters
        buffer = _ShuffleBuffer(self.memory_budget, self.spill_dir)
        try:
            self._map_phase(inputs, mapper, buffer, counters, placement)
            outputs = self._reduce_phase(
                buffer, reducer, counters, placement, plan, valid_out_key
            )
        finally:
            counters.spill_runs = buffer.spill_runs
            buffer.close()
        plan.seconds = time.perf_counter() - t0
        self.plans.append(plan)
        log.info(
            "stage %s: in=%d emitted=%d groups=%d out=%d spills=%d %.2fs",
            name, counters.mapped_in, counters.emitted, counters.groups,
            counters.reduced_out, counters.spill_runs, plan.seconds,
        )
        return outputs, plan

    def _map_phase(self, inputs, mapper, buffer, counters, placement) -> None:
        counters.mapped_in = len(inputs)

        def run_split(split: Sequence) -> list[KVRecord]:
            if mapper is None:
                return list(split)
            out: list[KVRecord] = []
            for item in split:
                out.extend(mapper(item))
            return out

        if self.workers == 1 or len(inputs) < 2:
            split_outputs = [run_split(inputs)]
        else:
            bounds = [
                (len(inputs) * i) // self.workers for i in range(self.workers + 1)
            ]
            splits = [
                inputs[bounds[i]:bounds[i + 1]]
                for i in range(self.workers)
                if bounds[i] < bounds[i + 1]
            ]
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                split_outputs = list(pool.map(run_split, splits))

        for records in split_outputs:
            for key, payload in records:
                if key < 0:
                    raise PipelineError(f"mapper emitted negative key {key}")
                if placement is not None and key not in placement:
                    raise PipelineError(
                        f"mapper emitted key {key} outside the stage placement"
                    )
                buffer.add(key, payload)
                counters.emitted += 1

    def _reduce_phase(
        self, buffer, reducer, counters, placement, plan, valid_out_key
    ) -> list[KVRecord]:
        def reduce_group(key: int, payloads: list[bytes]) -> list[KVRecord]:
            out = list(reducer(key, payloads))
            for out_key, _ in out:
                if valid_out_key is not None and not valid_out_key(out_key):
                    raise PipelineError(
                        f"reducer for group {key} emitted out-of-domain key {out_key}"
                    )
            return out

        per_group: dict[int, list[KVRecord]] = {}

        if self.workers == 1:
            for key, payloads in buffer.iter_groups():
                counters.groups += 1
                counters.shuffled += len(payloads)
                per_group[key] = reduce_group(key, payloads)
            plan.placement = placement if placement is not None else {
                key: 0 for key in per_group
            }
        else:
            # Stream groups into per-worker batches; futures are drained in
            # submission order so results land keyed by group either way.
            groups: list[tuple[int, list[bytes]]] = []
            for key, payloads in buffer.iter_groups():
                counters.groups += 1
                counters.shuffled += len(payloads)
                groups.append((key, payloads))
            if placement is None:
                placement = balance_groups(
                    [(key, len(p)) for key, p in groups], self.workers
                )
            plan.placement = placement
            batches: list[list[tuple[int, list[bytes]]]] = [
                [] for _ in range(self.workers)
            ]
            for key, payloads in groups:
                batches[placement[key]].append((key, payloads))

            def run_batch(batch):
                return [(key, reduce_group(key, payloads)) for key, payloads in batch]

            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                for result in pool.map(run_batch, batches):
                    for key, out in result:
                        per_group[key] = out

        outputs: list[KVRecord] = []
        for key in sorted(per_group):
            outputs.extend(per_group[key])
        counters.reduced_out = len(outputs)
        return outputs
