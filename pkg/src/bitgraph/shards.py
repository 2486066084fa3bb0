"""Sharded index builds over one shared clustering, and fan-out search.

The dataset is clustered once, split into disjoint shards by a seeded
label hash, and each shard gets its own graph from the same center set
(build, refinement rounds, prune). A plain-text manifest records the
shard files, the configuration, and content hashes, so a search process
can load, verify, and fan out over every shard, merging the per-shard
pools by distance.

Shard builds share no mutable state; running them sequentially or
concurrently produces identical files.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bitcodes import (
    BinaryDataset,
    CodeTable,
    RealDataset,
    read_codes,
    read_reals,
    write_codes,
    write_reals,
)
from .bkmeans import down_sample, train, write_centers
from .build import BuildParams, build_base_graph
from .engine import MapReduceEngine, default_workers
from .errors import ManifestError, UsageError
from .graph import read_graph, write_graph
from .propagation import PropagationParams, propagate
from .pruner import PruneParams, prune_graph
from .searcher import ResultSet, SearchIndex, SearchParams, SearchStats

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "index.manifest"
CENTERS_NAME = "centers.bdk"


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """Standard 64-bit finalizer; uniform enough for shard assignment."""
    with np.errstate(over="ignore"):  # wraparound is the point
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def shard_of(labels: np.ndarray, shards: int, seed: int) -> np.ndarray:
    salt = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return (_splitmix64(np.asarray(labels, dtype=np.uint64) ^ salt) % np.uint64(shards)).astype(np.int64)


def split_dataset(data: BinaryDataset, shards: int, seed: int) -> list[BinaryDataset]:
    """Disjoint partition by seeded label hash; union is the input."""
    if shards < 1:
        raise UsageError("shard count must be at least 1")
    if shards > data.n:
        raise UsageError(f"cannot split {data.n} points into {shards} shards")
    if shards == 1:
        return [data]
    owner = shard_of(data.labels, shards, seed)
    return [
        BinaryDataset(data.labels[owner == s], data.codes[owner == s])
        for s in range(shards)
    ]


@dataclass(frozen=True)
class ShardBuildParams:
    """One bundle for every stage of a (possibly sharded) build."""

    k: int = 50
    m: int = 8192
    coarse_num: int = 100_000
    rounds: int = 2
    max_degree: int = 50
    occlusion: bool = True
    filter_enabled: bool = True
    entry_samples: int = 1024
    max_iters: int = 10
    sample_fraction: float | None = None
    shards: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.shards < 1:
            raise UsageError("shards must be at least 1")
        if self.rounds < 0:
            raise UsageError("rounds must be non-negative")
        # delegate the rest: constructing the per-stage params validates them
        self.build_params(0)
        PropagationParams(rounds=self.rounds, filter_enabled=self.filter_enabled)
        PruneParams(max_degree=self.max_degree, occlusion=self.occlusion)

    def build_params(self, shard: int) -> BuildParams:
        return BuildParams(
            k=self.k,
            m=self.m,
            coarse_num=self.coarse_num,
            seed=self.seed + shard,
            entry_samples=self.entry_samples,
        )

    def as_config(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = "" if value is None else str(value)
        return out


@dataclass(frozen=True)
class ShardEntry:
    codes: str
    graph: str
    reals: str | None
    label_min: int
    label_max: int
    count: int


@dataclass(frozen=True)
class ShardManifest:
    version: int
    shards: int
    seed: int
    d_bits: int
    centers: str
    config: dict[str, str]
    entries: list[ShardEntry]
    hashes: dict[str, str]  # relative path -> sha256 hex


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(manifest: ShardManifest, path: str | Path) -> None:
    lines = [
        f"manifest_version = {manifest.version}",
        f"shards = {manifest.shards}",
        f"seed = {manifest.seed}",
        f"d_bits = {manifest.d_bits}",
        f"centers = {manifest.centers}",
    ]
    for key in sorted(manifest.config):
        lines.append(f"config.{key} = {manifest.config[key]}")
    for i, entry in enumerate(manifest.entries):
        lines.append(f"shard.{i}.codes = {entry.codes}")
        lines.append(f"shard.{i}.graph = {entry.graph}")
        if entry.reals is not None:
            lines.append(f"shard.{i}.reals = {entry.reals}")
        lines.append(f"shard.{i}.labels = {entry.label_min}..{entry.label_max}")
        lines.append(f"shard.{i}.count = {entry.count}")
    for name in sorted(manifest.hashes):
        lines.append(f"hash.{name} = {manifest.hashes[name]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> ShardManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: no such manifest")
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in pairs:
            raise ManifestError(f"{path}:{lineno}: duplicate key {key}")
        pairs[key] = value

    def take(key: str) -> str:
        if key not in pairs:
            raise ManifestError(f"{path}: missing key {key}")
        return pairs.pop(key)

    def take_int(key: str) -> int:
        value = take(key)
        try:
            return int(value)
        except ValueError:
            raise ManifestError(f"{path}: key {key} is not an integer: {value!r}")

    version = take_int("manifest_version")
    if version != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {version}")
    shards = take_int("shards")
    seed = take_int("seed")
    d_bits = take_int("d_bits")
    centers = take("centers")
    if shards < 1:
        raise ManifestError(f"{path}: shard count {shards} out of range")

    entries = []
    for i in range(shards):
        codes = take(f"shard.{i}.codes")
        graph = take(f"shard.{i}.graph")
        reals = pairs.pop(f"shard.{i}.reals", None)
        labels = take(f"shard.{i}.labels")
        count = take_int(f"shard.{i}.count")
        lo, sep, hi = labels.partition("..")
        if not sep:
            raise ManifestError(f"{path}: bad label range {labels!r}")
        entries.append(ShardEntry(codes, graph, reals, int(lo), int(hi), count))

    config = {}
    hashes = {}
    for key in list(pairs):
        if key.startswith("config."):
            config[key[len("config.") :]] = pairs.pop(key)
        elif key.startswith("hash."):
            hashes[key[len("hash.") :]] = pairs.pop(key)
    if pairs:
        raise ManifestError(f"{path}: unknown key {next(iter(pairs))}")
    return ShardManifest(version, shards, seed, d_bits, centers, config, entries, hashes)


def verify_manifest(manifest: ShardManifest, base_dir: str | Path) -> None:
    """Re-hash every listed file; any mismatch or absence is an error."""
    base = Path(base_dir)
    for name, expect in manifest.hashes.items():
        target = base / name
        if not target.is_file():
            raise ManifestError(f"{target}: listed in manifest but missing")
        actual = _sha256(target)
        if actual != expect:
            raise ManifestError(f"{target}: hash mismatch (expected {expect[:12]}...)")


def _build_one_shard(
    shard: int,
    data: BinaryDataset,
    centers,
    params: ShardBuildParams,
    reals_lookup,
    out_dir: Path,
    workers: int,
) -> ShardEntry:
    engine = MapReduceEngine(workers=workers)
    graph, _ = build_base_graph(data, centers, params.build_params(shard), engine)
    table = CodeTable(data)
    if params.rounds:
        prop = PropagationParams(rounds=params.rounds, filter_enabled=params.filter_enabled)
        graph, _ = propagate(graph, table, prop, engine)
    prune = PruneParams(max_degree=params.max_degree, occlusion=params.occlusion)
    graph, _ = prune_graph(graph, table, prune, engine)

    codes_name = f"shard{shard}.codes"
    graph_name = f"shard{shard}.graph"
    write_codes(data, out_dir / codes_name)
    write_graph(graph, out_dir / graph_name)
    reals_name = None
    if reals_lookup is not None:
        reals_name = f"shard{shard}.reals"
        write_reals(reals_lookup(data.labels), out_dir / reals_name)
    return ShardEntry(
        codes_name,
        graph_name,
        reals_name,
        int(data.labels.min()),
        int(data.labels.max()),
        data.n,
    )


def build_shards(
    data: BinaryDataset,
    params: ShardBuildParams,
    out_dir: str | Path,
    reals: RealDataset | None = None,
    workers: int | None = None,
    parallel_shards: bool = False,
    extra_config: dict[str, str] | None = None,
) -> ShardManifest:
    """Cluster once, split, build every shard, write files and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = default_workers() if workers is None else workers

    sample = down_sample(data, params.m, params.seed, params.sample_fraction)
    centers = train(sample, params.m, max_iters=params.max_iters, seed=params.seed).centers
    write_centers(centers, out / CENTERS_NAME)

    parts = split_dataset(data, params.shards, params.seed)
    for s, part in enumerate(parts):
        if part.n == 0:
            raise UsageError(f"shard {s} is empty; use fewer shards")

    reals_lookup = None
    if reals is not None:
        order = np.argsort(reals.labels, kind="stable")
        sorted_labels = reals.labels[order]
        sorted_vectors = reals.vectors[order]

        def reals_lookup(labels: np.ndarray) -> RealDataset:
            pos = np.searchsorted(sorted_labels, labels)
            bad = (pos >= len(sorted_labels)) | (
                sorted_labels[np.minimum(pos, len(sorted_labels) - 1)] != labels
            )
            if bad.any():
                raise UsageError(f"label {int(labels[bad][0])} has no real vector")
            return RealDataset(labels.copy(), sorted_vectors[pos])

    def job(s: int) -> ShardEntry:
        return _build_one_shard(s, parts[s], centers, params, reals_lookup, out, workers)

    if parallel_shards and params.shards > 1:
        with ThreadPoolExecutor(max_workers=min(params.shards, 8)) as pool:
            entries = list(pool.map(job, range(params.shards)))
    else:
        entries = [job(s) for s in range(params.shards)]

    config = params.as_config()
    if extra_config:
        config.update(extra_config)
    names = [CENTERS_NAME]
    for entry in entries:
        names.extend(n for n in (entry.codes, entry.graph, entry.reals) if n)
    manifest = ShardManifest(
        version=MANIFEST_VERSION,
        shards=params.shards,
        seed=params.seed,
        d_bits=data.d_bits,
        centers=CENTERS_NAME,
        config=config,
        entries=entries,
        hashes={name: _sha256(out / name) for name in names},
    )
    write_manifest(manifest, out / MANIFEST_NAME)
    log.info("built %d shard(s) in %s", params.shards, out)
    return manifest


class MultiIndex:
    """All shard indexes of one manifest, searched as a single dataset."""

    def __init__(self, indexes: list[SearchIndex]):
        if not indexes:
            raise UsageError("at least one shard index required")
        self.indexes = indexes

    @classmethod
    def load(
        cls,
        manifest_path: str | Path,
        load_reals: bool = False,
        verify: bool = False,
    ) -> "MultiIndex":
        manifest_path = Path(manifest_path)
        manifest = read_manifest(manifest_path)
        base = manifest_path.parent
        if verify:
            verify_manifest(manifest, base)
        indexes = []
        for i, entry in enumerate(manifest.entries):
            for name in (entry.codes, entry.graph):
                if not (base / name).is_file():
                    raise ManifestError(f"{base / name}: shard file missing")
            codes = read_codes(base / entry.codes)
            graph = read_graph(base / entry.graph)
            reals = None
            if load_reals:
                if entry.reals is None:
                    raise ManifestError(f"shard {i} stores no real vectors")
                if not (base / entry.reals).is_file():
                    raise ManifestError(f"{base / entry.reals}: shard file missing")
                reals = read_reals(base / entry.reals)
            indexes.append(SearchIndex(graph, codes, reals))
        return cls(indexes)

    @property
    def n(self) -> int:
        return sum(index.n for index in self.indexes)

    def search(
        self,
        query_code: np.ndarray,
        params: SearchParams,
        query_real: np.ndarray | None = None,
    ) -> tuple[ResultSet, SearchStats]:
        """Fan out, then keep the topn of the concatenated shard pools."""
        pools = []
        total = SearchStats()
        metric = None
        for index in self.indexes:
            # ask each shard for its whole pool so the merge sees everything
            shard_params = SearchParams(
                ef=params.ef,
                topn=params.ef,
                entry_samples=params.entry_samples,
                rerank=params.rerank,
                seed=params.seed,
            )
            result, stats = index.search(query_code, shard_params, query_real)
            pools.append(result)
            metric = result.metric
            total.hamming_evals_long += stats.hamming_evals_long
            total.hamming_evals_short += stats.hamming_evals_short
            total.l2_evals += stats.l2_evals
            total.hops += stats.hops
        labels = np.concatenate([p.labels for p in pools])
        dists = np.concatenate([p.distances for p in pools])
        order = np.lexsort((labels, dists))[: params.topn]
        total.truncated = len(order) < params.topn
        return ResultSet(labels[order], dists[order], metric), total
