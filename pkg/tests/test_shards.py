import numpy as np
import pytest

from bitgraph.bitcodes import BinaryDataset, hamming_to_many, read_codes, read_reals
from bitgraph.errors import ManifestError, UsageError
from bitgraph.evaluator import METRIC_HAMMING, brute_force_topn
from bitgraph.graph import read_graph
from bitgraph.reference import generate_reference
from bitgraph.searcher import SearchIndex, SearchParams
from bitgraph.shards import (
    MultiIndex,
    ShardBuildParams,
    build_shards,
    read_manifest,
    shard_of,
    split_dataset,
    verify_manifest,
    write_manifest,
)

from conftest import random_codes


@pytest.fixture
def small(rng):
    ref = generate_reference(n=400, queries=8, d_bits=128, dim=16, components=8, seed=11)
    return ref


def small_params(shards=3):
    return ShardBuildParams(
        k=6,
        m=8,
        coarse_num=120,
        rounds=1,
        max_degree=6,
        entry_samples=16,
        max_iters=4,
        shards=shards,
        seed=11,
    )


def test_split_identity_union_and_determinism(rng):
    data = BinaryDataset(np.arange(500, dtype=np.uint64), random_codes(rng, 500, 64))
    assert split_dataset(data, 1, 3)[0] is data

    parts = split_dataset(data, 4, seed=3)
    again = split_dataset(data, 4, seed=3)
    all_labels = np.concatenate([p.labels for p in parts])
    assert sorted(all_labels.tolist()) == data.labels.tolist()
    for p, q in zip(parts, again):
        assert np.array_equal(p.labels, q.labels)
        assert np.array_equal(p.codes, q.codes)
    seen = set()
    for p in parts:
        part_set = set(p.labels.tolist())
        assert not (seen & part_set)
        seen |= part_set


def test_split_balance_statistics():
    labels = np.arange(20000, dtype=np.uint64)
    owner = shard_of(labels, 4, seed=123)
    sizes = np.bincount(owner, minlength=4)
    assert sizes.sum() == 20000
    assert np.all(np.abs(sizes - 5000) <= 250)  # within 5%


def test_split_validation(rng):
    data = BinaryDataset(np.arange(3, dtype=np.uint64), random_codes(rng, 3, 64))
    with pytest.raises(UsageError):
        split_dataset(data, 0, 1)
    with pytest.raises(UsageError):
        split_dataset(data, 4, 1)


def test_build_writes_closed_shards_and_manifest(tmp_path, small):
    ref = small
    manifest = build_shards(
        ref.codes, small_params(), tmp_path, reals=ref.reals, workers=1
    )
    assert (tmp_path / "index.manifest").is_file()
    assert (tmp_path / manifest.centers).is_file()
    loaded = read_manifest(tmp_path / "index.manifest")
    assert loaded == manifest

    seen = set()
    for entry in manifest.entries:
        codes = read_codes(tmp_path / entry.codes)
        graph = read_graph(tmp_path / entry.graph)
        reals = read_reals(tmp_path / entry.reals)
        shard_set = set(codes.labels.tolist())
        assert set(graph.node_labels.tolist()) == shard_set
        assert set(reals.labels.tolist()) == shard_set
        assert set(graph.nbr_labels.tolist()) <= shard_set  # closure
        assert entry.count == codes.n
        assert entry.label_min == int(codes.labels.min())
        assert entry.label_max == int(codes.labels.max())
        assert not (seen & shard_set)
        seen |= shard_set
    assert seen == set(ref.codes.labels.tolist())
    verify_manifest(manifest, tmp_path)


def test_sequential_and_parallel_builds_identical(tmp_path, small):
    ref = small
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    build_shards(ref.codes, small_params(), a_dir, reals=ref.reals, workers=1)
    build_shards(
        ref.codes, small_params(), b_dir, reals=ref.reals, workers=1, parallel_shards=True
    )
    for path in sorted(a_dir.iterdir()):
        other = b_dir / path.name
        assert other.is_file(), path.name
        assert path.read_bytes() == other.read_bytes(), path.name


def test_verify_catches_tampering(tmp_path, small):
    ref = small
    manifest = build_shards(ref.codes, small_params(), tmp_path, workers=1)
    verify_manifest(manifest, tmp_path)
    target = tmp_path / manifest.entries[0].codes
    blob = bytearray(target.read_bytes())
    blob[-1] ^= 0xFF
    target.write_bytes(bytes(blob))
    with pytest.raises(ManifestError):
        verify_manifest(manifest, tmp_path)
    target.unlink()
    with pytest.raises(ManifestError):
        verify_manifest(manifest, tmp_path)


def test_manifest_parse_errors(tmp_path, small):
    ref = small
    manifest = build_shards(ref.codes, small_params(shards=1), tmp_path, workers=1)
    path = tmp_path / "index.manifest"
    good = path.read_text()

    path.write_text(good + "mystery_key = 1\n")
    with pytest.raises(ManifestError):
        read_manifest(path)
    path.write_text(good.replace("manifest_version = 1", "manifest_version = 9"))
    with pytest.raises(ManifestError):
        read_manifest(path)
    path.write_text("\n".join(good.splitlines()[1:]))
    with pytest.raises(ManifestError):
        read_manifest(path)
    path.write_text(good + good.splitlines()[0] + "\n")
    with pytest.raises(ManifestError):
        read_manifest(path)
    path.write_text(good + "just some words\n")
    with pytest.raises(ManifestError):
        read_manifest(path)
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "absent.manifest")


def test_per_shard_brute_force_merges_to_global(small):
    ref = small
    parts = split_dataset(ref.codes, 3, seed=11)
    global_truth = brute_force_topn(ref.query_codes, ref.codes, METRIC_HAMMING, 5)
    for qi in range(len(ref.query_codes)):
        merged = []
        for part in parts:
            dists = hamming_to_many(ref.query_codes[qi], part.codes)
            order = np.lexsort((part.labels, dists))[:5]
            merged.extend(zip(dists[order].tolist(), part.labels[order].tolist()))
        merged.sort()
        assert [label for _, label in merged[:5]] == global_truth.labels[qi].tolist()


def test_single_shard_search_matches_direct_index(tmp_path, small):
    ref = small
    build_shards(ref.codes, small_params(shards=1), tmp_path, reals=ref.reals, workers=1)
    multi = MultiIndex.load(tmp_path / "index.manifest", load_reals=True, verify=True)
    direct = SearchIndex(multi.indexes[0].graph, ref.codes, ref.reals)

    for rerank in (False, True):
        params = SearchParams(ef=32, topn=8, rerank=rerank, seed=4)
        for qi in range(len(ref.query_codes)):
            real = ref.query_reals[qi] if rerank else None
            mine, mine_stats = multi.search(ref.query_codes[qi], params, real)
            theirs, _ = direct.search(ref.query_codes[qi], params, real)
            assert mine.labels.tobytes() == theirs.labels.tobytes()
            assert mine.distances.tobytes() == theirs.distances.tobytes()
            assert mine.metric == theirs.metric


def test_multi_shard_merge_matches_pool_oracle(tmp_path, small):
    ref = small
    build_shards(ref.codes, small_params(), tmp_path, workers=1)
    multi = MultiIndex.load(tmp_path / "index.manifest")
    params = SearchParams(ef=24, topn=6, seed=2)
    for qi in range(len(ref.query_codes)):
        merged, _ = multi.search(ref.query_codes[qi], params)
        pools = []
        for index in multi.indexes:
            pool, _ = index.search(
                ref.query_codes[qi], SearchParams(ef=24, topn=24, seed=2)
            )
            pools.extend(zip(pool.distances.tolist(), pool.labels.tolist()))
        pools.sort()
        assert merged.labels.tolist() == [label for _, label in pools[:6]]
        assert merged.distances.tolist() == [d for d, _ in pools[:6]]


def test_missing_shard_file_fails_load(tmp_path, small):
    ref = small
    manifest = build_shards(ref.codes, small_params(), tmp_path, workers=1)
    (tmp_path / manifest.entries[1].graph).unlink()
    with pytest.raises(ManifestError):
        MultiIndex.load(tmp_path / "index.manifest")
    with pytest.raises(ManifestError):  # no reals were written at all
        build_shards(ref.codes, small_params(shards=1), tmp_path / "x", workers=1)
        MultiIndex.load(tmp_path / "x" / "index.manifest", load_reals=True)


def test_empty_shard_is_rejected(tmp_path, rng):
    # find two labels landing in the same shard so the other comes up empty
    seed = 5
    a = 0
    b = next(
        l for l in range(1, 200) if shard_of(np.array([l], dtype=np.uint64), 2, seed)[0]
        == shard_of(np.array([0], dtype=np.uint64), 2, seed)[0]
    )
    data = BinaryDataset(np.array([a, b], dtype=np.uint64), random_codes(rng, 2, 64))
    params = ShardBuildParams(k=1, m=1, coarse_num=2, rounds=0, max_degree=1,
                              entry_samples=1, shards=2, seed=seed)
    with pytest.raises(UsageError):
        build_shards(data, params, tmp_path, workers=1)
