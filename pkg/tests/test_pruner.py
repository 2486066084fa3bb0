import numpy as np
import pytest

from bitgraph.bitcodes import BinaryDataset, CodeTable, hamming, hamming_to_many
from bitgraph.engine import MapReduceEngine
from bitgraph.graph import from_lists, graph_to_bytes
from bitgraph.pruner import PruneParams, prune_graph

from conftest import random_codes


def dataset(byte_values):
    codes = np.zeros((len(byte_values), 1), dtype=np.uint64)
    for i, b in enumerate(byte_values):
        codes[i, 0] = b
    return BinaryDataset(np.arange(len(byte_values), dtype=np.uint64), codes)


def full_graph(data, k):
    """Exact k-NN lists, (distance, label) order."""
    items = []
    for i in range(data.n):
        dists = hamming_to_many(data.codes[i], data.codes)
        order = np.lexsort((data.labels, dists))
        order = order[order != i][:k]
        items.append((i, data.labels[order], dists[order]))
    entries = np.array([0], dtype=np.uint64)
    return from_lists(items, entries, k, data.d_bits)


def reference_prune(data, labels, dists, params):
    """Straight restatement of the rule, scalar arithmetic only."""
    if not params.occlusion:
        return list(labels[: params.max_degree])
    kept = []
    for label, dist in zip(labels.tolist(), dists.tolist()):
        if len(kept) == params.max_degree:
            break
        code = data.codes[label]
        if any(hamming(data.codes[b], code) < dist for b in kept):
            continue
        kept.append(label)
    return kept


def run(data, graph, params, workers=1):
    engine = MapReduceEngine(workers=workers)
    return prune_graph(graph, CodeTable(data), params, engine)


def test_triangle_occlusion():
    # node 0 sees 1 (dist 1) and 2 (dist 2); 1 and 2 are distance 1 apart,
    # so the kept edge to 1 covers 2 and the 0-2 edge is dropped
    data = dataset([0b000, 0b001, 0b011])
    graph = full_graph(data, 2)
    pruned, stats = run(data, graph, PruneParams(max_degree=2))
    labels, dists = pruned.neighbors(0)
    assert labels.tolist() == [1] and dists.tolist() == [1]
    assert stats.occluded_edges >= 1


def test_equal_distance_is_not_occluding():
    # 3 and 5 are both distance 2 from 0 and distance 2 from each other:
    # the tie must keep both
    data = dataset([0b000, 0b011, 0b101])
    graph = full_graph(data, 2)
    pruned, _ = run(data, graph, PruneParams(max_degree=2))
    labels, dists = pruned.neighbors(0)
    assert labels.tolist() == [1, 2] and dists.tolist() == [2, 2]


def test_nearest_edge_always_survives():
    rng = np.random.default_rng(7)
    data = BinaryDataset(np.arange(60, dtype=np.uint64), random_codes(rng, 60, 64))
    graph = full_graph(data, 12)
    pruned, _ = run(data, graph, PruneParams(max_degree=4))
    for label, old_labels, _ in graph.iter_nodes():
        new_labels = pruned.neighbors(label)[0]
        assert len(new_labels) >= 1
        assert new_labels[0] == old_labels[0]


def test_degree_cap_applies():
    rng = np.random.default_rng(8)
    data = BinaryDataset(np.arange(80, dtype=np.uint64), random_codes(rng, 80, 128))
    graph = full_graph(data, 20)
    pruned, stats = run(data, graph, PruneParams(max_degree=5))
    assert pruned.k_max == 5
    assert int(pruned.degrees().max()) <= 5
    total = graph.total_edges
    assert stats.kept_edges + stats.occluded_edges + stats.overflow_edges == total
    assert stats.kept_edges == pruned.total_edges


def test_matches_scalar_reference(rng):
    anchors = random_codes(rng, 6, 128)
    rows = []
    for i in range(150):
        base = anchors[i % 6].copy()
        for f in rng.integers(0, 128, size=8):
            base[f // 64] ^= np.uint64(1) << np.uint64(f % 64)
        rows.append(base)
    data = BinaryDataset(np.arange(150, dtype=np.uint64), np.vstack(rows))
    graph = full_graph(data, 15)
    params = PruneParams(max_degree=6)
    pruned, _ = run(data, graph, params)
    for label, labels, dists in graph.iter_nodes():
        expect = reference_prune(data, labels, dists, params)
        assert pruned.neighbors(label)[0].tolist() == expect


def test_truncation_mode(rng):
    data = BinaryDataset(np.arange(50, dtype=np.uint64), random_codes(rng, 50, 64))
    graph = full_graph(data, 10)
    pruned, stats = run(data, graph, PruneParams(max_degree=4, occlusion=False))
    assert stats.occluded_edges == 0
    for label, labels, _ in graph.iter_nodes():
        assert pruned.neighbors(label)[0].tolist() == labels[:4].tolist()


def test_worker_invariance_and_metadata(rng):
    data = BinaryDataset(np.arange(90, dtype=np.uint64), random_codes(rng, 90, 128))
    graph = full_graph(data, 12)
    blobs = set()
    for workers in (1, 3, 8):
        pruned, _ = run(data, graph, PruneParams(max_degree=6), workers=workers)
        pruned.validate()
        assert np.array_equal(pruned.entry_labels, graph.entry_labels)
        assert pruned.d_bits == graph.d_bits
        blobs.add(graph_to_bytes(pruned))
    assert len(blobs) == 1


def test_isolated_node_passes_through():
    data = dataset([0b000, 0b001, 0b111])
    items = [
        (0, np.array([1], dtype=np.uint64), np.array([1], dtype=np.uint32)),
        (1, np.array([0], dtype=np.uint64), np.array([1], dtype=np.uint32)),
        (2, np.array([], dtype=np.uint64), np.array([], dtype=np.uint32)),
    ]
    graph = from_lists(items, np.array([0], dtype=np.uint64), 2, 64)
    pruned, _ = run(data, graph, PruneParams(max_degree=2))
    assert pruned.n == 3
    assert len(pruned.neighbors(2)[0]) == 0


def test_params_validation():
    from bitgraph.errors import UsageError

    with pytest.raises(UsageError):
        PruneParams(max_degree=0)


def test_occlusion_keeps_recall_close():
    # the rule discards edges, not reachability: at equal ef the pruned
    # graph must stay within two recall points of the full one
    from bitgraph.bkmeans import down_sample, train
    from bitgraph.build import BuildParams, build_base_graph
    from bitgraph.evaluator import brute_force_topn, recall
    from bitgraph.propagation import PropagationParams, propagate_round
    from bitgraph.reference import generate_reference
    from bitgraph.searcher import SearchIndex, SearchParams

    ref = generate_reference(5000, 100, scale=1.6, seed=33)
    engine = MapReduceEngine(workers=2)
    centers = train(down_sample(ref.codes, 64, 33), 64, max_iters=8, seed=33).centers
    graph, _ = build_base_graph(
        ref.codes, centers,
        BuildParams(k=20, m=64, coarse_num=500, seed=33, entry_samples=256),
        engine,
    )
    table = CodeTable(ref.codes)
    graph, _ = propagate_round(graph, table, PropagationParams(rounds=1), engine)
    pruned, stats = prune_graph(graph, table, PruneParams(max_degree=10), engine)
    assert stats.occluded_edges > 0

    truth = brute_force_topn(ref.query_codes, ref.codes, "hamming", 10)
    params = SearchParams(ef=256, topn=10)
    scores = []
    for g in (graph, pruned):
        index = SearchIndex(g, ref.codes)
        scores.append(np.mean([
            recall(index.search(ref.query_codes[i], params)[0], truth, i)
            for i in range(100)
        ]))
    assert scores[0] - scores[1] < 0.02
