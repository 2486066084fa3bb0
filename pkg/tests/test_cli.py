"""Command-line behavior: exit codes, file outputs, and CSV fidelity.

Search quality itself is covered by the library tests; here the subject is
the wiring: flags reach the right parameters, outputs land where promised,
failures map to the documented exit codes and leave no partial artifacts.
"""

import csv
import shutil
from pathlib import Path

import numpy as np
import pytest

from bitgraph.cli import main
from bitgraph.bitcodes import read_codes, read_reals
from bitgraph.errors import PipelineError
from bitgraph.evaluator import read_report_csv
from bitgraph.searcher import SearchParams
from bitgraph.shards import MANIFEST_NAME, MultiIndex

import bitgraph.cli as cli_module


def _files_equal(a: Path, b: Path) -> bool:
    return a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """One generated reference set plus one built index, shared read-only."""
    root = tmp_path_factory.mktemp("cliwork")
    ref = root / "ref"
    index = root / "index"
    assert main([
        "gen-reference", "--out", str(ref), "--n", "300", "--queries", "16",
        "--d-bits", "128", "--dim", "16", "--components", "8", "--seed", "7",
    ]) == 0
    assert main([
        "build", "--codes", str(ref / "points.codes"),
        "--reals", str(ref / "points.reals"), "--out", str(index),
        "--k", "8", "--m", "16", "--coarse-num", "300", "--rounds", "1",
        "--max-degree", "12", "--entry-samples", "32", "--seed", "7",
    ]) == 0
    return root


def test_gen_reference_is_deterministic(tmp_path):
    args = ["--n", "120", "--queries", "5", "--d-bits", "64", "--dim", "8",
            "--components", "4", "--seed", "3"]
    assert main(["gen-reference", "--out", str(tmp_path / "a")] + args) == 0
    assert main(["gen-reference", "--out", str(tmp_path / "b")] + args) == 0
    names = ["points.codes", "points.reals", "queries.codes", "queries.reals", "coder.bdc"]
    for name in names:
        assert _files_equal(tmp_path / "a" / name, tmp_path / "b" / name), name


def test_binarize_saves_and_reuses_coder(work, tmp_path):
    vectors = work / "ref" / "points.reals"
    assert main([
        "binarize", "--vectors", str(vectors), "--d-bits", "64", "--seed", "5",
        "--save-coder", str(tmp_path / "coder.bdc"), "--out", str(tmp_path / "fresh.codes"),
    ]) == 0
    assert main([
        "binarize", "--vectors", str(vectors), "--coder", str(tmp_path / "coder.bdc"),
        "--out", str(tmp_path / "reused.codes"),
    ]) == 0
    assert _files_equal(tmp_path / "fresh.codes", tmp_path / "reused.codes")
    assert read_codes(tmp_path / "fresh.codes").d_bits == 64
    # a coder to load and a width to fit are mutually exclusive
    assert main([
        "binarize", "--vectors", str(vectors), "--coder", str(tmp_path / "coder.bdc"),
        "--d-bits", "64", "--out", str(tmp_path / "x.codes"),
    ]) == 2


def test_cluster_prints_objective_csv(work, tmp_path, capsys):
    rc = main([
        "cluster", "--codes", str(work / "ref" / "points.codes"), "--m", "8",
        "--seed", "7", "--out", str(tmp_path / "centers.bdk"),
        "--plot", str(tmp_path / "objective.png"),
    ])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "iter,objective"
    objectives = [int(line.split(",")[1]) for line in lines[1:]]
    assert objectives == sorted(objectives, reverse=True)
    assert (tmp_path / "centers.bdk").is_file()
    assert (tmp_path / "objective.png").read_bytes()[:4] == b"\x89PNG"


def test_build_is_repeatable(work, tmp_path):
    args = [
        "build", "--codes", str(work / "ref" / "points.codes"),
        "--out", None, "--k", "8", "--m", "16", "--coarse-num", "300",
        "--rounds", "1", "--max-degree", "12", "--entry-samples", "32",
        "--seed", "7",
    ]
    for out in (tmp_path / "one", tmp_path / "two"):
        args[4] = str(out)
        assert main(args) == 0
    first = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert first == sorted(p.name for p in (tmp_path / "two").iterdir())
    for name in first:
        assert _files_equal(tmp_path / "one" / name, tmp_path / "two" / name), name


def test_build_rejects_bad_params_before_writing(work, tmp_path):
    out = tmp_path / "never"
    rc = main([
        "build", "--codes", str(work / "ref" / "points.codes"),
        "--out", str(out), "--m", "0",
    ])
    assert rc == 2
    assert not out.exists()


def test_build_failure_leaves_no_partial_output(work, tmp_path):
    # 301 shards over 300 points guarantees an empty shard after the
    # cluster-training step has already written files into the scratch dir
    out = tmp_path / "gone"
    rc = main([
        "build", "--codes", str(work / "ref" / "points.codes"),
        "--out", str(out), "--m", "16", "--shards", "301",
    ])
    assert rc == 2
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_build_refuses_occupied_directory(work, tmp_path):
    target = tmp_path / "busy"
    target.mkdir()
    (target / "keep.txt").write_text("precious")
    rc = main([
        "build", "--codes", str(work / "ref" / "points.codes"),
        "--out", str(target), "--m", "16",
    ])
    assert rc == 2
    assert (target / "keep.txt").read_text() == "precious"


def test_search_csv_matches_library_results(work, tmp_path):
    out = tmp_path / "hits.csv"
    rc = main([
        "search", "--index", str(work / "index"),
        "--queries", str(work / "ref" / "queries.codes"),
        "--ef", "64", "--topn", "4", "--seed", "7", "--out", str(out),
    ])
    assert rc == 0
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == [
        "query_label", "rank", "result_label", "distance",
        "hamming_evals_long", "hamming_evals_short", "l2_evals",
    ]

    index = MultiIndex.load(work / "index" / MANIFEST_NAME)
    queries = read_codes(work / "ref" / "queries.codes")
    params = SearchParams(ef=64, topn=4, seed=7)
    body = rows[1:]
    assert len(body) == queries.n * 4
    cursor = 0
    for i in range(queries.n):
        result, stats = index.search(queries.codes[i], params)
        for rank in range(4):
            row = body[cursor]
            cursor += 1
            assert row[0] == str(int(queries.labels[i]))
            assert row[1] == str(rank + 1)
            assert row[2] == str(int(result.labels[rank]))
            assert row[3] == str(int(result.distances[rank]))
            assert row[4:] == [
                str(stats.hamming_evals_long),
                str(stats.hamming_evals_short),
                str(stats.l2_evals),
            ]


def test_search_rerank_emits_float_distances(work, capsys):
    rc = main([
        "search", "--index", str(work / "index"),
        "--queries", str(work / "ref" / "queries.codes"),
        "--query-reals", str(work / "ref" / "queries.reals"),
        "--rerank", "--ef", "64", "--topn", "3",
    ])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    first = lines[1].split(",")
    assert "." in first[3]  # squared L2 rendered as a float
    assert int(first[6]) > 0  # rerank evaluated real vectors


def test_search_flag_validation(work):
    queries = str(work / "ref" / "queries.codes")
    assert main(["search", "--index", str(work / "index"),
                 "--queries", queries, "--ef", "4", "--topn", "9"]) == 2
    assert main(["search", "--index", str(work / "index"),
                 "--queries", queries, "--rerank"]) == 2
    assert main(["search", "--index", str(work / "index"),
                 "--manifest", "x", "--queries", queries]) == 2
    assert main(["search", "--queries", queries]) == 2


def test_verify_detects_tampering(work, tmp_path):
    copy = tmp_path / "tampered"
    shutil.copytree(work / "index", copy)
    target = copy / "shard0.codes"
    blob = bytearray(target.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    target.write_bytes(bytes(blob))
    queries = str(work / "ref" / "queries.codes")
    assert main(["search", "--index", str(copy), "--queries", queries,
                 "--verify"]) == 3
    # without --verify the flipped code word goes unnoticed
    assert main(["search", "--index", str(copy), "--queries", queries]) == 0


def test_eval_writes_report_and_figures(work, tmp_path):
    out = tmp_path / "report" / "report.csv"
    rc = main([
        "eval", "--index", str(work / "index"),
        "--queries", str(work / "ref" / "queries.codes"),
        "--ef-list", "16,64", "--topn-list", "3,8", "--seed", "7",
        "--out", str(out),
    ])
    assert rc == 0
    rows = read_report_csv(out)
    assert [(r.ef, r.topn) for r in rows] == [(16, 3), (16, 8), (64, 3), (64, 8)]
    assert all(r.metric == "hamming" and not r.rerank for r in rows)
    for name in ("report_recall_vs_ef.png", "report_recall_vs_time.png",
                 "report_evals_vs_ef.png"):
        assert (out.parent / name).is_file(), name


def test_eval_no_plots_and_l2_rerank(work, tmp_path):
    out = tmp_path / "report.csv"
    rc = main([
        "eval", "--index", str(work / "index"),
        "--queries", str(work / "ref" / "queries.codes"),
        "--query-reals", str(work / "ref" / "queries.reals"),
        "--metric", "l2sq", "--rerank", "--ef-list", "32", "--topn-list", "5",
        "--out", str(out), "--no-plots",
    ])
    assert rc == 0
    rows = read_report_csv(out)
    assert len(rows) == 1 and rows[0].metric == "l2sq" and rows[0].rerank
    assert rows[0].l2_evals_mean > 0
    assert list(tmp_path.glob("*.png")) == []


def test_eval_l2_requires_query_reals(work, tmp_path):
    rc = main([
        "eval", "--index", str(work / "index"),
        "--queries", str(work / "ref" / "queries.codes"),
        "--metric", "l2sq", "--out", str(tmp_path / "r.csv"),
    ])
    assert rc == 2


def test_config_file_resolution(work, tmp_path, capsys):
    queries = str(work / "ref" / "queries.codes")
    cfg = tmp_path / "settings.cfg"
    cfg.write_text("# search settings\ntopn = 5\nef = 64\n")
    assert main(["search", "--index", str(work / "index"), "--queries", queries,
                 "--config", str(cfg)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 + 16 * 5  # header plus topn rows per query

    # an explicit flag wins over the config file
    assert main(["search", "--index", str(work / "index"), "--queries", queries,
                 "--config", str(cfg), "--topn", "2"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 + 16 * 2

    bad = tmp_path / "bad.cfg"
    bad.write_text("bogus = 3\n")
    assert main(["search", "--index", str(work / "index"), "--queries", queries,
                 "--config", str(bad)]) == 3


def test_parser_level_exit_codes(tmp_path):
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["--help"]) == 0
    assert main(["gen-reference"]) == 2  # --out is required


def test_pipeline_error_maps_to_exit_4(work, tmp_path, monkeypatch):
    def explode(path):
        raise PipelineError("stage counters disagree")

    monkeypatch.setattr(cli_module, "_load_config", explode)
    cfg = tmp_path / "any.cfg"
    cfg.write_text("")
    rc = main(["search", "--index", str(work / "index"),
               "--queries", str(work / "ref" / "queries.codes"),
               "--config", str(cfg)])
    assert rc == 4
