"""Command-line front end.

Subcommands cover the whole life cycle: generate a reference set, binarize
real vectors, cluster codes, build a (sharded) graph index, search it, and
sweep search settings into a report with figures.

Settings resolve in order: command-line flag, then --config file, then the
built-in default. Exit codes: 0 success, 2 bad invocation, 3 bad or corrupt
data files, 4 internal pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .binarizer import fit, read_coder, write_coder
from .bitcodes import (
    BinaryDataset,
    RealDataset,
    check_aligned,
    read_codes,
    read_reals,
    write_codes,
    write_reals,
)
from .bkmeans import down_sample, train, write_centers
from .errors import FormatError, PipelineError, UsageError
from .evaluator import METRIC_HAMMING, METRIC_L2SQ, brute_force_topn, sweep, write_report_csv
from .reference import generate_reference
from .report import render_figures, render_objective_curve
from .searcher import SearchParams
from .shards import MANIFEST_NAME, MultiIndex, ShardBuildParams, build_shards

_DEFAULTS: dict[str, object] = {
    "workers": None,
    "seed": 0,
    # gen-reference
    "n": 10_000,
    "queries": 1000,
    "d_bits": 128,
    "dim": 64,
    "components": 64,
    "scale": 2.0,
    # clustering
    "m": 8192,
    "max_iters": 10,
    "sample_fraction": None,
    # graph build
    "k": 50,
    "coarse_num": 100_000,
    "rounds": 2,
    "max_degree": 50,
    "entry_samples": 1024,
    "shards": 1,
    # search / eval
    "ef": 512,
    "topn": 10,
    "ef_list": "64,128,256,512,1024,2048",
    "topn_list": "10,60",
}


def _load_config(path: str | Path) -> dict[str, str]:
    """Flat "key = value" file; blank lines and # comments are skipped."""
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key not in _DEFAULTS:
            raise FormatError(f"{path}:{lineno}: unknown setting {key!r}")
        if key in settings:
            raise FormatError(f"{path}:{lineno}: duplicate setting {key!r}")
        settings[key] = value.strip()
    return settings


class _Resolver:
    """Per-setting lookup: explicit flag beats config file beats default."""

    def __init__(self, args: argparse.Namespace, config: dict[str, str]):
        self._args = args
        self._config = config

    def get(self, name: str, cast):
        value = getattr(self._args, name, None)
        if value is not None:
            return value
        if name in self._config:
            raw = self._config[name]
            if raw == "":
                return None
            try:
                return cast(raw)
            except ValueError:
                raise FormatError(f"config setting {name}: cannot read {raw!r}") from None
        return _DEFAULTS[name]


def _int_list(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        values = [int(p) for p in parts]
    except ValueError:
        values = []
    if not values:
        raise UsageError(f"expected comma-separated integers, got {text!r}")
    return values


def _manifest_path(args: argparse.Namespace) -> Path:
    if bool(args.index) == bool(args.manifest):
        raise UsageError("give exactly one of --index DIR or --manifest FILE")
    return Path(args.manifest) if args.manifest else Path(args.index) / MANIFEST_NAME


def _reals_in_order(labels: np.ndarray, reals: RealDataset) -> np.ndarray:
    # check_aligned has established set equality; map rows into label order
    order = np.argsort(reals.labels, kind="stable")
    pos = np.searchsorted(reals.labels[order], labels)
    return reals.vectors[order][pos]


def _merge_datasets(parts: list[BinaryDataset]) -> BinaryDataset:
    labels = np.concatenate([p.labels for p in parts])
    codes = np.concatenate([p.codes for p in parts])
    order = np.argsort(labels, kind="stable")
    return BinaryDataset(labels[order], codes[order])


def _merge_real_datasets(parts: list[RealDataset]) -> RealDataset:
    labels = np.concatenate([p.labels for p in parts])
    vectors = np.concatenate([p.vectors for p in parts])
    order = np.argsort(labels, kind="stable")
    return RealDataset(labels[order], vectors[order])


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_reference(args: argparse.Namespace, r: _Resolver) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ref = generate_reference(
        n=r.get("n", int),
        queries=r.get("queries", int),
        d_bits=r.get("d_bits", int),
        dim=r.get("dim", int),
        components=r.get("components", int),
        scale=r.get("scale", float),
        seed=r.get("seed", int),
    )
    q = ref.query_codes.shape[0]
    qlabels = np.arange(q, dtype=np.uint64)
    write_codes(ref.codes, out / "points.codes")
    write_reals(ref.reals, out / "points.reals")
    write_codes(BinaryDataset(qlabels, ref.query_codes), out / "queries.codes")
    write_reals(RealDataset(qlabels, ref.query_reals), out / "queries.reals")
    write_coder(ref.coder, out / "coder.bdc")
    print(f"wrote {ref.codes.n} points and {q} queries to {out}")
    return 0


def _cmd_binarize(args: argparse.Namespace, r: _Resolver) -> int:
    if args.coder and args.d_bits is not None:
        raise UsageError("give either --coder or --d-bits, not both")
    data = read_reals(args.vectors)
    if args.coder:
        coder = read_coder(args.coder)
    else:
        coder = fit(data.vectors, r.get("d_bits", int), r.get("seed", int))
    write_codes(coder.encode_dataset(data), args.out)
    if args.save_coder:
        write_coder(coder, args.save_coder)
    print(f"encoded {data.n} vectors at {coder.d_bits} bits into {args.out}")
    return 0


def _cmd_cluster(args: argparse.Namespace, r: _Resolver) -> int:
    data = read_codes(args.codes)
    seed = r.get("seed", int)
    m = r.get("m", int)
    sample = down_sample(data, m, seed, r.get("sample_fraction", float))
    result = train(sample, m, max_iters=r.get("max_iters", int), seed=seed)
    write_centers(result.centers, args.out)
    print("iter,objective")
    for i, objective in enumerate(result.objectives):
        print(f"{i},{objective}")
    if args.plot:
        render_objective_curve([float(v) for v in result.objectives], args.plot)
    return 0


def _cmd_build(args: argparse.Namespace, r: _Resolver) -> int:
    out = Path(args.out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"{out}: already exists and is not an empty directory")
    fraction = r.get("sample_fraction", float)
    params = ShardBuildParams(
        k=r.get("k", int),
        m=r.get("m", int),
        coarse_num=r.get("coarse_num", int),
        rounds=r.get("rounds", int),
        max_degree=r.get("max_degree", int),
        occlusion=not args.no_occlusion,
        filter_enabled=not args.no_filter,
        entry_samples=r.get("entry_samples", int),
        max_iters=r.get("max_iters", int),
        sample_fraction=None if fraction is None else float(fraction),
        shards=r.get("shards", int),
        seed=r.get("seed", int),
    )
    data = read_codes(args.codes)
    reals = read_reals(args.reals) if args.reals else None
    if reals is not None:
        check_aligned(data, reals)

    out.parent.mkdir(parents=True, exist_ok=True)
    # build into a sibling scratch directory so a failed run leaves nothing
    # behind at the target path
    tmp = Path(tempfile.mkdtemp(prefix=out.name + ".part.", dir=out.parent))
    try:
        build_shards(
            data,
            params,
            tmp,
            reals=reals,
            workers=r.get("workers", int),
            parallel_shards=args.parallel_shards,
        )
        if out.exists():
            out.rmdir()
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"built {params.shards} shard(s) over {data.n} codes in {out}")
    return 0


def _cmd_search(args: argparse.Namespace, r: _Resolver) -> int:
    manifest = _manifest_path(args)
    if args.rerank and not args.query_reals:
        raise UsageError("--rerank needs --query-reals")
    params = SearchParams(
        ef=r.get("ef", int),
        topn=r.get("topn", int),
        entry_samples=r.get("entry_samples", int),
        rerank=args.rerank,
        seed=r.get("seed", int),
    )
    queries = read_codes(args.queries)
    query_reals = None
    if args.query_reals:
        qr = read_reals(args.query_reals)
        check_aligned(queries, qr)
        query_reals = _reals_in_order(queries.labels, qr)
    index = MultiIndex.load(manifest, load_reals=args.rerank, verify=args.verify)

    def emit(stream) -> int:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(
            [
                "query_label",
                "rank",
                "result_label",
                "distance",
                "hamming_evals_long",
                "hamming_evals_short",
                "l2_evals",
            ]
        )
        truncated = 0
        for i in range(queries.n):
            real = None if query_reals is None else query_reals[i]
            result, stats = index.search(queries.codes[i], params, real)
            truncated += int(stats.truncated)
            for rank in range(len(result)):
                dist = result.distances[rank]
                text = f"{dist:.6f}" if result.metric == METRIC_L2SQ else str(int(dist))
                writer.writerow(
                    [
                        int(queries.labels[i]),
                        rank + 1,
                        int(result.labels[rank]),
                        text,
                        stats.hamming_evals_long,
                        stats.hamming_evals_short,
                        stats.l2_evals,
                    ]
                )
        return truncated

    if args.out:
        with open(args.out, "w", newline="") as stream:
            truncated = emit(stream)
        print(f"wrote results for {queries.n} queries to {args.out}")
    else:
        truncated = emit(sys.stdout)
    if truncated:
        print(f"warning: {truncated} queries returned fewer than topn results", file=sys.stderr)
    return 0


def _cmd_eval(args: argparse.Namespace, r: _Resolver) -> int:
    manifest = _manifest_path(args)
    metric = args.metric
    need_reals = args.rerank or metric == METRIC_L2SQ
    if need_reals and not args.query_reals:
        raise UsageError(f"--metric {metric}/--rerank need --query-reals")
    ef_list = _int_list(r.get("ef_list", str))
    topn_list = _int_list(r.get("topn_list", str))

    queries = read_codes(args.queries)
    query_reals = None
    if args.query_reals:
        qr = read_reals(args.query_reals)
        check_aligned(queries, qr)
        query_reals = _reals_in_order(queries.labels, qr)
    index = MultiIndex.load(manifest, load_reals=need_reals, verify=args.verify)

    depth = max(topn_list)
    if metric == METRIC_HAMMING:
        stored = _merge_datasets([ix.codes_dataset() for ix in index.indexes])
        truth = brute_force_topn(queries.codes, stored, METRIC_HAMMING, depth)
    else:
        stored = _merge_real_datasets([ix.reals_dataset() for ix in index.indexes])
        truth = brute_force_topn(query_reals, stored, METRIC_L2SQ, depth)

    rows = sweep(
        index,
        queries.codes,
        truth,
        ef_list,
        topn_list,
        rerank=args.rerank,
        query_reals=query_reals,
        entry_samples=r.get("entry_samples", int),
        seed=r.get("seed", int),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(rows, out)
    written = [out]
    if not args.no_plots:
        written.extend(render_figures(rows, out.parent, prefix=out.stem))
    for path in written:
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_shared(parser: argparse.ArgumentParser) -> None:
    # also accepted after the subcommand name; SUPPRESS keeps a flag given
    # before the subcommand from being clobbered by a default
    parser.add_argument("--workers", type=int, default=argparse.SUPPRESS,
                        help="mapper thread count (default: one per cpu)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="base random seed (default 0)")
    parser.add_argument("--config", default=argparse.SUPPRESS, metavar="FILE",
                        help="settings file of 'key = value' lines")


def _add_index_source(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--index", metavar="DIR", default=None,
                        help=f"index directory holding {MANIFEST_NAME}")
    parser.add_argument("--manifest", metavar="FILE", default=None,
                        help="explicit manifest path")
    parser.add_argument("--verify", action="store_true",
                        help="re-hash every index file before loading")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitgraph",
        description="Binary-code nearest-neighbor engine over packed bit vectors.",
    )
    parser.add_argument("--workers", type=int, default=None,
                        help="mapper thread count (default: one per cpu)")
    parser.add_argument("--seed", type=int, default=None,
                        help="base random seed (default 0)")
    parser.add_argument("--config", default=None, metavar="FILE",
                        help="settings file of 'key = value' lines")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-reference", help="write a synthetic clustered dataset")
    _add_shared(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", type=int, default=None, help="point count (default 10000)")
    p.add_argument("--queries", type=int, default=None, help="query count (default 1000)")
    p.add_argument("--d-bits", dest="d_bits", type=int, default=None,
                   help="code width in bits, multiple of 64 (default 128)")
    p.add_argument("--dim", type=int, default=None, help="real dimension (default 64)")
    p.add_argument("--components", type=int, default=None,
                   help="mixture component count (default 64)")
    p.add_argument("--scale", type=float, default=None,
                   help="component spread (default 2.0)")
    p.set_defaults(func=_cmd_gen_reference)

    p = sub.add_parser("binarize", help="encode real vectors into packed codes")
    _add_shared(p)
    p.add_argument("--vectors", required=True, metavar="FILE", help="real vectors in")
    p.add_argument("--coder", default=None, metavar="FILE", help="fitted coder to reuse")
    p.add_argument("--d-bits", dest="d_bits", type=int, default=None,
                   help="fit a fresh coder at this width (default 128)")
    p.add_argument("--save-coder", dest="save_coder", default=None, metavar="FILE")
    p.add_argument("--out", required=True, metavar="FILE", help="packed codes out")
    p.set_defaults(func=_cmd_binarize)

    p = sub.add_parser("cluster", help="train cluster centers over packed codes")
    _add_shared(p)
    p.add_argument("--codes", required=True, metavar="FILE")
    p.add_argument("--m", type=int, default=None, help="center count (default 8192)")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None,
                   help="iteration cap (default 10)")
    p.add_argument("--sample-fraction", dest="sample_fraction", type=float, default=None,
                   help="train on this fraction of the codes")
    p.add_argument("--out", required=True, metavar="FILE", help="centers out")
    p.add_argument("--plot", default=None, metavar="PNG",
                   help="also render the objective curve")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("build", help="build a searchable (sharded) graph index")
    _add_shared(p)
    p.add_argument("--codes", required=True, metavar="FILE")
    p.add_argument("--reals", default=None, metavar="FILE",
                   help="matching real vectors, kept for reranking")
    p.add_argument("--out", required=True, metavar="DIR",
                   help="index directory (must not already hold files)")
    p.add_argument("--k", type=int, default=None, help="neighbors per node (default 50)")
    p.add_argument("--m", type=int, default=None, help="center count (default 8192)")
    p.add_argument("--coarse-num", dest="coarse_num", type=int, default=None,
                   help="cluster size cap per group (default 100000)")
    p.add_argument("--rounds", type=int, default=None,
                   help="refinement rounds (default 2)")
    p.add_argument("--max-degree", dest="max_degree", type=int, default=None,
                   help="pruned out-degree cap (default 50)")
    p.add_argument("--no-occlusion", dest="no_occlusion", action="store_true",
                   help="truncate lists instead of occlusion pruning")
    p.add_argument("--no-filter", dest="no_filter", action="store_true",
                   help="disable the candidate pre-filter during refinement")
    p.add_argument("--entry-samples", dest="entry_samples", type=int, default=None,
                   help="stored entry point count (default 1024)")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=None,
                   help="clustering iteration cap (default 10)")
    p.add_argument("--sample-fraction", dest="sample_fraction", type=float, default=None,
                   help="cluster on this fraction of the codes")
    p.add_argument("--shards", type=int, default=None, help="shard count (default 1)")
    p.add_argument("--parallel-shards", dest="parallel_shards", action="store_true",
                   help="build shards concurrently")
    p.set_defaults(func=_cmd_build)

    p = sub.add_parser("search", help="run queries against a built index")
    _add_shared(p)
    _add_index_source(p)
    p.add_argument("--queries", required=True, metavar="FILE", help="packed query codes")
    p.add_argument("--query-reals", dest="query_reals", default=None, metavar="FILE")
    p.add_argument("--rerank", action="store_true",
                   help="reorder candidates by exact squared L2")
    p.add_argument("--ef", type=int, default=None, help="pool size (default 512)")
    p.add_argument("--topn", type=int, default=None, help="results per query (default 10)")
    p.add_argument("--entry-samples", dest="entry_samples", type=int, default=None,
                   help="entry points probed per shard (default 1024)")
    p.add_argument("--out", default=None, metavar="FILE",
                   help="result CSV (default: stdout)")
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("eval", help="sweep search settings and report recall")
    _add_shared(p)
    _add_index_source(p)
    p.add_argument("--queries", required=True, metavar="FILE", help="packed query codes")
    p.add_argument("--query-reals", dest="query_reals", default=None, metavar="FILE")
    p.add_argument("--metric", choices=[METRIC_HAMMING, METRIC_L2SQ],
                   default=METRIC_HAMMING, help="ground-truth metric")
    p.add_argument("--ef-list", dest="ef_list", default=None, metavar="CSV",
                   help="pool sizes to sweep (default 64..2048)")
    p.add_argument("--topn-list", dest="topn_list", default=None, metavar="CSV",
                   help="result counts to score (default 10,60)")
    p.add_argument("--rerank", action="store_true",
                   help="reorder candidates by exact squared L2")
    p.add_argument("--entry-samples", dest="entry_samples", type=int, default=None,
                   help="entry points probed per shard (default 1024)")
    p.add_argument("--out", required=True, metavar="FILE", help="report CSV path")
    p.add_argument("--no-plots", dest="no_plots", action="store_true",
                   help="skip the PNG figures next to the CSV")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse has already printed its message
        if isinstance(e.code, int):
            return 0 if e.code == 0 else 2
        return 2
    try:
        config = _load_config(args.config) if args.config else {}
        return args.func(args, _Resolver(args, config))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FormatError as e:  # covers manifest and index-data problems
        print(f"error: {e}", file=sys.stderr)
        return 3
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
