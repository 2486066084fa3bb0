"""Figures rendered next to an evaluation CSV.

Each sweep series (one line per result count and metric) turns into three
plots: recall against pool size, recall against mean query time, and the
long/short evaluation counters against pool size. A separate helper plots
a clustering objective curve. Rendering is headless and file-only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluator import SweepRow


def _series(rows: list[SweepRow]) -> dict[str, list[SweepRow]]:
    out: dict[str, list[SweepRow]] = {}
    for row in rows:
        key = f"top{row.topn} {row.metric}" + (" rerank" if row.rerank else "")
        out.setdefault(key, []).append(row)
    for group in out.values():
        group.sort(key=lambda r: r.ef)
    return out


def render_figures(rows: list[SweepRow], out_dir: str | Path, prefix: str = "eval") -> list[Path]:
    """Write the three standard plots; returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups = _series(rows)
    written = []

    def start():
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        return fig, ax

    def finish(fig, ax, title, xlabel, ylabel, name, log_x=False):
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if log_x:
            ax.set_xscale("log", base=2)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8)
        path = out / f"{prefix}_{name}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    fig, ax = start()
    for key, group in groups.items():
        ax.plot([r.ef for r in group], [r.recall_mean for r in group], marker="o", label=key)
    finish(fig, ax, "Recall vs pool size", "ef", "mean recall", "recall_vs_ef", log_x=True)

    fig, ax = start()
    for key, group in groups.items():
        ax.plot(
            [r.time_ms_mean for r in group],
            [r.recall_mean for r in group],
            marker="o",
            label=key,
        )
    finish(fig, ax, "Recall vs query time", "mean ms/query", "mean recall", "recall_vs_time")

    fig, ax = start()
    for key, group in groups.items():
        ax.plot(
            [r.ef for r in group],
            [r.hamming_evals_mean_short for r in group],
            marker="o",
            label=f"{key} short",
        )
        ax.plot(
            [r.ef for r in group],
            [r.hamming_evals_mean_long for r in group],
            marker="s",
            linestyle="--",
            label=f"{key} long",
        )
    finish(
        fig, ax, "Distance evaluations per query", "ef", "mean evaluations", "evals_vs_ef",
        log_x=True,
    )
    return written


def render_objective_curve(objectives: list[float], path: str | Path) -> Path:
    """Plot a clustering objective against the iteration number."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(range(len(objectives)), objectives, marker="o")
    ax.set_title("Clustering objective per iteration")
    ax.set_xlabel("iteration")
    ax.set_ylabel("total Hamming distance to centers")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
