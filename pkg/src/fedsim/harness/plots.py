"""Convenience convergence charts: one SVG per run CSV, log-scale error axis."""

from __future__ import annotations

import math
from pathlib import Path

from .sweep import parse_csv


def plot_runs(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render relative error vs communication round for every run CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for path in sorted(run_dir.glob("*.csv")):
        if path.name == "summary.csv":
            continue
        recs = parse_csv(path.read_text())
        pts = [(r.round, r.rel_err) for r in recs if math.isfinite(r.rel_err)]
        if not pts:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("communication round")
        ax.set_ylabel("relative error")
        ax.set_title(recs[0].run_id, fontsize=9)
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        target = out / (path.stem + ".svg")
        fig.savefig(target)
        plt.close(fig)
        written.append(target)
    return written
