"""Experiment sweeps: one CSV per (algorithm, het, r, seed), plus a summary.

Cells are independent and may run in worker processes (FEDSIM_THREADS caps
parallelism); every cell writes only its own file and the summary is
assembled in a fixed order, so single- and multi-worker executions produce
byte-identical outputs. FedAvg and SCAFFOLD trajectories do not depend on the
subspace dimension (RNG streams are keyed on seed/round/client only), so each
full-dimensional (algorithm, het, seed) combination is simulated once and
emitted under every requested r label.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from ..engine import RunRecord, make_run_id, run_experiment
from .config import ExperimentConfig

CSV_HEADER = "run_id,algorithm,het_level,r,seed,round,rel_err,diverged"


def default_threads() -> int:
    env = os.environ.get("FEDSIM_THREADS")
    if env:
        return max(1, int(env))
    return min(2, os.cpu_count() or 1)


def format_record(rec: RunRecord) -> str:
    rel = "NaN" if not math.isfinite(rec.rel_err) else f"{rec.rel_err:.10e}"
    return (f"{rec.run_id},{rec.algorithm},{rec.het_level:g},{rec.r},{rec.seed},"
            f"{rec.round},{rel},{rec.diverged}")


def render_csv(records: list[RunRecord], r_label: int | None = None) -> str:
    """CSV text for one run; r_label relabels full-dimensional runs that are
    emitted under several subspace-grid labels."""
    rows = [CSV_HEADER]
    for rec in records:
        if r_label is not None and rec.r != r_label:
            rec = replace(rec, r=r_label,
                          run_id=make_run_id(rec.algorithm, rec.het_level,
                                             r_label, rec.seed))
        rows.append(format_record(rec))
    return "\n".join(rows) + "\n"


def parse_csv(text: str) -> list[RunRecord]:
    lines = text.strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unrecognized run CSV header")
    out = []
    for line in lines[1:]:
        run_id, alg, het, r, seed, rnd, rel, div = line.split(",")
        out.append(RunRecord(run_id=run_id, algorithm=alg, het_level=float(het),
                             r=int(r), seed=int(seed), round=int(rnd),
                             rel_err=float("nan") if rel == "NaN" else float(rel),
                             diverged=div == "True"))
    return out


@dataclass(frozen=True)
class SweepTask:
    """One simulation to execute: full-dimensional algorithms carry r = 0 and
    fan out to all r labels at emission time."""

    algorithm: str
    het_level: float
    r: int
    seed: int


def _uses_subspace(alg: str) -> bool:
    return alg in ("ssf", "fedsub")


def sweep_tasks(cfg: ExperimentConfig) -> list[SweepTask]:
    tasks = []
    for alg in cfg.algorithms:
        for het in cfg.het_levels:
            for seed in cfg.seeds:
                if _uses_subspace(alg):
                    for r in cfg.r_values:
                        tasks.append(SweepTask(alg, het, r, seed))
                else:
                    tasks.append(SweepTask(alg, het, 0, seed))
    return tasks


def run_task(cfg: ExperimentConfig, task: SweepTask, backend: str | None = None):
    pcfg = cfg.problem_config(task.het_level, task.seed)
    ocfg = cfg.optimizer_config(task.algorithm, task.het_level, task.r, task.seed)
    return run_experiment(pcfg, ocfg, log_every=cfg.log_every, backend=backend)


def _worker(args):
    cfg, task, backend = args
    return task, run_task(cfg, task, backend)


def cell_filename(algorithm: str, het: float, r: int, seed: int) -> str:
    return f"{make_run_id(algorithm, het, r, seed)}.csv"


def run_sweep(cfg: ExperimentConfig, *, backend: str | None = None,
              threads: int | None = None, out_dir: str | Path | None = None):
    """Execute the full grid; returns (summary_rows, any_diverged).

    Writes one CSV per cell plus summary.csv under out_dir.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = threads if threads is not None else default_threads()
    tasks = sweep_tasks(cfg)

    results: dict[SweepTask, list[RunRecord]] = {}
    if workers <= 1:
        for task in tasks:
            results[task] = run_task(cfg, task, backend)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for task, recs in pool.map(_worker,
                                       [(cfg, t, backend) for t in tasks]):
                results[task] = recs

    any_diverged = False
    for task, recs in results.items():
        labels = [task.r] if _uses_subspace(task.algorithm) else cfg.r_values
        for r_label in labels:
            text = render_csv(recs, r_label=r_label)
            path = out / cell_filename(task.algorithm, task.het_level, r_label,
                                       task.seed)
            _write_text(path, text)
        if recs[-1].diverged:
            any_diverged = True

    summary = summarize(cfg, results)
    _write_text(out / "summary.csv", render_summary_csv(summary))
    return summary, any_diverged


def _write_text(path: Path, text: str):
    try:
        with open(path, "w", newline="\n") as f:
            f.write(text)
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def summarize(cfg: ExperimentConfig, results: dict[SweepTask, list[RunRecord]]):
    """Summary rows (algorithm, het, r) -> per-seed finals and their median.

    A cell's final error is NaN when that run diverged; the median treats NaN
    as worst, so it is NaN only when at least half the seeds diverged.
    """
    rows = []
    for alg in cfg.algorithms:
        for het in cfg.het_levels:
            for r in cfg.r_values:
                finals = []
                for seed in cfg.seeds:
                    key = SweepTask(alg, het, r if _uses_subspace(alg) else 0, seed)
                    recs = results[key]
                    finals.append(recs[-1].rel_err)
                rows.append({
                    "algorithm": alg, "het_level": het, "r": r,
                    "finals": finals, "median": nan_aware_median(finals),
                })
    return rows


def nan_aware_median(values) -> float:
    """Median with NaN sorted to the top (worst); NaN iff >= half diverged."""
    ordered = sorted(values, key=lambda v: (math.isnan(v), v))
    k = len(ordered)
    mid = ordered[k // 2] if k % 2 == 1 else ordered[k // 2 - 1 : k // 2 + 1]
    if k % 2 == 1:
        return mid
    a, b = mid
    if math.isnan(a) or math.isnan(b):
        return math.nan
    return 0.5 * (a + b)


def render_summary_csv(summary) -> str:
    lines = ["algorithm,het_level,r,median_final,finals"]
    for row in summary:
        finals = ";".join("NaN" if math.isnan(v) else f"{v:.10e}"
                          for v in row["finals"])
        med = "NaN" if math.isnan(row["median"]) else f"{row['median']:.10e}"
        lines.append(f"{row['algorithm']},{row['het_level']:g},{row['r']},{med},{finals}")
    return "\n".join(lines) + "\n"
