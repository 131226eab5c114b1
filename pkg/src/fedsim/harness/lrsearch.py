"""Automatic local learning-rate selection.

For each heterogeneity level, every grid candidate runs full SCAFFOLD for a
short horizon with divergence detection; the candidate with the lowest final
relative error wins, diverged candidates are excluded, and ties break toward
the smaller (more stable) rate.
"""

from __future__ import annotations

import math

from ..engine import run_experiment
from .config import ExperimentConfig


class LrSearchError(RuntimeError):
    """Every candidate diverged for some heterogeneity level."""


def select_rate(finals: dict[float, float]) -> float:
    """Lowest final error among non-diverged candidates; ties break toward
    the smaller rate. Raises LrSearchError when every candidate diverged."""
    alive = {r: v for r, v in finals.items() if math.isfinite(v)}
    if not alive:
        raise LrSearchError("all learning-rate candidates diverged")
    return min(sorted(alive), key=lambda r: alive[r])


def lr_search_level(cfg: ExperimentConfig, het_level: float, seed: int,
                    *, backend: str | None = None) -> tuple[float, dict]:
    """Select eta_l for one het level; returns (rate, final error per rate)."""
    finals = {}
    for rate in cfg.lr_grid:
        pcfg = cfg.problem_config(het_level, seed)
        ocfg = cfg.optimizer_config("scaffold", het_level, 0, seed,
                                    local_lr=rate, rounds=cfg.lr_search_rounds)
        recs = run_experiment(pcfg, ocfg, log_every=cfg.log_every, backend=backend)
        finals[rate] = recs[-1].rel_err  # NaN when diverged
    try:
        best = select_rate(finals)
    except LrSearchError as exc:
        raise LrSearchError(f"{exc} (het={het_level:g})") from None
    return best, finals


def lr_search(cfg: ExperimentConfig, *, seed: int | None = None,
              backend: str | None = None) -> dict[float, float]:
    """Selected eta_l per heterogeneity level (single-seed protocol)."""
    use_seed = cfg.seeds[0] if seed is None else seed
    return {het: lr_search_level(cfg, het, use_seed, backend=backend)[0]
            for het in cfg.het_levels}
