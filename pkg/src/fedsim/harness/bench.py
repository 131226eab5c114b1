"""Round-throughput benchmark comparing the python and compiled backends."""

from __future__ import annotations

import time

from .._accel import COMPILED_AVAILABLE
from ..engine import run_experiment
from .config import load_config


def _time_run(pcfg, ocfg, backend: str) -> float:
    t0 = time.perf_counter()
    run_experiment(pcfg, ocfg, backend=backend)
    return time.perf_counter() - t0


def run_benchmark(rounds: int = 300, config_path: str | None = None) -> int:
    cfg = load_config(config_path)
    het = cfg.het_levels[min(1, len(cfg.het_levels) - 1)]
    r = cfg.r_values[min(3, len(cfg.r_values) - 1)]
    backends = ["python"] + (["compiled"] if COMPILED_AVAILABLE else [])
    if not COMPILED_AVAILABLE:
        print("compiled extension not built; benchmarking the python backend only")
    print(f"problem: d={cfg.feature_dim} N={cfg.num_clients} het={het:g} "
          f"r={r} rounds={rounds}")
    print(f"{'algorithm':<10}" + "".join(f"{b + ' (rps)':>18}" for b in backends)
          + (f"{'speedup':>10}" if len(backends) == 2 else ""))
    for alg in cfg.algorithms:
        pcfg = cfg.problem_config(het, seed=0)
        ocfg = cfg.optimizer_config(alg, het, r, seed=0, rounds=rounds)
        times = [_time_run(pcfg, ocfg, b) for b in backends]
        row = f"{alg:<10}" + "".join(f"{rounds / t:>18.1f}" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>10.2f}x"
        print(row)
    return 0
