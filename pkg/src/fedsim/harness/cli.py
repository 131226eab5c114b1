"""Command-line interface: run / sweep / lr-search / verify / report / plot / bench.

Exit codes: 0 success; 2 when the command completed but produced diverged runs
or failing verification checks; 1 on errors. FEDSIM_THREADS caps sweep
parallelism, FEDSIM_BACKEND picks the round backend (auto/compiled/python).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path


def _build_parser():
    p = argparse.ArgumentParser(prog="fedsim",
                                description="Deterministic federated subspace-optimization simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, backend=True):
        sp.add_argument("--config", type=str, default=None, help="key = value config file")
        if backend:
            sp.add_argument("--backend", choices=("auto", "compiled", "python"),
                            default=None, help="round backend (default: env/auto)")

    sp = sub.add_parser("run", help="run one (algorithm, het, r, seed) cell")
    add_common(sp)
    sp.add_argument("--algo", required=True,
                    choices=("fedavg", "scaffold", "ssf", "fedsub"))
    sp.add_argument("--het", type=float, required=True)
    sp.add_argument("--r", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rounds", type=int, default=None)
    sp.add_argument("--local-lr", type=float, default=None)
    sp.add_argument("--out", type=str, default=None, help="output directory")

    sp = sub.add_parser("sweep", help="run the full experiment grid")
    add_common(sp)
    sp.add_argument("--out", type=str, default=None)
    sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("lr-search", help="select eta_l per heterogeneity level")
    add_common(sp)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", type=str, default=None,
                    help="write the selection as JSON here")

    sp = sub.add_parser("verify", help="run the theory verification suite")
    add_common(sp, backend=False)
    sp.add_argument("--het", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=str, default=None,
                    help="directory for verify_report.json (default: output_dir)")

    sp = sub.add_parser("report", help="render a markdown report from run CSVs")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", type=str, default=None, help="write markdown here")

    sp = sub.add_parser("plot", help="SVG convergence chart per run CSV")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", type=str, default=None)

    sp = sub.add_parser("bench", help="compare the python and compiled backends")
    add_common(sp, backend=False)
    sp.add_argument("--rounds", type=int, default=300)

    sp = sub.add_parser("init-config", help="write a config file with defaults")
    sp.add_argument("path")
    return p


def _cmd_run(args) -> int:
    from ..engine import run_experiment
    from .config import load_config
    from .sweep import cell_filename, render_csv

    cfg = load_config(args.config)
    pcfg = cfg.problem_config(args.het, args.seed)
    ocfg = cfg.optimizer_config(args.algo, args.het, args.r, args.seed,
                                local_lr=args.local_lr, rounds=args.rounds)
    recs = run_experiment(pcfg, ocfg, log_every=cfg.log_every, backend=args.backend)
    out = Path(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / cell_filename(args.algo, args.het, args.r, args.seed)
    with open(path, "w", newline="\n") as f:
        f.write(render_csv(recs))
    final = recs[-1]
    status = "DIVERGED" if final.diverged else f"rel_err={final.rel_err:.6e}"
    print(f"{final.run_id}: {len(recs)} records, round {final.round}, {status}")
    print(f"wrote {path}")
    return 2 if final.diverged else 0


def _cmd_sweep(args) -> int:
    from .config import load_config
    from .report import emit_report
    from .sweep import run_sweep

    cfg = load_config(args.config)
    out = Path(args.out if args.out else cfg.output_dir)
    t0 = time.perf_counter()
    summary, any_diverged = run_sweep(cfg, backend=args.backend,
                                      threads=args.threads, out_dir=out)
    dt = time.perf_counter() - t0
    report = emit_report(summary, meta={"rounds": cfg.rounds,
                                        "seeds": list(cfg.seeds)})
    with open(out / "report.md", "w", newline="\n") as f:
        f.write(report)
    print(report)
    print(f"sweep finished in {dt:.1f}s -> {out}")
    return 2 if any_diverged else 0


def _cmd_lr_search(args) -> int:
    from .config import load_config
    from .lrsearch import lr_search

    cfg = load_config(args.config)
    selection = lr_search(cfg, seed=args.seed, backend=args.backend)
    for het, rate in selection.items():
        print(f"het={het:g}: eta_l={rate:g}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="\n") as f:
            json.dump({str(k): v for k, v in selection.items()}, f, indent=2)
            f.write("\n")
        print(f"wrote {args.out}")
    return 0


def _cmd_verify(args) -> int:
    from ..problem import generate_federation
    from ..theory import verification_suite
    from .config import load_config

    cfg = load_config(args.config)
    pcfg = cfg.problem_config(args.het, args.seed)
    pcfg = type(pcfg)(**{**asdict(pcfg), "feature_dim": cfg.verify_feature_dim})
    federation = generate_federation(pcfg)
    params, plan, reports = verification_suite(
        federation, pcfg.ridge, r=cfg.verify_r, K=cfg.local_steps,
        batch=cfg.batch_size, T=cfg.verify_rounds, seed=args.seed)
    print(f"problem: d={pcfg.feature_dim} N={pcfg.num_clients} het={args.het:g}")
    print(f"measured: L={params.L:.4f} sigma^2={params.sigma_sq:.4f} "
          f"delta_F={params.delta_f:.4f} C_0={params.c0:.4f}")
    print(f"stepsizes: eta_l={plan.eta_l:.6e} eta_g={plan.eta_g:.6e} "
          f"eta_tilde={plan.eta_tilde:.6e}")
    for rep in reports:
        print(rep)
    out = Path(args.out if args.out else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "problem": asdict(pcfg),
        "params": asdict(params),
        "plan": asdict(plan),
        "reports": [asdict(r) for r in reports],
    }
    path = out / "verify_report.json"
    with open(path, "w", newline="\n") as f:
        json.dump(payload, f, indent=2, allow_nan=True)
        f.write("\n")
    print(f"wrote {path}")
    return 0 if all(r.passed for r in reports) else 2


def _cmd_report(args) -> int:
    from .report import collect_summary, emit_report

    summary = collect_summary(args.dir)
    verify_path = Path(args.dir) / "verify_report.json"
    text = emit_report(summary, verify_path=verify_path)
    if args.out:
        with open(args.out, "w", newline="\n") as f:
            f.write(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def _cmd_plot(args) -> int:
    from .plots import plot_runs

    written = plot_runs(args.dir, args.out)
    print(f"wrote {len(written)} charts")
    return 0


def _cmd_bench(args) -> int:
    from .bench import run_benchmark

    return run_benchmark(rounds=args.rounds, config_path=args.config)


def _cmd_init_config(args) -> int:
    from .config import write_default_config

    write_default_config(args.path)
    print(f"wrote {args.path}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "lr-search": _cmd_lr_search,
    "verify": _cmd_verify,
    "report": _cmd_report,
    "plot": _cmd_plot,
    "bench": _cmd_bench,
    "init-config": _cmd_init_config,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
