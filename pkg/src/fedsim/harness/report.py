"""Markdown reports over sweep artifacts.

Renders summary tables in the benchmark's layout: heterogeneity rows by
algorithm columns at each fixed subspace dimension, plus subspace-dimension
rows at each fixed heterogeneity when the sweep varies r. Includes the
verification section when a verify report file is present.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .sweep import parse_csv

_DISPLAY = {"scaffold": "Full-SCAFFOLD", "fedavg": "Full-FedAvg",
            "ssf": "SSF", "fedsub": "FedSub"}


def _fmt(v: float) -> str:
    return "NaN (diverged)" if math.isnan(v) else f"{v:.4e}"


def collect_summary(run_dir: str | Path):
    """Rebuild summary rows from the per-run CSVs in a directory."""
    cells = {}
    for path in sorted(Path(run_dir).glob("*.csv")):
        if path.name == "summary.csv":
            continue
        recs = parse_csv(path.read_text())
        if not recs:
            continue
        final = recs[-1]
        key = (final.algorithm, final.het_level, final.r)
        cells.setdefault(key, []).append((final.seed, final.rel_err))
    rows = []
    for (alg, het, r), vals in sorted(cells.items()):
        finals = [v for _, v in sorted(vals)]
        from .sweep import nan_aware_median

        rows.append({"algorithm": alg, "het_level": het, "r": r,
                     "finals": finals, "median": nan_aware_median(finals)})
    return rows


def _table(headers, rows):
    out = ["| " + " | ".join(headers) + " |",
           "|" + "|".join("---" for _ in headers) + "|"]
    for row in rows:
        out.append("| " + " | ".join(row) + " |")
    return "\n".join(out)


def emit_report(summary, *, title: str = "Federated subspace optimization report",
                verify_path: str | Path | None = None,
                meta: dict | None = None) -> str:
    """Render the markdown report for a list of summary rows."""
    parts = [f"# {title}", ""]
    if meta:
        parts.append("## Run configuration")
        parts.append("")
        for k, v in meta.items():
            parts.append(f"- {k}: {v}")
        parts.append("")

    if not summary:
        parts.append("_No runs found._")
        return "\n".join(parts) + "\n"

    algorithms = sorted({row["algorithm"] for row in summary},
                        key=lambda a: list(_DISPLAY).index(a) if a in _DISPLAY else 99)
    het_levels = sorted({row["het_level"] for row in summary})
    r_values = sorted({row["r"] for row in summary})
    by_key = {(row["algorithm"], row["het_level"], row["r"]): row for row in summary}

    def cell(alg, het, r):
        row = by_key.get((alg, het, r))
        return _fmt(row["median"]) if row else "-"

    parts.append("## Final relative error (median over seeds)")
    parts.append("")
    for r in r_values:
        parts.append(f"### Subspace dimension r = {r}")
        parts.append("")
        rows = [[f"{het:g}"] + [cell(a, het, r) for a in algorithms]
                for het in het_levels]
        parts.append(_table(["het level"] + [_DISPLAY.get(a, a) for a in algorithms], rows))
        parts.append("")
    if len(r_values) > 1:
        for het in het_levels:
            parts.append(f"### Heterogeneity {het:g}, varying subspace dimension")
            parts.append("")
            rows = [[str(r)] + [cell(a, het, r) for a in algorithms]
                    for r in r_values]
            parts.append(_table(["r"] + [_DISPLAY.get(a, a) for a in algorithms], rows))
            parts.append("")

    if verify_path is not None and Path(verify_path).exists():
        payload = json.loads(Path(verify_path).read_text())
        parts.append("## Verification checks")
        parts.append("")
        for rep in payload.get("reports", []):
            state = "PASS" if rep["passed"] else "FAIL"
            parts.append(f"- [{state}] {rep['name']}: lhs={rep['lhs']:.6e} "
                         f"rhs={rep['rhs']:.6e} margin={rep['margin']:+.3e} "
                         f"{rep.get('notes', '')}".rstrip())
        parts.append("")
    return "\n".join(parts) + "\n"
