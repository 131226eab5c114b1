"""Experiment configuration: a flat key = value file, CLI flags override.

Keys mirror the benchmark's hyperparameter names (num_clients, feature_dim,
output_dim, samples_per_client, ridge, noise_std, local_steps,
clients_per_round, batch_size, global_lr, het_levels, local_lrs, r_values,
rounds, ...). Defaults reproduce the long toy experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from ..problem import ProblemConfig
from ..rounds import ALGORITHMS, OptimizerConfig


@dataclass(frozen=True)
class ExperimentConfig:
    # problem
    num_clients: int = 20
    feature_dim: int = 100
    output_dim: int = 10
    samples_per_client: int = 50
    ridge: float = 0.1
    noise_std: float = 0.01
    # training protocol
    local_steps: int = 5
    clients_per_round: int = 10
    batch_size: int = 20
    global_lr: float = 1.0
    rounds: int = 25_000
    log_every: int = 25
    # sweep grids
    het_levels: tuple[float, ...] = (0.1, 0.5, 2.0)
    local_lrs: tuple[float, ...] = (1e-2, 1e-2, 1e-3)  # one per het level
    r_values: tuple[int, ...] = (1, 5, 10, 20, 50)
    algorithms: tuple[str, ...] = ("fedavg", "scaffold", "ssf", "fedsub")
    seeds: tuple[int, ...] = (0, 1, 2)
    # projector schedules
    ssf_refresh_every: int = 1
    fedsub_refresh_every: int = 5
    # learning-rate search
    lr_grid: tuple[float, ...] = (1e-4, 1e-3, 1e-2, 1e-1)
    lr_search_rounds: int = 500
    # verification protocol (problem scaled down for speed)
    verify_feature_dim: int = 40
    verify_r: int = 8
    verify_rounds: int = 400
    # io
    output_dir: str = "runs"

    def __post_init__(self):
        for name in ("het_levels", "local_lrs", "r_values", "algorithms",
                     "seeds", "lr_grid"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} must be nonempty")
        if len(self.local_lrs) not in (1, len(self.het_levels)):
            raise ValueError("local_lrs must have one entry or one per het level")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms: {sorted(unknown)}")

    def local_lr_for(self, het_level: float) -> float:
        if len(self.local_lrs) == 1:
            return self.local_lrs[0]
        return self.local_lrs[self.het_levels.index(het_level)]

    def problem_config(self, het_level: float, seed: int) -> ProblemConfig:
        return ProblemConfig(num_clients=self.num_clients,
                             feature_dim=self.feature_dim,
                             output_dim=self.output_dim,
                             samples_per_client=self.samples_per_client,
                             ridge=self.ridge, noise_std=self.noise_std,
                             het_level=het_level, data_seed=seed)

    def optimizer_config(self, algorithm: str, het_level: float, r: int,
                         seed: int, *, local_lr: float | None = None,
                         rounds: int | None = None) -> OptimizerConfig:
        refresh = self.fedsub_refresh_every if algorithm == "fedsub" else self.ssf_refresh_every
        return OptimizerConfig(
            algorithm=algorithm,
            local_lr=self.local_lr_for(het_level) if local_lr is None else local_lr,
            global_lr=self.global_lr,
            local_steps=self.local_steps,
            clients_per_round=self.clients_per_round,
            r=r,
            rounds=self.rounds if rounds is None else rounds,
            projector_refresh_every=refresh,
            batch_size=self.batch_size,
            seed=seed,
        )


def _parse_value(raw: str, example):
    raw = raw.strip()
    if isinstance(example, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        elem = example[0] if example else raw
        return tuple(_parse_value(p, elem) for p in parts)
    if isinstance(example, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(example, int):
        return int(raw)
    if isinstance(example, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(raw, defaults[key])
    return out


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Build the config from an optional file plus keyword overrides."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def write_default_config(path: str | Path):
    """Write a config file populated with the default experiment values."""
    cfg = ExperimentConfig()
    lines = ["# fedsim experiment configuration (defaults shown)"]
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")
