"""Full-run experiment driver with selectable round backends.

The reference backend advances rounds through ``rounds.run_round``; the
compiled backend runs the same arithmetic through the Cython kernels in
``_accel`` with per-round precomputation (per-client A_i P^T and A_i x_res),
which is what makes 25k-round sweeps take minutes instead of hours. Both
backends consume identical RNG streams, so trajectories agree to floating
point accumulation (checked in the test suite); CSV-level byte reproducibility
is guaranteed within a backend.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import streams
from ._accel import COMPILED_AVAILABLE, kernels
from .problem import ClientDataset, ModelState, ProblemConfig, closed_form_optimum, generate_federation
from .rounds import (
    DIVERGENCE_THRESHOLD,
    ControlState,
    OptimizerConfig,
    init_controls,
    projector_anchor,
    run_round,
)
from .subspace import generate_projector

BACKENDS = ("auto", "compiled", "python")


def resolve_backend(backend: str | None = None) -> str:
    """Pick the round backend: explicit argument, then FEDSIM_BACKEND, then auto."""
    choice = backend or os.environ.get("FEDSIM_BACKEND") or "auto"
    if choice not in BACKENDS:
        raise ValueError(f"unknown backend {choice!r}; expected one of {BACKENDS}")
    if choice == "auto":
        return "compiled" if COMPILED_AVAILABLE else "python"
    if choice == "compiled" and not COMPILED_AVAILABLE:
        raise RuntimeError("compiled backend requested but the extension is not built")
    return choice


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    algorithm: str
    het_level: float
    r: int
    seed: int
    round: int
    rel_err: float
    diverged: bool


def make_run_id(algorithm: str, het_level: float, r: int, seed: int) -> str:
    return f"{algorithm}_het{het_level:g}_r{r}_seed{seed}"


class _Recorder:
    """Collects rel-err records on the logging cadence and applies the
    divergence rule (non-finite or rel_err > DIVERGENCE_THRESHOLD)."""

    def __init__(self, run_id, algorithm, het_level, r, seed, total_rounds, log_every):
        self.meta = (run_id, algorithm, het_level, r, seed)
        self.total_rounds = total_rounds
        self.log_every = log_every
        self.records: list[RunRecord] = []
        self.diverged = False

    def _emit(self, state_round: int, rel_err: float, diverged: bool):
        self.records.append(RunRecord(*self.meta, state_round,
                                      math.nan if diverged else rel_err, diverged))

    def observe(self, state_round: int, rel_err: float) -> bool:
        """Record if due; returns True when the run must stop (diverged)."""
        bad = not math.isfinite(rel_err) or rel_err > DIVERGENCE_THRESHOLD
        if bad:
            self.diverged = True
            self._emit(state_round, math.nan, True)
            if state_round != self.total_rounds:
                self._emit(self.total_rounds, math.nan, True)
            return True
        if state_round % self.log_every == 0 or state_round == self.total_rounds:
            self._emit(state_round, rel_err, False)
        return False


def _rel_err(X, x_star, nx_star):
    diff = X - x_star
    return float(np.sqrt(np.sum(diff * diff))) / nx_star


def _simulate_reference(federation, pcfg: ProblemConfig, ocfg: OptimizerConfig,
                        x_star, rec: _Recorder):
    model = ModelState(X=np.zeros((pcfg.feature_dim, pcfg.output_dim)), round=0)
    controls = init_controls(ocfg, len(federation), pcfg.feature_dim, pcfg.output_dim)
    nx_star = float(np.linalg.norm(x_star))
    if rec.observe(0, _rel_err(model.X, x_star, nx_star)):
        return
    for t in range(ocfg.rounds):
        out = run_round(model, controls, federation, ocfg, t,
                        lam=pcfg.ridge, x_star=x_star)
        model, controls = out.new_model, out.new_controls
        rel = math.nan if out.diverged else out.rel_err
        if rec.observe(t + 1, rel):
            return


def _simulate_compiled(federation, pcfg: ProblemConfig, ocfg: OptimizerConfig,
                       x_star, rec: _Recorder):
    N = len(federation)
    d, m = pcfg.feature_dim, pcfg.output_dim
    n, K, b, S = pcfg.samples_per_client, ocfg.local_steps, ocfg.batch_size, ocfg.clients_per_round
    lam, eta_l, eta_g, seed = pcfg.ridge, ocfg.local_lr, ocfg.global_lr, ocfg.seed
    inv_nb = 1.0 / b

    A_stack = np.ascontiguousarray(np.stack([ds.A for ds in federation]))
    B_stack = np.ascontiguousarray(np.stack([ds.B for ds in federation]))
    X = np.zeros((d, m))
    nx_star = float(np.linalg.norm(x_star))
    if rec.observe(0, _rel_err(X, x_star, nx_star)):
        return

    subspace_alg = ocfg.uses_subspace
    ctl = init_controls(ocfg, N, d, m)
    c = ctl.server_c
    c_i = ctl.client_c
    basis_round = 0
    proj = None
    anchor_cached = -1
    dim = ocfg.r if ocfg.algorithm == "fedsub" else d

    y_out = np.empty((S, ocfg.r if subspace_alg else d, m))
    g_out = np.empty_like(y_out)
    zero_ci = np.zeros((S, d, m)) if ocfg.algorithm == "fedavg" else None
    zero_c = np.zeros((d, m)) if ocfg.algorithm == "fedavg" else None

    for t in range(ocfg.rounds):
        clients = streams.round_clients(seed, t, N, S).astype(np.int64, copy=False)
        batches = np.stack([
            streams.round_batches(seed, t, int(i), n, K, b) for i in clients
        ]).astype(np.int64, copy=False)

        if subspace_alg:
            anchor = projector_anchor(t, ocfg.projector_refresh_every)
            if anchor != anchor_cached:
                prev = proj
                proj = generate_projector(d, ocfg.r, seed, anchor)
                anchor_cached = anchor
                if ocfg.algorithm == "fedsub" and anchor != basis_round:
                    R = proj.P @ prev.P.T
                    c = R @ c
                    c_i = np.matmul(R, c_i)
                    basis_round = anchor
            P = proj.P
            x_proj = P @ X
            x_res = X - P.T @ x_proj
            AP = np.matmul(A_stack[clients], P.T)
            AxR = np.matmul(A_stack[clients], x_res)
            if ocfg.algorithm == "ssf":
                c_proj = P @ c
                c_res = c - P.T @ c_proj
                ci_proj = np.matmul(P, c_i[clients])
            else:
                c_proj = c
                ci_proj = np.ascontiguousarray(c_i[clients])
            kernels.ssf_local_steps(AP, AxR, B_stack, clients, batches, x_proj,
                                    ci_proj, c_proj, eta_l, lam, inv_nb, K,
                                    y_out, g_out)
            x_proj_new = x_proj - eta_g * (x_proj - y_out.mean(axis=0))
            ghat = g_out / K
            if ocfg.algorithm == "ssf":
                c_i[clients] += np.matmul(P.T, ghat - ci_proj)
                c = P.T @ ghat.mean(axis=0) + c_res
            else:
                c_i[clients] = ghat
                c = ghat.mean(axis=0)
            X = P.T @ x_proj_new + x_res
        else:
            if ocfg.algorithm == "scaffold":
                ci_s = np.ascontiguousarray(c_i[clients])
                kernels.full_local_steps(A_stack, B_stack, clients, batches, X,
                                         ci_s, c, 1, eta_l, lam, inv_nb, K,
                                         y_out, g_out)
                ghat = g_out / K
                c_i[clients] = ghat
                c = ghat.mean(axis=0)
            else:
                kernels.full_local_steps(A_stack, B_stack, clients, batches, X,
                                         zero_ci, zero_c, 0, eta_l, lam, inv_nb,
                                         K, y_out, g_out)
            X = X - eta_g * (X - y_out.mean(axis=0))

        if not np.isfinite(X).all():
            rel = math.nan
        else:
            rel = _rel_err(X, x_star, nx_star)
        if rec.observe(t + 1, rel):
            return


def run_experiment(problem_cfg: ProblemConfig, optimizer_cfg: OptimizerConfig,
                   *, log_every: int = 25, backend: str | None = None,
                   federation: list[ClientDataset] | None = None,
                   x_star: np.ndarray | None = None) -> list[RunRecord]:
    """Run T rounds and return the logged records (round 0, every log_every
    rounds, and the final round; truncated with NaN sentinels on divergence).

    ``federation``/``x_star`` can be passed in to share one instance across
    runs; otherwise they are generated from problem_cfg.
    """
    if log_every < 1:
        raise ValueError("log_every must be >= 1")
    if optimizer_cfg.clients_per_round > problem_cfg.num_clients:
        raise ValueError("clients_per_round exceeds num_clients")
    if optimizer_cfg.uses_subspace and optimizer_cfg.r > problem_cfg.feature_dim:
        raise ValueError("subspace dimension exceeds feature_dim")
    if optimizer_cfg.batch_size > problem_cfg.samples_per_client:
        raise ValueError("batch_size exceeds samples_per_client")

    if federation is None:
        federation = generate_federation(problem_cfg)
    if x_star is None:
        x_star = closed_form_optimum(federation, problem_cfg.ridge)

    run_id = make_run_id(optimizer_cfg.algorithm, problem_cfg.het_level,
                         optimizer_cfg.r, optimizer_cfg.seed)
    rec = _Recorder(run_id, optimizer_cfg.algorithm, problem_cfg.het_level,
                    optimizer_cfg.r, optimizer_cfg.seed, optimizer_cfg.rounds,
                    log_every)
    if resolve_backend(backend) == "compiled":
        _simulate_compiled(federation, problem_cfg, optimizer_cfg, x_star, rec)
    else:
        _simulate_reference(federation, problem_cfg, optimizer_cfg, x_star, rec)
    return rec.records
