"""Reference round engines for FedAvg, SCAFFOLD, SSF, and FedSub.

These functions are the normative implementation: one call advances the
federation by one communication round, composed from the projection ops in
``subspace`` and the shared RNG streams in ``streams``. The compiled kernels
in ``_accel`` reproduce the same arithmetic for long runs and are checked
against this module.

Conventions fixed here (and relied on everywhere else):

* Partial participation samples clients uniformly without replacement; only
  sampled clients refresh their control variates, and the server control
  averages the sampled clients' projected gradient means plus its own
  residual part.
* Controls start at zero; the model starts at zero.
* A run is flagged diverged when the iterate stops being finite or the
  relative error exceeds DIVERGENCE_THRESHOLD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import streams
from .problem import ClientDataset, ModelState, minibatch_gradient, relative_error
from .subspace import Projector, backfill, decompose, generate_projector, lift

ALGORITHMS = ("fedavg", "scaffold", "ssf", "fedsub")
DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str
    local_lr: float
    global_lr: float = 1.0
    local_steps: int = 5
    clients_per_round: int = 10
    r: int = 0  # subspace dimension; required for ssf/fedsub
    rounds: int = 25_000
    projector_refresh_every: int = 1
    batch_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.local_lr <= 0 or self.global_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.local_steps < 1 or self.clients_per_round < 1 or self.batch_size < 1:
            raise ValueError("local_steps, clients_per_round, batch_size must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.projector_refresh_every < 1:
            raise ValueError("projector_refresh_every must be >= 1")
        if self.algorithm in ("ssf", "fedsub") and self.r < 1:
            raise ValueError(f"{self.algorithm} needs a subspace dimension r >= 1")

    @property
    def uses_subspace(self) -> bool:
        return self.algorithm in ("ssf", "fedsub")


@dataclass
class ControlState:
    """Server and per-client control variates.

    Full-dimensional (d x m) for scaffold/ssf, r-dimensional for fedsub,
    absent for fedavg. ``basis_round`` records which projector round the
    r-dimensional fedsub controls are expressed in.
    """

    server_c: np.ndarray | None
    client_c: np.ndarray | None  # (N, d, m) or (N, r, m)
    basis_round: int = 0


@dataclass
class RoundOutput:
    new_model: ModelState
    new_controls: ControlState
    rel_err: float
    diverged: bool


def init_controls(cfg: OptimizerConfig, num_clients: int, d: int, m: int) -> ControlState:
    if cfg.algorithm == "fedavg":
        return ControlState(server_c=None, client_c=None)
    dim = cfg.r if cfg.algorithm == "fedsub" else d
    return ControlState(
        server_c=np.zeros((dim, m)),
        client_c=np.zeros((num_clients, dim, m)),
        basis_round=0,
    )


def projector_anchor(round: int, refresh_every: int) -> int:
    """Round whose projector is in effect at ``round``."""
    return round - round % refresh_every


def round_projector(cfg: OptimizerConfig, d: int, round: int) -> Projector:
    return generate_projector(d, cfg.r, cfg.seed, projector_anchor(round, cfg.projector_refresh_every))


# ---------------------------------------------------------------------------
# per-client local updates


def local_steps_ssf(x_proj, x_res, c_i_proj, c_proj, ds: ClientDataset,
                    eta_l: float, local_steps: int, lam: float,
                    batches: np.ndarray, P: Projector):
    """K corrected local steps in the subspace.

    Reconstructs the full model before each gradient, projects the stochastic
    gradient, and applies the correction P g - c_i_proj + c_proj. Returns the
    final projected iterate and the sum of the full-dimensional stochastic
    gradients (both control updates are functions of that sum). batches[k]
    holds step k's minibatch indices.
    """
    y_proj = x_proj.copy()
    grad_sum = np.zeros_like(x_res)
    for k in range(local_steps):
        y = lift(P, y_proj) + x_res
        g = minibatch_gradient(ds, y, lam, batches[k])
        grad_sum += g
        y_proj -= eta_l * (P.P @ g - c_i_proj + c_proj)
    return y_proj, grad_sum


def local_steps_full(X, c_i, c, ds: ClientDataset, eta_l: float,
                     local_steps: int, lam: float, batches: np.ndarray):
    """K local SGD steps in the ambient space, optionally SCAFFOLD-corrected.

    Pass c_i = c = None for plain FedAvg steps. Returns the endpoint and the
    gradient sum.
    """
    Y = X.copy()
    grad_sum = np.zeros_like(X)
    corrected = c_i is not None
    for k in range(local_steps):
        g = minibatch_gradient(ds, Y, lam, batches[k])
        grad_sum += g
        step = g - c_i + c if corrected else g
        Y -= eta_l * step
    return Y, grad_sum


# ---------------------------------------------------------------------------
# control updates and aggregation


def update_client_control_ssf(c_i, P: Projector, grad_sum, local_steps: int):
    """Replace only the projected part: (I - P^T P) c_i + P^T P grad_sum / K."""
    dec = decompose(P, c_i)
    return backfill(P, P.P @ grad_sum / local_steps, dec.res)


def update_server_control_ssf(c, P: Projector, all_grad_sums, num_participants: int,
                              local_steps: int):
    """New server control: mean projected gradient of participants plus residual.

    Under full participation this is the (1/NK) sum over all clients and
    local steps; under sampling the mean runs over the participants only.
    """
    dec = decompose(P, c)
    mean_proj = sum(P.P @ gs for gs in all_grad_sums) / (num_participants * local_steps)
    return backfill(P, mean_proj, dec.res)


def aggregate_ssf(x_proj, client_endpoints, eta_g: float):
    """Server step on subspace coordinates: x - (eta_g/S) sum_i (x - y_i)."""
    if len(client_endpoints) == 0:
        raise ValueError("aggregate needs at least one client endpoint")
    delta = sum(x_proj - y for y in client_endpoints) / len(client_endpoints)
    return x_proj - eta_g * delta


def _finish(X_new, round, controls, x_star):
    diverged = not bool(np.isfinite(X_new).all())
    rel = math.nan
    if not diverged and x_star is not None:
        rel = relative_error(X_new, x_star)
        diverged = not math.isfinite(rel) or rel > DIVERGENCE_THRESHOLD
    if diverged:
        rel = math.nan
    return RoundOutput(
        new_model=ModelState(X=X_new, round=round + 1),
        new_controls=controls,
        rel_err=rel,
        diverged=diverged,
    )


# ---------------------------------------------------------------------------
# round engines


def run_round_ssf(model: ModelState, controls: ControlState,
                  federation: list[ClientDataset], cfg: OptimizerConfig,
                  round: int, *, lam: float, x_star=None) -> RoundOutput:
    """One SSF round: decompose, corrected subspace local steps on the sampled
    clients, projected aggregation, then backfill of model and controls."""
    d, m = model.X.shape
    P = round_projector(cfg, d, round)
    x_dec = decompose(P, model.X)
    c_dec = decompose(P, controls.server_c)

    clients = streams.round_clients(cfg.seed, round, len(federation), cfg.clients_per_round)
    new_client_c = controls.client_c.copy()
    endpoints, grad_sums = [], []
    for i in clients:
        ds = federation[i]
        batches = streams.round_batches(cfg.seed, round, i, ds.n,
                                        cfg.local_steps, cfg.batch_size)
        ci_proj = P.P @ controls.client_c[i]
        y_end, gsum = local_steps_ssf(x_dec.proj, x_dec.res, ci_proj, c_dec.proj,
                                      ds, cfg.local_lr, cfg.local_steps, lam,
                                      batches, P)
        endpoints.append(y_end)
        grad_sums.append(gsum)
        new_client_c[i] = update_client_control_ssf(controls.client_c[i], P, gsum,
                                                    cfg.local_steps)

    x_proj_new = aggregate_ssf(x_dec.proj, endpoints, cfg.global_lr)
    X_new = backfill(P, x_proj_new, x_dec.res)
    c_new = update_server_control_ssf(controls.server_c, P, grad_sums,
                                      len(clients), cfg.local_steps)
    new_controls = ControlState(server_c=c_new, client_c=new_client_c,
                                basis_round=controls.basis_round)
    return _finish(X_new, round, new_controls, x_star)


def run_round_scaffold(model: ModelState, controls: ControlState,
                       federation: list[ClientDataset], cfg: OptimizerConfig,
                       round: int, *, lam: float, x_star=None) -> RoundOutput:
    """Full-dimensional SCAFFOLD round (SSF semantics at r = d, no projector)."""
    clients = streams.round_clients(cfg.seed, round, len(federation), cfg.clients_per_round)
    new_client_c = controls.client_c.copy()
    endpoints, grad_sums = [], []
    for i in clients:
        ds = federation[i]
        batches = streams.round_batches(cfg.seed, round, i, ds.n,
                                        cfg.local_steps, cfg.batch_size)
        y_end, gsum = local_steps_full(model.X, controls.client_c[i], controls.server_c,
                                       ds, cfg.local_lr, cfg.local_steps, lam, batches)
        endpoints.append(y_end)
        grad_sums.append(gsum)
        new_client_c[i] = gsum / cfg.local_steps
    X_new = aggregate_ssf(model.X, endpoints, cfg.global_lr)
    c_new = sum(grad_sums) / (len(clients) * cfg.local_steps)
    new_controls = ControlState(server_c=c_new, client_c=new_client_c)
    return _finish(X_new, round, new_controls, x_star)


def run_round_fedavg(model: ModelState, federation: list[ClientDataset],
                     cfg: OptimizerConfig, round: int, *, lam: float,
                     x_star=None) -> RoundOutput:
    """Plain FedAvg round: local SGD, endpoint averaging with eta_g."""
    clients = streams.round_clients(cfg.seed, round, len(federation), cfg.clients_per_round)
    endpoints = []
    for i in clients:
        ds = federation[i]
        batches = streams.round_batches(cfg.seed, round, i, ds.n,
                                        cfg.local_steps, cfg.batch_size)
        y_end, _ = local_steps_full(model.X, None, None, ds, cfg.local_lr,
                                    cfg.local_steps, lam, batches)
        endpoints.append(y_end)
    X_new = aggregate_ssf(model.X, endpoints, cfg.global_lr)
    return _finish(X_new, round, ControlState(None, None), x_star)


def rotate_fedsub_controls(controls: ControlState, P_old: Projector,
                           P_new: Projector) -> ControlState:
    """Re-express r-dimensional controls in a new basis: c -> P_new P_old^T c.

    The component of the lifted control outside the new subspace is lost,
    which is exactly FedSub's information-loss mechanism.
    """
    R = P_new.P @ P_old.P.T
    return ControlState(
        server_c=R @ controls.server_c,
        client_c=np.einsum("ab,nbm->nam", R, controls.client_c),
        basis_round=P_new.round,
    )


def run_round_fedsub(model: ModelState, controls: ControlState,
                     federation: list[ClientDataset], cfg: OptimizerConfig,
                     round: int, *, lam: float, x_star=None) -> RoundOutput:
    """FedSub round: subspace-only controls, rotated on projector refresh.

    Local steps and model backfill match SSF; the controls live in R^{r x m}
    and are wholly replaced by projected gradient means, so refreshing the
    projector discards their out-of-subspace history.
    """
    d, m = model.X.shape
    anchor = projector_anchor(round, cfg.projector_refresh_every)
    P = generate_projector(d, cfg.r, cfg.seed, anchor)
    if anchor != controls.basis_round:
        P_old = generate_projector(d, cfg.r, cfg.seed, controls.basis_round)
        controls = rotate_fedsub_controls(controls, P_old, P)

    x_dec = decompose(P, model.X)
    clients = streams.round_clients(cfg.seed, round, len(federation), cfg.clients_per_round)
    new_client_c = controls.client_c.copy()
    endpoints, proj_means = [], []
    for i in clients:
        ds = federation[i]
        batches = streams.round_batches(cfg.seed, round, i, ds.n,
                                        cfg.local_steps, cfg.batch_size)
        y_end, gsum = local_steps_ssf(x_dec.proj, x_dec.res, controls.client_c[i],
                                      controls.server_c, ds, cfg.local_lr,
                                      cfg.local_steps, lam, batches, P)
        endpoints.append(y_end)
        proj_mean = P.P @ gsum / cfg.local_steps
        proj_means.append(proj_mean)
        new_client_c[i] = proj_mean

    x_proj_new = aggregate_ssf(x_dec.proj, endpoints, cfg.global_lr)
    X_new = backfill(P, x_proj_new, x_dec.res)
    c_new = sum(proj_means) / len(proj_means)
    new_controls = ControlState(server_c=c_new, client_c=new_client_c,
                                basis_round=anchor)
    return _finish(X_new, round, new_controls, x_star)


def run_round(model: ModelState, controls: ControlState,
              federation: list[ClientDataset], cfg: OptimizerConfig,
              round: int, *, lam: float, x_star=None) -> RoundOutput:
    """Dispatch one round of cfg.algorithm."""
    if cfg.algorithm == "ssf":
        return run_round_ssf(model, controls, federation, cfg, round, lam=lam, x_star=x_star)
    if cfg.algorithm == "scaffold":
        return run_round_scaffold(model, controls, federation, cfg, round, lam=lam, x_star=x_star)
    if cfg.algorithm == "fedavg":
        return run_round_fedavg(model, federation, cfg, round, lam=lam, x_star=x_star)
    return run_round_fedsub(model, controls, federation, cfg, round, lam=lam, x_star=x_star)
