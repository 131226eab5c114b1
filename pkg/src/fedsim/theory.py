"""Stepsize rules and Monte-Carlo verification of the convergence analysis.

The convergence guarantee couples a local rate eta_l with an effective global
step eta_tilde = eta_g * eta_l * K through four conditions; the harmonic rule
below picks stepsizes that satisfy them by construction. The verify_* routines
check the lemma-level inequalities empirically on small instances: each one
replays frozen round states with redrawn randomness and reports one-sided
Monte-Carlo comparisons inflated by 3 standard errors. The gradient-variance
bound sigma^2 is always a measured quantity (sup over probe states, inflated),
never an assumed constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .problem import (
    ClientDataset,
    ModelState,
    closed_form_optimum,
    full_local_gradient,
    global_gradient,
    global_loss,
    minibatch_gradient,
    smoothness_constant,
)
from .rounds import (
    OptimizerConfig,
    aggregate_ssf,
    init_controls,
    local_steps_ssf,
    round_projector,
    run_round_ssf,
)
from .subspace import Projector, backfill, decompose, generate_projector

_U64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_TAG_SIGMA = 50
_TAG_DRIFT = 51
_TAG_DESCENT = 52


def _gen(*entropy: int) -> np.random.Generator:
    key = tuple(int(np.uint64(e) & _U64) for e in entropy)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class TheoryParams:
    L: float          # smoothness constant
    sigma_sq: float   # measured gradient-variance bound
    rho: float        # subspace ratio r/d
    delta_f: float    # F(x0) - F*
    c0: float         # initial control error
    N: int            # participating clients
    K: int            # local steps
    T: int            # rounds
    c_star: float = 100.0

    def __post_init__(self):
        if self.L <= 0:
            raise ValueError("L must be positive")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if min(self.sigma_sq, self.delta_f, self.c0) < 0:
            raise ValueError("sigma_sq, delta_f, c0 must be nonnegative")
        if self.N < 1 or self.K < 1 or self.T < 1:
            raise ValueError("N, K, T must be >= 1")


@dataclass(frozen=True)
class StepsizePlan:
    eta_l: float
    eta_g: float
    eta_tilde: float
    eta_tilde0: float
    eta_tilde1: float


@dataclass
class VerificationReport:
    name: str
    lhs: float
    rhs: float
    margin: float  # (rhs - lhs) / max(rhs, tiny); negative means violated
    passed: bool
    trials: int = 0
    notes: str = ""
    tolerance: float = 0.0

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return (f"[{state}] {self.name}: lhs={self.lhs:.6e} rhs={self.rhs:.6e} "
                f"margin={self.margin:+.3e} trials={self.trials} {self.notes}")


def _report(name, lhs, rhs, tol=0.0, trials=0, notes=""):
    rhs_eff = rhs * (1.0 + tol)
    denom = max(abs(rhs), 1e-300)
    return VerificationReport(name=name, lhs=lhs, rhs=rhs,
                              margin=(rhs - lhs) / denom,
                              passed=bool(lhs <= rhs_eff),
                              trials=trials, notes=notes, tolerance=tol)


# ---------------------------------------------------------------------------
# stepsize rules


def corollary_stepsizes(p: TheoryParams) -> StepsizePlan:
    """Harmonic-rule stepsizes satisfying the four theorem conditions.

    eta_l = min{ 1/(2KL), sqrt(rho/(864 L^2 K^3)),
                 sqrt((delta_f + c0)/(C* L K sigma^2 T rho)) }
    eta_tilde0 = min{1/(4L), rho/(2L)};
    eta_tilde1 = sqrt(2 N K (delta_f + c0)/(L sigma^2 T));
    eta_tilde = harmonic mean of the two; eta_g = eta_tilde/(eta_l K).
    sigma^2 = 0 drops the variance-limited terms from both minima.
    """
    L, K, rho, T = p.L, p.K, p.rho, p.T
    budget = p.delta_f + p.c0
    candidates = [1.0 / (2.0 * K * L), math.sqrt(rho / (864.0 * L * L * K ** 3))]
    if p.sigma_sq > 0:
        if budget <= 0:
            raise ValueError("delta_f + c0 must be positive when sigma_sq > 0")
        candidates.append(math.sqrt(budget / (p.c_star * L * K * p.sigma_sq * T * rho)))
    eta_l = min(candidates)

    eta0 = min(1.0 / (4.0 * L), rho / (2.0 * L))
    if p.sigma_sq > 0:
        eta1 = math.sqrt(2.0 * p.N * K * budget / (L * p.sigma_sq * T))
        eta_tilde = 1.0 / (1.0 / eta0 + 1.0 / eta1)
    else:
        eta1 = math.inf
        eta_tilde = eta0
    return StepsizePlan(eta_l=eta_l, eta_g=eta_tilde / (eta_l * K),
                        eta_tilde=eta_tilde, eta_tilde0=eta0, eta_tilde1=eta1)


def check_theorem_conditions(eta_l: float, eta_tilde: float, p: TheoryParams,
                             tol: float = 1e-12) -> list[VerificationReport]:
    """The four stepsize conditions of the convergence theorem, as exact
    lhs <= rhs reports (condition 1 contributes two)."""
    L, K, rho = p.L, p.K, p.rho
    return [
        _report("local_rate_cap", eta_l, 1.0 / (2.0 * K * L), tol),
        _report("effective_rate_cap", eta_tilde, 1.0 / (4.0 * L), tol),
        _report("drift_margin", 72.0 * K ** 3 * L * L * eta_l * eta_l, rho / 8.0, tol),
        _report("drift_coupling",
                3456.0 * L ** 4 * eta_tilde ** 2 * K ** 3 * eta_l ** 2 / rho ** 3,
                1.0, tol),
        _report("subspace_stability", 4.0 * L * L * eta_tilde ** 2 / (rho * rho),
                1.0, tol),
    ]


def theorem_bound(p: TheoryParams, eta_l: float, eta_tilde: float) -> float:
    """Right-hand side of the convergence theorem for min_t E||grad F||^2."""
    return (8.0 * (p.delta_f + p.c0) / (p.rho * eta_tilde * p.T)
            + 4.0 * p.L * p.sigma_sq * eta_tilde / (p.rho * p.N * p.K)
            + 8000.0 * p.L * p.L * p.K * eta_l * eta_l * p.sigma_sq / p.rho)


# ---------------------------------------------------------------------------
# variance estimation


def default_probe_points(federation: list[ClientDataset], lam: float,
                         num: int = 6) -> list[np.ndarray]:
    """States along the segment from the zero initializer to the optimum,
    which brackets the region the simulated runs visit."""
    x_star = closed_form_optimum(federation, lam)
    alphas = np.linspace(0.0, 1.25, num)
    return [a * x_star for a in alphas]


def estimate_sigma(federation: list[ClientDataset], lam: float, batch: int,
                   probe_points: list[np.ndarray], trials: int,
                   seed: int = 0) -> float:
    """Measured bound for E||g - grad F_i||^2: the max over probe points and
    clients of the Monte-Carlo variance, inflated by 3 standard errors."""
    if trials < 100:
        raise ValueError("estimate_sigma needs trials >= 100")
    worst = 0.0
    for pi, X in enumerate(probe_points):
        for ci, ds in enumerate(federation):
            if batch >= ds.n:
                continue  # full batch: zero variance
            full = full_local_gradient(ds, X, lam)
            g = _gen(seed, _TAG_SIGMA, pi, ci)
            sq = np.empty(trials)
            for t in range(trials):
                idx = g.permutation(ds.n)[:batch]
                diff = minibatch_gradient(ds, X, lam, idx) - full
                sq[t] = float(np.sum(diff * diff))
            mean = float(sq.mean())
            se = float(sq.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
            worst = max(worst, mean + 3.0 * se)
    return worst


def exact_minibatch_variance(ds: ClientDataset, X: np.ndarray, lam: float,
                             batch: int) -> float:
    """Closed-form E||g - grad F_i||^2 for without-replacement sampling:
    population variance times the finite-population factor (n-b)/(b(n-1))."""
    full = full_local_gradient(ds, X, lam)
    resid = ds.A @ X - ds.B
    pop = 0.0
    for s in range(ds.n):
        gs = np.outer(ds.A[s], resid[s]) + lam * X
        pop += float(np.sum((gs - full) ** 2))
    pop /= ds.n
    if batch >= ds.n:
        return 0.0
    return pop * (ds.n - batch) / (batch * (ds.n - 1))


# ---------------------------------------------------------------------------
# shared replay helpers


def _client_subspace_trajectory(x_proj, x_res, ci_proj, c_proj, ds, eta_l, K,
                                lam, batches, P):
    """Replay K corrected subspace steps; returns (drift_sum, y_end) where
    drift_sum = sum_{k=0}^{K-1} ||y^k - x_proj||^2."""
    y = x_proj.copy()
    drift = 0.0
    for k in range(K):
        delta = y - x_proj
        drift += float(np.sum(delta * delta))
        g = minibatch_gradient(ds, P.P.T @ y + x_res, lam, batches[k])
        y = y - eta_l * (P.P @ g - ci_proj + c_proj)
    return drift, y


def _fresh_batches(g: np.random.Generator, n: int, K: int, b: int) -> np.ndarray:
    keys = g.random((K, n))
    return np.argsort(keys, axis=1)[:, :b]


def _ssf_states(federation, cfg: OptimizerConfig, rounds: int, lam: float,
                x_star=None):
    """Run SSF and snapshot (t, X, server_c, client_c, P) before each round."""
    d = federation[0].A.shape[1]
    m = federation[0].B.shape[1]
    model = ModelState(X=np.zeros((d, m)))
    controls = init_controls(cfg, len(federation), d, m)
    states = []
    for t in range(rounds):
        P = round_projector(cfg, d, t)
        states.append((t, model.X.copy(), controls.server_c.copy(),
                       controls.client_c.copy(), P))
        out = run_round_ssf(model, controls, federation, cfg, t, lam=lam,
                            x_star=x_star)
        if out.diverged:
            raise RuntimeError(f"verification run diverged at round {t}")
        model, controls = out.new_model, out.new_controls
    return states


def _realized_drift(state, federation, cfg, lam):
    """Average projected drift of the round actually taken from ``state``
    (replays the run's own minibatch streams)."""
    t, X, c, c_i, P = state
    x_dec = decompose(P, X)
    c_proj = P.P @ c
    clients = streams.round_clients(cfg.seed, t, len(federation), cfg.clients_per_round)
    total = 0.0
    for i in clients:
        ds = federation[i]
        batches = streams.round_batches(cfg.seed, t, int(i), ds.n,
                                        cfg.local_steps, cfg.batch_size)
        drift, _ = _client_subspace_trajectory(x_dec.proj, x_dec.res,
                                               P.P @ c_i[i], c_proj, ds,
                                               cfg.local_lr, cfg.local_steps,
                                               lam, batches, P)
        total += drift
    return total / (len(clients) * cfg.local_steps)


# ---------------------------------------------------------------------------
# lemma-level verifications


def verify_projected_variance(federation, P: Projector, lam: float, trials: int,
                              *, batch: int, sigma_sq: float,
                              probe_points=None, seed: int = 0) -> VerificationReport:
    """Projected gradient noise never exceeds the full-space variance bound:
    MC estimate of E||P (g - grad F_i)||^2 against the measured sigma^2."""
    if probe_points is None:
        probe_points = default_probe_points(federation, lam)
    worst_lhs, worst_se, ratios = 0.0, 0.0, []
    for pi, X in enumerate(probe_points):
        for ci, ds in enumerate(federation):
            if batch >= ds.n:
                continue
            full = full_local_gradient(ds, X, lam)
            g = _gen(seed, _TAG_SIGMA, 1000 + pi, ci)
            proj_sq = np.empty(trials)
            full_sq = np.empty(trials)
            for t in range(trials):
                idx = g.permutation(ds.n)[:batch]
                noise = minibatch_gradient(ds, X, lam, idx) - full
                pn = P.P @ noise
                proj_sq[t] = float(np.sum(pn * pn))
                full_sq[t] = float(np.sum(noise * noise))
            mean = float(proj_sq.mean())
            if mean > worst_lhs:
                worst_lhs = mean
                worst_se = float(proj_sq.std(ddof=1)) / math.sqrt(trials)
            if full_sq.mean() > 0:
                ratios.append(proj_sq.mean() / full_sq.mean())
    rho = P.r / P.d
    notes = f"mean projected/full ratio {np.mean(ratios):.3f} (rho={rho:.3f})"
    return _report("projected_variance", worst_lhs, sigma_sq + 3.0 * worst_se,
                   trials=trials, notes=notes)


def verify_drift_bound(federation, cfg: OptimizerConfig, rounds: int,
                       trials: int, *, lam: float, sigma_sq: float,
                       samples: int = 50, seed: int = 0) -> VerificationReport:
    """Client drift bound: for sampled (round, client) states, the MC mean of
    sum_k ||y_proj^k - x_proj||^2 stays below
    6 K^2 eta_l^2 sigma^2 + 12 K^3 eta_l^2 ||grad F_i(x) - c_i + c||^2.

    The sum includes the post-step iterates k = 1..K, the larger of the two
    index conventions the bound covers (k=0 contributes zero), so the check
    is not vacuous at K=1."""
    K, eta_l = cfg.local_steps, cfg.local_lr
    L = smoothness_constant(federation, lam)
    if eta_l > 1.0 / (2.0 * K * L):
        raise ValueError("drift bound requires eta_l <= 1/(2KL)")
    states = _ssf_states(federation, cfg, rounds, lam)
    picker = _gen(seed, _TAG_DRIFT, 0)
    worst = None
    violations = 0
    for j in range(samples):
        t_idx = int(picker.integers(len(states)))
        i = int(picker.integers(len(federation)))
        t, X, c, c_i, P = states[t_idx]
        ds = federation[i]
        x_dec = decompose(P, X)
        ci_proj = P.P @ c_i[i]
        c_proj = P.P @ c
        gap = full_local_gradient(ds, X, lam) - c_i[i] + c
        G_it = float(np.sum(gap * gap))
        rhs = 6.0 * K * K * eta_l * eta_l * sigma_sq \
            + 12.0 * K ** 3 * eta_l * eta_l * G_it
        vals = np.empty(trials)
        for tr in range(trials):
            g = _gen(seed, _TAG_DRIFT, 1 + j, tr)
            batches = _fresh_batches(g, ds.n, K, cfg.batch_size)
            drift0, y_end = _client_subspace_trajectory(
                x_dec.proj, x_dec.res, ci_proj, c_proj, ds, eta_l, K, lam,
                batches, P)
            tail = y_end - x_dec.proj
            vals[tr] = drift0 + float(np.sum(tail * tail))
        lhs = float(vals.mean())
        se = float(vals.std(ddof=1)) / math.sqrt(trials)
        if lhs > rhs + 3.0 * se:
            violations += 1
        margin = (rhs + 3.0 * se - lhs) / max(rhs, 1e-300)
        if worst is None or margin < worst[0]:
            worst = (margin, lhs, rhs + 3.0 * se)
    rep = _report("client_drift_bound", worst[1], worst[2], trials=trials,
                  notes=f"{samples} state/client pairs, {violations} violations")
    rep.passed = violations == 0
    return rep


def verify_descent(federation, cfg: OptimizerConfig, rounds: int, trials: int,
                   *, lam: float, sigma_sq: float, seed: int = 0) -> VerificationReport:
    """One-round progress: replaying a frozen round state with redrawn
    projector and minibatches, mean F(x^{t+1}) stays below
    F(x) - (rho eta~/4)||grad F||^2 + (L eta~^2 / 2NK) sigma^2
    + (3 L^2 eta~ / 2) E_drift  (+ 3 MC standard errors)."""
    N = len(federation)
    d = federation[0].A.shape[1]
    K, eta_l, eta_g = cfg.local_steps, cfg.local_lr, cfg.global_lr
    eta_t = eta_g * eta_l * K
    rho = cfg.r / d
    L = smoothness_constant(federation, lam)
    if eta_t > 1.0 / (4.0 * L):
        raise ValueError("descent lemma requires eta_tilde <= 1/(4L)")
    if cfg.clients_per_round != N:
        raise ValueError("descent verification runs at full participation")
    states = _ssf_states(federation, cfg, rounds, lam)
    worst = None
    violations = 0
    for t, X, c, c_i, _ in states:
        f_now = global_loss(federation, X, lam)
        grad = global_gradient(federation, X, lam)
        grad_sq = float(np.sum(grad * grad))
        f_next = np.empty(trials)
        drifts = np.empty(trials)
        for tr in range(trials):
            g = _gen(seed, _TAG_DESCENT, t, tr)
            P = generate_projector(d, cfg.r, int(g.integers(2 ** 62)), 0)
            x_dec = decompose(P, X)
            c_proj = P.P @ c
            endpoints = []
            drift_tot = 0.0
            for i, ds in enumerate(federation):
                batches = _fresh_batches(g, ds.n, K, cfg.batch_size)
                drift, y_end = _client_subspace_trajectory(
                    x_dec.proj, x_dec.res, P.P @ c_i[i], c_proj, ds, eta_l, K,
                    lam, batches, P)
                drift_tot += drift
                endpoints.append(y_end)
            x_new = backfill(P, aggregate_ssf(x_dec.proj, endpoints, eta_g),
                             x_dec.res)
            f_next[tr] = global_loss(federation, x_new, lam)
            drifts[tr] = drift_tot / (N * K)
        lhs = float(f_next.mean())
        se = float(f_next.std(ddof=1)) / math.sqrt(trials)
        rhs = (f_now - rho * eta_t / 4.0 * grad_sq
               + L * eta_t * eta_t / (2.0 * N * K) * sigma_sq
               + 1.5 * L * L * eta_t * float(drifts.mean()))
        bound = rhs + 3.0 * se
        if lhs > bound:
            violations += 1
        margin = (bound - lhs) / max(abs(bound), 1e-300)
        if worst is None or margin < worst[0]:
            worst = (margin, lhs, bound)
    rep = _report("one_round_progress", worst[1], worst[2], trials=trials,
                  notes=f"{len(states)} round states, {violations} violations")
    rep.passed = violations == 0
    return rep


def contraction_series(federation, cfg: OptimizerConfig, rounds: int, *,
                       lam: float, sigma_sq: float):
    """Run SSF and track the control error C_t together with the recursion's
    upper envelope built from measured perturbation terms."""
    N = len(federation)
    d = federation[0].A.shape[1]
    rho = cfg.r / d
    K = cfg.local_steps
    eta_t = cfg.global_lr * cfg.local_lr * K
    L = smoothness_constant(federation, lam)
    states = _ssf_states(federation, cfg, rounds, lam)

    def control_error(X, c_i):
        tot = 0.0
        for i, ds in enumerate(federation):
            diff = c_i[i] - full_local_gradient(ds, X, lam)
            tot += float(np.sum(diff * diff))
        return tot / N

    c_series, env_series = [], []
    env = None
    for state in states:
        t, X, c, c_i, P = state
        C_t = control_error(X, c_i)
        env = C_t if env is None else env
        c_series.append(C_t)
        env_series.append(env)
        grad = global_gradient(federation, X, lam)
        grad_sq = float(np.sum(grad * grad))
        e_drift = _realized_drift(state, federation, cfg, lam)
        env = ((1.0 - rho / 2.0) * env
               + 3.0 * sigma_sq / K
               + 3.0 * L * L * e_drift
               + 12.0 * L * L / rho * eta_t * eta_t * grad_sq
               + 6.0 * L * L / rho * eta_t * eta_t * sigma_sq / (N * K)
               + 12.0 * L ** 4 / rho * eta_t * eta_t * e_drift)
    return np.asarray(c_series), np.asarray(env_series)


def verify_control_contraction_trend(federation, cfg: OptimizerConfig,
                                     rounds: int, *, lam: float,
                                     sigma_sq: float,
                                     tol: float = 1e-9) -> VerificationReport:
    """The measured C_t sequence stays below the contraction recursion's
    envelope (zero violations over the logged rounds)."""
    c_series, env_series = contraction_series(federation, cfg, rounds,
                                              lam=lam, sigma_sq=sigma_sq)
    excess = c_series - env_series * (1.0 + tol)
    violations = int(np.sum(excess > 0))
    worst = int(np.argmax(c_series / np.maximum(env_series, 1e-300)))
    rep = _report("control_contraction_trend", float(c_series[worst]),
                  float(env_series[worst]), tol=tol, trials=rounds,
                  notes=f"{violations} envelope violations in {rounds} rounds")
    rep.passed = violations == 0
    return rep


# ---------------------------------------------------------------------------
# composition


def params_from_federation(federation, lam: float, *, r: int, K: int, T: int,
                           sigma_sq: float, c_star: float = 100.0) -> TheoryParams:
    """Assemble TheoryParams for a zero-initialized run on this federation."""
    d = federation[0].A.shape[1]
    m = federation[0].B.shape[1]
    x0 = np.zeros((d, m))
    x_star = closed_form_optimum(federation, lam)
    delta_f = global_loss(federation, x0, lam) - global_loss(federation, x_star, lam)
    c0 = 0.0
    for ds in federation:
        g = full_local_gradient(ds, x0, lam)
        c0 += float(np.sum(g * g))
    c0 /= len(federation)
    return TheoryParams(L=smoothness_constant(federation, lam),
                        sigma_sq=sigma_sq, rho=r / d, delta_f=delta_f, c0=c0,
                        N=len(federation), K=K, T=T, c_star=c_star)


def verification_suite(federation, lam: float, *, r: int, K: int = 5,
                       batch: int = 20, T: int = 400, seed: int = 0,
                       sigma_trials: int = 200, drift_rounds: int = 60,
                       drift_samples: int = 50, drift_trials: int = 200,
                       descent_states: int = 5, descent_trials: int = 500,
                       contraction_rounds: int = 200):
    """End-to-end verification: measure sigma^2, derive corollary stepsizes,
    check the theorem conditions, then run the four lemma checks at full
    participation. Returns (params, plan, reports)."""
    probes = default_probe_points(federation, lam)
    sigma_sq = estimate_sigma(federation, lam, batch, probes, sigma_trials, seed=seed)
    params = params_from_federation(federation, lam, r=r, K=K, T=T, sigma_sq=sigma_sq)
    plan = corollary_stepsizes(params)
    reports = check_theorem_conditions(plan.eta_l, plan.eta_tilde, params)

    N = len(federation)
    d = federation[0].A.shape[1]
    cfg = OptimizerConfig(algorithm="ssf", local_lr=plan.eta_l,
                          global_lr=plan.eta_g, local_steps=K,
                          clients_per_round=N, r=r, rounds=T, batch_size=batch,
                          seed=seed)
    P = generate_projector(d, r, seed, 0)
    reports.append(verify_projected_variance(
        federation, P, lam, max(100, sigma_trials), batch=batch,
        sigma_sq=sigma_sq, probe_points=probes, seed=seed))
    reports.append(verify_drift_bound(
        federation, cfg, drift_rounds, drift_trials, lam=lam,
        sigma_sq=sigma_sq, samples=drift_samples, seed=seed))
    reports.append(verify_descent(
        federation, OptimizerConfig(algorithm="ssf", local_lr=plan.eta_l,
                                    global_lr=plan.eta_g, local_steps=K,
                                    clients_per_round=N, r=r,
                                    rounds=descent_states, batch_size=batch,
                                    seed=seed),
        descent_states, descent_trials, lam=lam, sigma_sq=sigma_sq, seed=seed))
    reports.append(verify_control_contraction_trend(
        federation, cfg, contraction_rounds, lam=lam, sigma_sq=sigma_sq))
    return params, plan, reports
