import numpy as np
import pytest

from fedsim import streams
from fedsim.problem import (
    ModelState,
    ProblemConfig,
    closed_form_optimum,
    full_local_gradient,
    generate_federation,
    minibatch_gradient,
    smoothness_constant,
)
from fedsim.rounds import (
    ControlState,
    OptimizerConfig,
    aggregate_ssf,
    init_controls,
    local_steps_full,
    local_steps_ssf,
    rotate_fedsub_controls,
    run_round,
    run_round_fedavg,
    run_round_fedsub,
    run_round_scaffold,
    run_round_ssf,
    update_client_control_ssf,
    update_server_control_ssf,
)
from fedsim.subspace import decompose, generate_projector, lift


def _problem(het=0.5, noise=0.01, N=5, d=12, m=3, n=15, lam=0.1, seed=7):
    cfg = ProblemConfig(num_clients=N, feature_dim=d, output_dim=m,
                        samples_per_client=n, ridge=lam, noise_std=noise,
                        het_level=het, data_seed=seed)
    fed = generate_federation(cfg)
    return cfg, fed, closed_form_optimum(fed, lam)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(algorithm="sgd", local_lr=0.1)
    with pytest.raises(ValueError):
        OptimizerConfig(algorithm="ssf", local_lr=0.1)  # missing r
    with pytest.raises(ValueError):
        OptimizerConfig(algorithm="fedavg", local_lr=-0.1)


# ---------------------------------------------------------------------------
# local step ops


def test_local_steps_ssf_single_plain_step(rng):
    cfg, fed, _ = _problem()
    ds = fed[0]
    P = generate_projector(cfg.feature_dim, 4, seed=1, round=0)
    X = rng.standard_normal((cfg.feature_dim, cfg.output_dim))
    dec = decompose(P, X)
    z = np.zeros((4, cfg.output_dim))
    batches = np.arange(ds.n)[None, :]  # K=1, full batch
    y, gsum = local_steps_ssf(dec.proj, dec.res, z, z, ds, 0.05, 1, cfg.ridge,
                              batches, P)
    y_ref = dec.proj - 0.05 * (P.P @ full_local_gradient(ds, lift(P, dec.proj) + dec.res, cfg.ridge))
    assert np.allclose(y, y_ref, atol=1e-12)
    assert np.allclose(gsum, full_local_gradient(ds, lift(P, dec.proj) + dec.res, cfg.ridge), atol=1e-12)


def test_local_steps_ssf_equal_controls_cancel(rng):
    cfg, fed, _ = _problem()
    ds = fed[1]
    P = generate_projector(cfg.feature_dim, 5, seed=2, round=0)
    dec = decompose(P, rng.standard_normal((cfg.feature_dim, cfg.output_dim)))
    batches = streams.round_batches(3, 0, 1, ds.n, 4, 6)
    cc = rng.standard_normal((5, cfg.output_dim))
    z = np.zeros_like(cc)
    y_corr, _ = local_steps_ssf(dec.proj, dec.res, cc, cc, ds, 0.05, 4, cfg.ridge, batches, P)
    y_plain, _ = local_steps_ssf(dec.proj, dec.res, z, z, ds, 0.05, 4, cfg.ridge, batches, P)
    assert np.allclose(y_corr, y_plain, atol=1e-12)


def test_client_control_update_full_rank(rng):
    d, m = 6, 2
    P = generate_projector(d, d, seed=3, round=0)
    c_i = rng.standard_normal((d, m))
    gsum = rng.standard_normal((d, m))
    new = update_client_control_ssf(c_i, P, gsum, 4)
    assert np.allclose(new, gsum / 4, atol=1e-10)


def test_client_control_update_orthogonal_gradsum(rng):
    d, m = 10, 2
    P = generate_projector(d, 3, seed=4, round=0)
    c_i = rng.standard_normal((d, m))
    gsum = decompose(P, rng.standard_normal((d, m))).res  # P gsum = 0
    new = update_client_control_ssf(c_i, P, gsum, 4)
    assert np.max(np.abs(P.P @ new)) <= 1e-12 * (1 + np.linalg.norm(c_i))
    # residual part untouched
    assert np.allclose(decompose(P, new).res, decompose(P, c_i).res, atol=1e-12)


def test_client_control_update_identity(rng):
    d, m = 9, 3
    P = generate_projector(d, 4, seed=5, round=0)
    c_i = rng.standard_normal((d, m))
    gsum = rng.standard_normal((d, m))
    new = update_client_control_ssf(c_i, P, gsum, 2)
    expected = decompose(P, c_i).res + lift(P, P.P @ gsum / 2)
    assert np.allclose(new, expected, atol=1e-12)


def test_server_control_update(rng):
    d, m, K = 8, 2, 3
    P = generate_projector(d, 3, seed=6, round=0)
    c = rng.standard_normal((d, m))
    gsums = [rng.standard_normal((d, m)) for _ in range(4)]
    new = update_server_control_ssf(c, P, gsums, 4, K)
    # algebraic identity: mean of the client updates' projected parts + old residual
    client_projected = [lift(P, P.P @ gs / K) for gs in gsums]
    expected = sum(client_projected) / 4 + decompose(P, c).res
    assert np.allclose(new, expected, atol=1e-11)
    # zero gradients leave only the residual
    zeros = [np.zeros((d, m))] * 4
    assert np.allclose(update_server_control_ssf(c, P, zeros, 4, K),
                       decompose(P, c).res, atol=1e-12)
    # full rank: residual vanishes
    Pd = generate_projector(d, d, seed=6, round=1)
    new_full = update_server_control_ssf(c, Pd, gsums, 4, K)
    assert np.allclose(new_full, sum(gsums) / (4 * K), atol=1e-10)


def test_aggregate_ssf(rng):
    x = rng.standard_normal((5, 2))
    assert np.allclose(aggregate_ssf(x, [x.copy(), x.copy()], 0.7), x)
    endpoint = rng.standard_normal((5, 2))
    assert np.allclose(aggregate_ssf(x, [endpoint], 1.0), endpoint)
    with pytest.raises(ValueError):
        aggregate_ssf(x, [], 1.0)


def test_aggregate_matches_effective_step_form(rng):
    # unrolling the local updates: the aggregate equals
    # x_proj - eta_g*eta_l*K * v_t with v_t the mean corrected direction.
    cfg, fed, _ = _problem()
    r, K, eta_l, eta_g = 4, 3, 0.04, 0.8
    P = generate_projector(cfg.feature_dim, r, seed=8, round=0)
    X = rng.standard_normal((cfg.feature_dim, cfg.output_dim))
    dec = decompose(P, X)
    c = rng.standard_normal((cfg.feature_dim, cfg.output_dim))
    c_proj = P.P @ c
    endpoints, directions = [], []
    for i, ds in enumerate(fed):
        ci_proj = P.P @ (0.1 * full_local_gradient(ds, X, cfg.ridge))
        batches = streams.round_batches(1, 0, i, ds.n, K, 5)
        y_end, _ = local_steps_ssf(dec.proj, dec.res, ci_proj, c_proj, ds,
                                   eta_l, K, cfg.ridge, batches, P)
        endpoints.append(y_end)
        # expand v_t explicitly by replaying the steps
        y = dec.proj.copy()
        for k in range(K):
            g = minibatch_gradient(ds, lift(P, y) + dec.res, cfg.ridge, batches[k])
            step = P.P @ g - ci_proj + c_proj
            directions.append(step)
            y = y - eta_l * step
    v_t = sum(directions) / (len(fed) * K)
    agg = aggregate_ssf(dec.proj, endpoints, eta_g)
    assert np.allclose(agg, dec.proj - eta_g * eta_l * K * v_t, atol=1e-12)


# ---------------------------------------------------------------------------
# round-level behaviour


def _run(algorithm, pcfg, fed, x_star, rounds, **kw):
    defaults = dict(local_lr=0.05, global_lr=1.0, local_steps=3,
                    clients_per_round=3, r=4, rounds=rounds, batch_size=5, seed=17)
    defaults.update(kw)
    ocfg = OptimizerConfig(algorithm=algorithm, **defaults)
    model = ModelState(X=np.zeros((pcfg.feature_dim, pcfg.output_dim)))
    controls = init_controls(ocfg, pcfg.num_clients, pcfg.feature_dim, pcfg.output_dim)
    outs = []
    for t in range(rounds):
        out = run_round(model, controls, fed, ocfg, t, lam=pcfg.ridge, x_star=x_star)
        outs.append(out)
        model, controls = out.new_model, out.new_controls
    return outs


def test_ssf_reduces_to_scaffold_at_full_rank():
    pcfg, fed, x_star = _problem(N=5, d=10, m=3)
    kw = dict(local_lr=0.02, local_steps=4, clients_per_round=3, batch_size=6,
              seed=31, global_lr=1.0)
    out_ssf = _run("ssf", pcfg, fed, x_star, 40, r=10, **kw)
    out_sca = _run("scaffold", pcfg, fed, x_star, 40, r=10, **kw)
    for a, b in zip(out_ssf, out_sca):
        denom = np.linalg.norm(b.new_model.X)
        assert np.linalg.norm(a.new_model.X - b.new_model.X) <= 1e-10 * max(denom, 1.0)


def test_ssf_residual_preservation():
    pcfg, fed, x_star = _problem(N=5, d=12, m=3)
    ocfg = OptimizerConfig(algorithm="ssf", local_lr=0.03, local_steps=3,
                           clients_per_round=3, r=4, rounds=0, batch_size=5, seed=23)
    model = ModelState(X=np.zeros((12, 3)))
    controls = init_controls(ocfg, 5, 12, 3)
    for t in range(30):
        P = generate_projector(12, 4, ocfg.seed, t)
        out = run_round(model, controls, fed, ocfg, t, lam=pcfg.ridge, x_star=x_star)
        dx = out.new_model.X - model.X
        dc = out.new_controls.server_c - controls.server_c
        perp = lambda V: V - P.P.T @ (P.P @ V)
        scale = 1 + np.linalg.norm(model.X)
        assert np.max(np.abs(perp(dx))) <= 1e-12 * scale
        assert np.max(np.abs(perp(dc))) <= 1e-12 * (1 + np.linalg.norm(controls.server_c))
        # client controls too
        for i in range(5):
            dci = out.new_controls.client_c[i] - controls.client_c[i]
            assert np.max(np.abs(perp(dci))) <= 1e-12 * (1 + np.linalg.norm(controls.client_c[i]))
        model, controls = out.new_model, out.new_controls


def test_ssf_strict_descent_deterministic_iid():
    # zero heterogeneity, no observation noise, K=1, full batch, full
    # participation: relative error decreases every round for eta_l < 1/L
    pcfg = ProblemConfig(num_clients=6, feature_dim=24, output_dim=4,
                         samples_per_client=30, ridge=0.05, noise_std=0.0,
                         het_level=0.0, data_seed=3)
    fed = generate_federation(pcfg)
    x_star = closed_form_optimum(fed, pcfg.ridge)
    L = smoothness_constant(fed, pcfg.ridge)
    outs = _run("ssf", pcfg, fed, x_star, 120, local_lr=0.9 / L, local_steps=1,
                clients_per_round=6, r=6, batch_size=30, seed=2)
    rels = [1.0] + [o.rel_err for o in outs]
    assert all(b < a for a, b in zip(rels, rels[1:]))


def test_scaffold_first_round_equals_fedavg_with_zero_controls():
    pcfg, fed, x_star = _problem()
    kw = dict(local_lr=0.05, local_steps=1, clients_per_round=3, batch_size=5, seed=11)
    a = _run("scaffold", pcfg, fed, x_star, 1, **kw)[0]
    b = _run("fedavg", pcfg, fed, x_star, 1, **kw)[0]
    assert np.allclose(a.new_model.X, b.new_model.X, atol=1e-14)


def test_scaffold_linear_convergence_deterministic():
    pcfg = ProblemConfig(num_clients=5, feature_dim=16, output_dim=3,
                         samples_per_client=20, ridge=0.1, noise_std=0.01,
                         het_level=1.0, data_seed=5)
    fed = generate_federation(pcfg)
    x_star = closed_form_optimum(fed, pcfg.ridge)
    L = smoothness_constant(fed, pcfg.ridge)
    outs = _run("scaffold", pcfg, fed, x_star, 300, local_lr=0.3 / (5 * L),
                local_steps=5, clients_per_round=5, batch_size=20, seed=2)
    rels = np.array([o.rel_err for o in outs])
    logr = np.log(rels[20:250])
    slope, icept = np.polyfit(np.arange(logr.size), logr, 1)
    resid = logr - (slope * np.arange(logr.size) + icept)
    assert slope < -0.005
    assert np.abs(resid).max() < 0.5


def test_fedavg_one_step_is_global_gradient_descent():
    pcfg, fed, x_star = _problem(N=4, d=10, m=2, n=12)
    eta = 0.04
    out = _run("fedavg", pcfg, fed, x_star, 1, local_lr=eta, local_steps=1,
               clients_per_round=4, batch_size=12, global_lr=1.0)[0]
    X0 = np.zeros((10, 2))
    grads = [full_local_gradient(ds, X0, pcfg.ridge) for ds in fed]
    expected = X0 - eta * sum(grads) / 4
    assert np.allclose(out.new_model.X, expected, atol=1e-13)


def test_fedavg_single_client_is_sequential_sgd():
    pcfg, fed, x_star = _problem(N=1, d=8, m=2, n=10)
    out = _run("fedavg", pcfg, fed, x_star, 1, local_lr=0.03, local_steps=4,
               clients_per_round=1, batch_size=4, seed=9, global_lr=1.0)[0]
    batches = streams.round_batches(9, 0, 0, 10, 4, 4)
    Y, _ = local_steps_full(np.zeros((8, 2)), None, None, fed[0], 0.03, 4,
                            pcfg.ridge, batches)
    assert np.allclose(out.new_model.X, Y, atol=1e-14)


def test_control_mean_invariant_full_participation():
    # server control stays the mean of client controls under S = N
    pcfg, fed, x_star = _problem(N=4, d=10, m=2, n=12)
    for alg in ("scaffold", "ssf"):
        ocfg = OptimizerConfig(algorithm=alg, local_lr=0.03, local_steps=3,
                               clients_per_round=4, r=3, rounds=0, batch_size=6, seed=13)
        model = ModelState(X=np.zeros((10, 2)))
        controls = init_controls(ocfg, 4, 10, 2)
        for t in range(25):
            out = run_round(model, controls, fed, ocfg, t, lam=pcfg.ridge, x_star=x_star)
            model, controls = out.new_model, out.new_controls
            mean_ci = controls.client_c.mean(axis=0)
            assert np.allclose(controls.server_c, mean_ci, atol=1e-12), alg


def test_rng_discipline_shared_across_algorithms():
    # same seed => same sampled clients and batches for every algorithm
    clients = streams.round_clients(99, 7, 20, 10)
    assert np.array_equal(clients, np.sort(clients))
    assert np.array_equal(clients, streams.round_clients(99, 7, 20, 10))
    b1 = streams.round_batches(99, 7, 3, 50, 5, 20)
    b2 = streams.round_batches(99, 7, 3, 50, 5, 20)
    assert np.array_equal(b1, b2)
    # without replacement within each step
    for row in b1:
        assert len(set(row.tolist())) == len(row)


def test_divergence_flag_propagates():
    pcfg, fed, x_star = _problem()
    outs = _run("fedavg", pcfg, fed, x_star, 6, local_lr=50.0, local_steps=5,
                batch_size=5)
    assert any(o.diverged for o in outs)
    bad = [o for o in outs if o.diverged][0]
    assert not np.isfinite(bad.rel_err)


# ---------------------------------------------------------------------------
# fedsub specifics


def test_fedsub_full_rank_rotation_lossless(rng):
    d, m = 8, 2
    P_old = generate_projector(d, d, seed=1, round=0)
    P_new = generate_projector(d, d, seed=1, round=5)
    ctl = ControlState(server_c=rng.standard_normal((d, m)),
                       client_c=rng.standard_normal((3, d, m)), basis_round=0)
    rotated = rotate_fedsub_controls(ctl, P_old, P_new)
    assert np.linalg.norm(rotated.server_c) == pytest.approx(
        np.linalg.norm(ctl.server_c), rel=1e-12)
    # the rotation is orthogonal at r = d, so lifting back recovers the control
    back = P_new.P.T @ rotated.server_c
    assert np.allclose(back, P_old.P.T @ ctl.server_c, atol=1e-10)


def test_fedsub_rotation_loses_norm_when_r_lt_d(rng):
    d, r, m = 12, 4, 2
    P_old = generate_projector(d, r, seed=2, round=0)
    P_new = generate_projector(d, r, seed=2, round=5)
    ctl = ControlState(server_c=rng.standard_normal((r, m)),
                       client_c=rng.standard_normal((2, r, m)), basis_round=0)
    rotated = rotate_fedsub_controls(ctl, P_old, P_new)
    assert np.linalg.norm(rotated.server_c) < np.linalg.norm(ctl.server_c)
    assert np.linalg.norm(rotated.client_c) < np.linalg.norm(ctl.client_c)


def test_fedsub_matches_ssf_between_refreshes():
    # with zero initial controls and a fixed projector, fedsub and ssf are the
    # same algorithm until the first refresh
    pcfg, fed, x_star = _problem(N=5, d=12, m=3)
    Q = 6
    kw = dict(local_lr=0.03, local_steps=3, clients_per_round=3, batch_size=5,
              seed=41, projector_refresh_every=Q, r=4)
    out_sub = _run("fedsub", pcfg, fed, x_star, Q - 1, **kw)
    out_ssf = _run("ssf", pcfg, fed, x_star, Q - 1, **kw)
    for a, b in zip(out_sub, out_ssf):
        assert np.linalg.norm(a.new_model.X - b.new_model.X) <= 1e-11 * (
            1 + np.linalg.norm(b.new_model.X))


def test_fedsub_rotates_on_refresh():
    pcfg, fed, x_star = _problem(N=5, d=12, m=3)
    ocfg = OptimizerConfig(algorithm="fedsub", local_lr=0.03, local_steps=3,
                           clients_per_round=3, r=4, rounds=0, batch_size=5,
                           seed=43, projector_refresh_every=3)
    model = ModelState(X=np.zeros((12, 3)))
    controls = init_controls(ocfg, 5, 12, 3)
    norms = []
    for t in range(7):
        pre_norm = np.linalg.norm(controls.client_c)
        out = run_round_fedsub(model, controls, fed, ocfg, t, lam=pcfg.ridge,
                               x_star=x_star)
        model, controls = out.new_model, out.new_controls
        norms.append((t, pre_norm, controls.basis_round))
    # basis follows the anchor schedule
    assert [b for _, _, b in norms] == [0, 0, 0, 3, 3, 3, 6]
