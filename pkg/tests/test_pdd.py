import numpy as np
import pytest
from scipy.optimize import minimize, nnls

from fdrelay import covariance as cv
from fdrelay import pdd
from fdrelay.linalg import crandn, herm
from fdrelay.system import SystemConfig, default_config, desk_config, draw_channels, make_rng


def _perturbed(blocks, rng, scale=0.05):
    vals = {k: v + scale * crandn(rng, *v.shape) for k, v in blocks.values.items()}
    return blocks.with_values(vals)


def _random_duals(duals, rng, scale=0.1):
    return pdd.DualState({g: scale * crandn(rng, *v.shape) for g, v in duals.lam.items()}, duals.rho)


def _independent_residuals(problem, v):
    """Residual groups written out from their definitions.

    Requires ``F~ = F`` and ``J~ = J`` so that the covariance terms can be
    taken from the covariance engine with ``Q = F F^H``, ``M_out = J J^H``.
    """
    cfg, ch = problem.ucfg[0], problem.susers[0]
    F, J = v["F"], v["J"]
    r = {name: v[name] - v["t" + name] for name in problem.tilde_pairs()}
    X = J @ herm(J)
    r["M1"] = cv.m1(cfg, ch, F, X) - v["L1"] @ herm(v["tL1"])
    r["M2_0"] = cv.m2(cfg, ch, F, X) - v["L20"] @ herm(v["tL20"])
    C, L6 = v["C0"], v["L60"]
    M3 = np.eye(cfg.d) - herm(C) @ L6 - herm(L6) @ C + v["L30"] @ herm(v["tL30"])
    r["M3_0"] = M3 - v["L40"] @ herm(v["tL40"])
    r["CL_0"] = herm(C) @ v["L20"] - v["L30"]
    r["JGL"] = J - v["G"] @ v["L1"]
    r["L5"] = v["L5"] - ch.H_est["sr"] @ F
    r["L6_0"] = L6 - ch.H_est["rd"] @ v["G"] @ v["L5"]
    return r


@pytest.fixture(scope="module")
def desk_run():
    cfg = desk_config()
    ch = draw_channels(cfg, 0)
    design, trace = pdd.run_algorithm1(cfg, ch)
    return cfg, ch, design, trace


@pytest.fixture
def start(desk, desk_channels):
    return pdd.init_blocks(desk, desk_channels)


class TestInit:
    def test_consistent_on_many_draws(self, cfg):
        for seed in range(50):
            ch = draw_channels(cfg, seed)
            blocks, duals = pdd.init_blocks(cfg, ch)
            assert pdd.violation(blocks) < 1e-10
            assert all(not lam.any() for lam in duals.lam.values())

    def test_source_power_exact(self, cfg, channels):
        blocks, _ = pdd.init_blocks(cfg, channels)
        F = blocks.design().F
        assert np.linalg.norm(F) ** 2 == pytest.approx(cfg.P_s_max / (1 + cfg.kappa_s), rel=1e-12)

    def test_objective_is_mse(self, cfg, channels):
        blocks, _ = pdd.init_blocks(cfg, channels)
        mse = cv.mse(cfg, channels, blocks.design())
        assert abs(pdd.objective(blocks) - mse) <= 1e-8 * (1 + mse)

    def test_feasible_and_stable(self, cfg, channels):
        blocks, _ = pdd.init_blocks(cfg, channels)
        d = blocks.design()
        assert cv.relay_power(cfg, channels, d.F, d.G) <= cfg.P_r_max * (1 + 1e-9)
        assert cv.relay_transfer(cfg, channels, d.G).loop_condition < np.inf

    def test_receiver_is_mmse(self, cfg, channels):
        blocks, _ = pdd.init_blocks(cfg, channels)
        d = blocks.design()
        assert np.allclose(d.C, cv.mmse_receiver(cfg, channels, d.F, d.G), rtol=1e-10)


class TestAugmentedLagrangian:
    def test_consistent_point(self, start):
        blocks, duals = start
        assert pdd.augmented_lagrangian(blocks, duals) == pytest.approx(pdd.objective(blocks), rel=1e-12)

    def test_large_rho_limit(self, start, rng):
        blocks, duals = start
        b = _perturbed(blocks, rng)
        obj = pdd.objective(b)
        gaps = [pdd.augmented_lagrangian(b, duals, rho) - obj for rho in (1e2, 1e4, 1e6)]
        assert gaps[0] > gaps[1] > gaps[2] > 0
        assert gaps[2] < 1e-5 * (1 + obj)

    def test_term_by_term(self, start, rng):
        blocks, duals = start
        b = _perturbed(blocks, rng)
        b = b.with_values({"tF": b.values["F"], "tJ": b.values["J"]})
        lam = _random_duals(duals, rng)
        res = _independent_residuals(b.problem, b.values)
        rho = lam.rho
        expected = np.sum(np.abs(b.values["L40"]) ** 2) + sum(
            np.sum(np.abs(res[g] + rho * lam.lam[g]) ** 2) for g in res) / (2 * rho)
        assert pdd.augmented_lagrangian(b, lam) == pytest.approx(expected, rel=1e-12)
        assert set(res) == set(b.problem.residuals(b.values))

    def test_completed_square_nonnegative(self, start, rng):
        blocks, duals = start
        for _ in range(10):
            b = _perturbed(blocks, rng, scale=0.3)
            lam = _random_duals(duals, rng, scale=1.0)
            shift = sum(lam.rho * np.sum(np.abs(x) ** 2) for x in lam.lam.values()) / 2
            assert pdd.augmented_lagrangian(b, lam) + shift >= 0


class TestViolation:
    def test_thirteen_groups(self, start):
        blocks, _ = start
        assert len(blocks.problem.residuals(blocks.values)) == 13

    def test_tilde_term_in_isolation(self, start, rng):
        blocks, _ = start
        delta = 0.01 * crandn(rng, *blocks.values["F"].shape)
        b = blocks.with_values({"F": blocks.values["F"] + delta})
        res = b.problem.residuals(b.values)
        assert np.sum(np.abs(res["F"]) ** 2) == pytest.approx(np.sum(np.abs(delta) ** 2), rel=1e-12)
        # F also enters the covariance groups and L5
        assert pdd.violation(b) > np.sum(np.abs(delta) ** 2)

    def test_converged_run(self, desk_run):
        _, _, _, trace = desk_run
        assert trace.converged and trace.final_zeta < 1e-5


class TestBlockUpdates:
    def test_b1_descent_and_feasibility(self, start, rng):
        blocks, duals = start
        b = _perturbed(blocks, rng)
        lam = _random_duals(duals, rng)
        cfg = blocks.problem.cfg
        for _ in range(5):
            before = pdd.augmented_lagrangian(b, lam)
            b = pdd.update_block_B1(b, lam)
            assert pdd.augmented_lagrangian(b, lam) <= before + 1e-10
            assert np.linalg.norm(b.values["F"]) <= np.sqrt(cfg.P_s_max / (1 + cfg.kappa_s)) * (1 + 1e-9)
            assert np.linalg.norm(b.values["J"]) <= np.sqrt(cfg.P_r_max / (1 + cfg.kappa_r)) * (1 + 1e-9)
            b = pdd.update_block_B2(b, lam)

    def test_b2_descent(self, start, rng):
        blocks, duals = start
        b = _perturbed(blocks, rng)
        lam = _random_duals(duals, rng)
        before = pdd.augmented_lagrangian(b, lam)
        assert pdd.augmented_lagrangian(pdd.update_block_B2(b, lam), lam) <= before + 1e-10

    def test_b2_gradient_vanishes(self, start, rng):
        blocks, duals = start
        lam = _random_duals(duals, rng)
        b = pdd.update_block_B2(_perturbed(blocks, rng), lam)
        h = 1e-6
        for name in b.problem.block2:
            for part in (1.0, 1j):
                E = np.zeros_like(b.values[name])
                E.flat[0] = part * h
                fp = pdd.augmented_lagrangian(b.with_values({name: b.values[name] + E}), lam)
                fm = pdd.augmented_lagrangian(b.with_values({name: b.values[name] - E}), lam)
                assert abs(fp - fm) / (2 * h) <= 1e-7 * (1 + abs(fp)), name

    def test_b2_update_idempotent(self, start, rng):
        blocks, duals = start
        lam = _random_duals(duals, rng)
        once = pdd.update_block_B2(_perturbed(blocks, rng), lam)
        twice = pdd.update_block_B2(once, lam)
        for name in once.problem.block2:
            assert np.allclose(twice.values[name], once.values[name], rtol=1e-9, atol=1e-9)

    def test_scalar_b1_against_generic_solver(self):
        cfg = SystemConfig(N_s=1, N_r=1, M_r=1, M_d=1, d=1)
        ch = draw_channels(cfg, 3)
        blocks, duals = pdd.init_blocks(cfg, ch)
        rng = make_rng(4)
        b = _perturbed(blocks, rng, scale=0.2)
        lam = _random_duals(duals, rng)
        names = b.problem.block1
        upd = pdd.update_block_B1(b, lam)

        def al(x):
            vals = {k: np.array([[x[2 * i] + 1j * x[2 * i + 1]]]) for i, k in enumerate(names)}
            return pdd.augmented_lagrangian(b.with_values(vals), lam)

        x0 = np.concatenate([[b.values[k][0, 0].real, b.values[k][0, 0].imag] for k in names])
        iF, iJ = 2 * names.index("F"), 2 * names.index("J")
        cons = [{"type": "ineq", "fun": lambda x, i=i, r=r: r - x[i] ** 2 - x[i + 1] ** 2}
                for i, r in ((iF, cfg.P_s_max / (1 + cfg.kappa_s)), (iJ, cfg.P_r_max / (1 + cfg.kappa_r)))]
        ref = minimize(al, x0, method="SLSQP", constraints=cons,
                       options={"ftol": 1e-15, "maxiter": 2000})
        got = pdd.augmented_lagrangian(upd, lam)
        assert got <= ref.fun + 1e-9 * (1 + abs(ref.fun))
        assert got == pytest.approx(ref.fun, rel=1e-6)


class TestOuterUpdate:
    def test_penalty_step(self, start, rng):
        blocks, duals = start
        lam = _random_duals(duals, rng)
        cfg = pdd.PddConfig(c_rho=0.5)
        new = pdd.outer_update(blocks, lam, cfg, zeta_now=1.0, zeta_prev=1.0)
        assert new.rho == pytest.approx(0.5 * lam.rho)
        assert all(np.array_equal(new.lam[g], lam.lam[g]) for g in lam.lam)

    def test_dual_step_zero_residual(self, start, rng):
        blocks, duals = start
        lam = _random_duals(duals, rng)
        new = pdd.outer_update(blocks, lam, pdd.PddConfig(), zeta_now=0.0, zeta_prev=1.0)
        assert new.rho == lam.rho
        for g in lam.lam:
            assert np.allclose(new.lam[g], lam.lam[g], atol=1e-9 * (1 + np.abs(lam.lam[g]).max()))

    def test_dual_step_definition(self, start, rng):
        blocks, duals = start
        b = _perturbed(blocks, rng, scale=1e-4)
        lam = _random_duals(duals, rng)
        zeta = pdd.violation(b)
        new = pdd.outer_update(b, lam, pdd.PddConfig(), zeta_now=zeta, zeta_prev=10 * zeta)
        res = b.problem.residuals(b.values)
        for g in lam.lam:
            assert np.allclose(new.lam[g], lam.lam[g] + res[g] / lam.rho, rtol=1e-14, atol=1e-14)

    def test_first_iteration_threshold(self, start):
        blocks, duals = start
        cfg = pdd.PddConfig()
        assert pdd.outer_update(blocks, duals, cfg, zeta_now=cfg.zeta_th).rho < duals.rho

    def test_config_validation(self):
        with pytest.raises(ValueError):
            pdd.PddConfig(c_rho=1.0)
        with pytest.raises(ValueError):
            pdd.PddConfig(zeta_th=0.0)


class TestAlgorithm1:
    def test_converges(self, desk_run):
        _, _, _, trace = desk_run
        assert trace.converged and trace.outer_iters <= 30

    def test_inner_al_monotone(self, desk_run):
        _, _, _, trace = desk_run
        for als in trace.inner_al:
            assert np.all(np.diff(als) <= 1e-10)

    def test_not_worse_than_init(self, desk, desk_run):
        cfg, ch, design, _ = desk_run
        blocks, _ = pdd.init_blocks(cfg, ch)
        assert cv.mse(cfg, ch, design) <= cv.mse(cfg, ch, blocks.design()) + 1e-12

    def test_design_feasible(self, desk_run):
        cfg, ch, design, _ = desk_run
        assert cv.is_power_feasible(cfg, ch, design)

    def test_rho_nonincreasing(self, desk_run):
        _, _, _, trace = desk_run
        assert np.all(np.diff(trace.column("rho")) <= 0)

    def test_zeta_tail_nonincreasing(self, desk_run):
        _, _, _, trace = desk_run
        z = trace.column("zeta")[-3:]
        assert np.all(np.diff(z) <= 0)

    def test_endpoint_consistency(self, desk_run):
        _, _, _, trace = desk_run
        last = trace.last_iterate
        mse = pdd.true_mse(last)
        zeta_th = pdd.PddConfig().zeta_th
        assert abs(pdd.objective(last) - mse) <= 10 * np.sqrt(zeta_th) * (1 + mse)

    def test_first_al_below_final_mse(self, desk_run):
        cfg, ch, design, trace = desk_run
        assert trace.inner_al[0][-1] <= cv.mse(cfg, ch, design)

    def test_trace_csv(self, desk_run, tmp_path):
        _, _, _, trace = desk_run
        trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == ",".join(pdd.TRACE_COLUMNS)
        assert len(lines) == trace.outer_iters + 1


def _pack(d):
    return np.concatenate([np.concatenate([x.ravel().real, x.ravel().imag]) for x in (d.F, d.G, d.C)])


def _unpack(x, like):
    out, o = [], 0
    for a in (like.F, like.G, like.C):
        n = a.size
        out.append((x[o:o + n] + 1j * x[o + n:o + 2 * n]).reshape(a.shape))
        o += 2 * n
    return cv.DesignVariables(*out)


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def kkt_residual(cfg, ch, design, active_tol=1e-2):
    """Norm of the MSE gradient left after the best nonnegative combination of
    the gradients of (nearly) active power constraints, and the raw gradient norm."""
    x = _pack(design)
    g = _fd_grad(lambda z: cv.mse(cfg, ch, _unpack(z, design)), x)
    p_s = lambda z: (1 + cfg.kappa_s) * np.linalg.norm(_unpack(z, design).F) ** 2
    p_r = lambda z: cv.relay_power(cfg, ch, _unpack(z, design).F, _unpack(z, design).G)
    normals = [_fd_grad(p, x) for p, cap in ((p_s, cfg.P_s_max), (p_r, cfg.P_r_max))
               if p(x) >= (1 - active_tol) * cap]
    if not normals:
        return np.linalg.norm(g), np.linalg.norm(g)
    _, res = nnls(np.array(normals).T, -g)
    return res, np.linalg.norm(g)


class TestStationarity:
    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [0, 1])
    def test_default_config(self, seed):
        cfg = default_config()
        ch = draw_channels(cfg, seed)
        blocks, _ = pdd.init_blocks(cfg, ch)
        _, g0 = kkt_residual(cfg, ch, blocks.design())
        design, _ = pdd.run_algorithm1(cfg, ch)
        res, _ = kkt_residual(cfg, ch, design)
        assert res <= 1e-2 * (1 + g0)


@pytest.fixture(scope="module")
def rate_run():
    cfg = desk_config()
    ch = draw_channels(cfg, 0)
    design, trace = pdd.run_rate_maximization(cfg, ch)
    return cfg, ch, design, trace


class TestRateMaximization:
    def test_rate_identity(self, rate_run):
        cfg, ch, design, _ = rate_run
        E = cv.mse_matrix(cfg, ch, design.F, design.G, cv.mmse_receiver(cfg, ch, design.F, design.G))
        rate = cv.achievable_rate(cfg, ch, design.F, design.G)
        assert rate == pytest.approx(-cfg.W * np.log2(np.linalg.det(E).real), rel=1e-6)

    def test_weight_is_inverse_mse(self, rate_run):
        cfg, ch, design, trace = rate_run
        E = cv.mse_matrix(cfg, ch, design.F, design.G, design.C)
        S = trace.weights[0] @ trace.weights[0]
        assert np.linalg.norm(S - np.linalg.inv(E)) <= 1e-6 * np.linalg.norm(S)

    def test_not_worse_than_init(self, rate_run):
        cfg, ch, design, _ = rate_run
        blocks, _ = pdd.init_blocks(cfg, ch, rate=True)
        d0 = blocks.design()
        assert cv.achievable_rate(cfg, ch, design.F, design.G) >= cv.achievable_rate(cfg, ch, d0.F, d0.G) - 1e-12

    def test_converged(self, rate_run):
        assert rate_run[3].converged


class TestMultiuser:
    def test_single_user_reduction(self, desk_run):
        cfg, ch, design, trace = desk_run
        F, G, Cs, tr = pdd.run_multiuser(cfg, [ch])
        assert np.linalg.norm(F - design.F) <= 1e-9 * np.linalg.norm(design.F)
        assert np.linalg.norm(G - design.G) <= 1e-9 * np.linalg.norm(design.G)
        for col in ("zeta", "al_value", "mse"):
            a, b = tr.column(col), trace.column(col)
            assert a.shape == b.shape and np.allclose(a, b, rtol=1e-9, atol=1e-15)

    def test_two_users(self, desk):
        a, b = draw_channels(desk, 21), draw_channels(desk, 22)
        users = [a, a.copy()]
        users[1].H_est["sd"], users[1].H_est["rd"] = b.H_est["sd"], b.H_est["rd"]
        users[1].H_true["sd"], users[1].H_true["rd"] = b.H_true["sd"], b.H_true["rd"]
        users[1].C_rx["sd"], users[1].C_rx["rd"] = b.C_rx["sd"], b.C_rx["rd"]
        F, G, Cs, trace = pdd.run_multiuser(desk, users)
        assert trace.converged and trace.final_zeta < 1e-5
        blocks, _ = pdd.init_blocks(desk, users)
        d0 = blocks.design()
        init = sum(cv.mse(desk, u, cv.DesignVariables(d0.F, d0.G, C))
                   for u, C in zip(users, blocks.receivers()))
        final = sum(cv.mse(desk, u, cv.DesignVariables(F, G, C)) for u, C in zip(users, Cs))
        assert final <= init + 1e-12


def _rx_chain_diag(cfg, ch, F, J):
    """Relay receive covariance diagonal, assembled from the per-chain display."""
    Hsr, Hrr = ch.H_est["sr"], ch.H_est["rr"]
    Q = F @ herm(F)
    X = J @ herm(J)
    sig = (Hsr @ (Q + cfg.kappa_s * np.diag(np.diag(Q))) @ herm(Hsr)
           + ch.C_rx["sr"] * np.trace(ch.C_tx["sr"] @ (Q + cfg.kappa_s * np.diag(np.diag(Q))))
           + Hrr @ (X + cfg.kappa_r * np.diag(np.diag(X))) @ herm(Hrr)
           + ch.C_rx["rr"] * np.trace(ch.C_tx["rr"] @ (X + cfg.kappa_r * np.diag(np.diag(X)))))
    return np.real(np.diag(sig)) + cfg.sigma2_nr


class TestSaturation:
    def test_loose_budgets_match(self, desk_run):
        cfg, ch, design, trace = desk_run
        d, tr = pdd.run_with_saturation(cfg, ch, papr=pdd.Papr(1e9, 1e9))
        assert np.allclose(tr.column("zeta"), trace.column("zeta"), rtol=1e-6, atol=1e-12)
        assert np.linalg.norm(d.G - design.G) <= 1e-6 * np.linalg.norm(design.G)

    def test_tight_budgets_feasible(self, desk, desk_channels):
        papr = pdd.Papr(P_I_tx=0.5, P_I_rx=1.0)
        d, trace = pdd.run_with_saturation(desk, desk_channels, papr=papr)
        M = cv.solve_mout(desk, desk_channels, d.F, d.G)
        # at the consistent endpoint J J^H = M_out, so row powers are its diagonal
        assert np.all(np.real(np.diag(M)) <= papr.tx_row_bound(desk) + 1e-8)
        J = np.linalg.cholesky(M + 1e-300 * np.eye(M.shape[0]))
        rx = _rx_chain_diag(desk, desk_channels, d.F, J)
        assert np.all(rx <= papr.rx_chain_bound(desk) + 1e-8)

    def test_requires_budgets(self, desk, desk_channels):
        with pytest.raises(ValueError):
            pdd.run_with_saturation(desk, desk_channels)
        with pytest.raises(ValueError):
            pdd.Papr(P_I_tx=0.0, P_I_rx=1.0)


class TestSiCap:
    def test_cap_holds(self, desk, desk_channels):
        P_th = 0.01
        d, _ = pdd.run_with_si_cap(desk, desk_channels, P_th)
        M = cv.solve_mout(desk, desk_channels, d.F, d.G)
        assert pdd.received_si_power(desk_channels, M) <= P_th * (1 + 1e-8)
        assert cv.is_power_feasible(desk, desk_channels, d)
