import numpy as np
import pytest

from fdrelay import baselines as bl
from fdrelay import covariance as cv
from fdrelay import pdd
from fdrelay.system import desk_config, draw_channels, make_rng

from conftest import random_design
from sweeps import by_method, sweep_records


@pytest.fixture(scope="module")
def unaware_run():
    cfg = desk_config()
    ch = draw_channels(cfg, 5)
    return cfg, ch, bl.design_unaware(cfg, ch)


class TestUnaware:
    def test_matches_aware_without_impairments(self, desk):
        cfg = desk.with_kappa(0.0)
        ch = draw_channels(cfg, 2).without_csi_error()
        aware, _ = pdd.run_algorithm1(cfg, ch)
        unaware = bl.design_unaware(cfg, ch)
        a, u = cv.mse(cfg, ch, aware), cv.mse(cfg, ch, unaware)
        assert u == pytest.approx(a, rel=1e-4)

    def test_feasible_under_true_model(self, unaware_run):
        cfg, ch, d = unaware_run
        assert cv.relay_power(cfg, ch, d.F, d.G) <= cfg.P_r_max * (1 + 1e-9)
        assert (1 + cfg.kappa_s) * np.linalg.norm(d.F) ** 2 <= cfg.P_s_max * (1 + 1e-9)

    def test_returns_trace(self, desk, desk_channels):
        d, trace = bl.design_unaware(desk, desk_channels, return_trace=True)
        assert trace.outer_iters >= 1 and d.F.shape == (desk.N_s, desk.d)


class TestDynamicRange:
    def test_grade_table(self, desk):
        s = desk.sigma2_nr
        assert bl.dr_parameters(desk, "high") == pytest.approx((1e2 * s, 0.1 * s))
        assert bl.dr_parameters(desk, "Med") == pytest.approx((1e4 * s, s))
        assert bl.dr_parameters(desk, "low") == pytest.approx((1e6 * s, 10 * s))

    def test_unknown_grade(self, desk):
        with pytest.raises(ValueError):
            bl.dr_parameters(desk, "extreme")

    @pytest.mark.parametrize("grade", ["high", "med"])
    def test_si_cap_and_power(self, desk, desk_channels, grade):
        d = bl.design_dr(desk, desk_channels, grade)
        P_th, _ = bl.dr_parameters(desk, grade)
        M = cv.solve_mout(desk, desk_channels, d.F, d.G)
        assert pdd.received_si_power(desk_channels, M) <= P_th * (1 + 1e-8)
        assert cv.is_power_feasible(desk, desk_channels, d)

    @pytest.mark.slow
    def test_high_grade_close_to_aware(self, tmp_path_factory):
        """Median DR-high + RxOpt MSE within 20% of the aware design at -40 dB (50 trials)."""
        out = tmp_path_factory.mktemp("dr_high")
        recs = sweep_records(out, "kappa", [-40.0], ["aware", "dr_high", "dr_high_rxopt"], 50)
        m = by_method(recs)
        aware = np.median([r.mse for r in m["aware"].values()])
        dr = np.median([r.mse for r in m["dr_high_rxopt"].values()])
        print(f"median aware {aware:.4f}, DR-high+RxOpt {dr:.4f}, ratio {dr / aware:.3f}")
        assert dr <= 1.2 * aware


class TestRxOpt:
    def test_never_worse_random(self, cfg, channels):
        rng = make_rng(9)
        for _ in range(50):
            d = random_design(cfg, channels, rng)
            assert cv.mse(cfg, channels, bl.apply_rxopt(cfg, channels, d)) <= cv.mse(cfg, channels, d) + 1e-10

    def test_never_worse_on_baseline(self, unaware_run):
        cfg, ch, d = unaware_run
        assert cv.mse(cfg, ch, bl.apply_rxopt(cfg, ch, d)) <= cv.mse(cfg, ch, d) + 1e-10

    def test_idempotent(self, unaware_run):
        cfg, ch, d = unaware_run
        once = bl.apply_rxopt(cfg, ch, d)
        twice = bl.apply_rxopt(cfg, ch, once)
        assert np.allclose(twice.C, once.C, rtol=1e-12, atol=1e-15)
        assert np.array_equal(once.F, d.F) and np.array_equal(once.G, d.G)

    @pytest.mark.slow
    def test_gain_on_unaware_designs(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("rxopt_gain")
        recs = sweep_records(out, "kappa", [-25.0], ["unaware", "unaware_rxopt"], 50)
        m = by_method(recs)
        gain = [m["unaware"][t].mse - m["unaware_rxopt"][t].mse for t in m["unaware"]]
        assert np.median(gain) > 0
        assert min(gain) >= -1e-10


class TestHalfDuplex:
    def test_independent_of_si_strength(self, desk):
        scores = []
        for rho_db in (-20.0, 0.0, 20.0):
            cfg = desk.replace(rho_rr=10 ** (rho_db / 10))
            ch = draw_channels(cfg, 4)
            _, score = bl.design_hd(cfg, ch)
            scores.append(score)
        assert np.allclose(scores, scores[0], rtol=1e-10, atol=0)

    def test_accounting(self, desk, desk_channels):
        d, eq = bl.design_hd(desk, desk_channels)
        raw = bl.hd_mse(desk, desk_channels, d, "raw")
        E = cv.mse_matrix(desk, desk_channels.without_si(), d.F, d.G, d.C)
        assert raw == pytest.approx(np.trace(E).real, rel=1e-12)
        assert eq == pytest.approx(np.sum(np.sqrt(np.linalg.eigvalsh(E))), rel=1e-12)
        # for a single stream with error below one, the rate-equivalent score is larger
        assert eq >= raw
        with pytest.raises(ValueError):
            bl.hd_mse(desk, desk_channels, d, "halved")

    def test_rate_is_halved(self, desk, desk_channels):
        d, _ = bl.design_hd(desk, desk_channels)
        full = cv.achievable_rate(desk, desk_channels.without_si(), d.F, d.G)
        assert bl.hd_rate(desk, desk_channels, d) == pytest.approx(full / 2)

    def test_design_keeps_distortion(self, desk, desk_channels):
        d, _ = bl.design_hd(desk, desk_channels)
        ideal = desk.with_kappa(0.0)
        ch = desk_channels.without_si()
        assert cv.mse(ideal, ch, d) < cv.mse(desk, ch, d)
        assert cv.is_power_feasible(desk, ch, d)
