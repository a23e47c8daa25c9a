import numpy as np
import pytest

from fdrelay import covariance as cv
from fdrelay.linalg import crandn
from fdrelay.system import default_config, desk_config, draw_channels, make_rng

# (criterion number, "PASS"/"FAIL", detail) lines collected by test_acceptance.py
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, status, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")


@pytest.fixture
def report():
    def add(num, ok, detail):
        CRITERIA.append((num, "PASS" if ok else "FAIL", detail))
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
    return add


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def desk():
    return desk_config()


@pytest.fixture
def channels(cfg):
    return draw_channels(cfg, 7)


@pytest.fixture
def desk_channels(desk):
    return draw_channels(desk, 0)


def random_design(cfg, ch, rng, fill=0.8):
    """Random power-feasible ``(F, G, C)`` with a stable relay loop."""
    F = crandn(rng, cfg.N_s, cfg.d)
    F *= np.sqrt(fill * cfg.P_s_max / (1.0 + cfg.kappa_s)) / np.linalg.norm(F)
    G = crandn(rng, cfg.N_r, cfg.M_r) * 10.0
    C = crandn(rng, cfg.M_d, cfg.d) * 10.0
    return cv.scale_relay_to_feasible(cfg, ch, cv.DesignVariables(F, G, C))


def fixed_point_mout(cfg, ch, F, G, tol=1e-13, max_iter=100_000):
    """Oracle: iterate ``M <- G M1(F, M) G^H`` from zero."""
    M = np.zeros((cfg.N_r, cfg.N_r), dtype=complex)
    for _ in range(max_iter):
        M_new = G @ cv.m1(cfg, ch, F, M) @ G.conj().T
        if np.linalg.norm(M_new - M) <= tol * (1 + np.linalg.norm(M_new)):
            return M_new
        M = M_new
    raise AssertionError("fixed-point iteration did not converge")


def random_ball_qp(rng, n=30, m=40, n_groups=3):
    """Random least-squares program over disjoint ball constraints.

    The unconstrained minimizer lies far from the origin, so most balls are
    active and the rest are not.
    """
    from fdrelay.qcqp import Ball, QuadraticProgram

    A = rng.standard_normal((m, n))
    x_free = 3.0 * rng.standard_normal(n)
    b = A @ x_free + 0.1 * rng.standard_normal(m)
    groups = np.array_split(rng.permutation(n)[: n - n // 5], n_groups)
    balls = [Ball(np.sort(g), float(0.3 + 3.0 * rng.uniform()) * np.sqrt(len(g))) for g in groups]
    return QuadraticProgram(A, b, constraints=balls)


def pg_oracle(qps, n_iter=1_000_000, step_scale=0.5, tol=1e-15):
    """Plain projected gradient with a fixed short step, batched over programs.

    Programs must share ``n`` and the number of balls. The step is
    ``step_scale / L`` per program. Iteration stops early once no iterate
    moves by more than ``tol`` relative.
    """
    K, n = len(qps), qps[0].n
    n_balls = len(qps[0].constraints)
    AtA = np.stack([q.A.T @ q.A for q in qps])
    Atb = np.stack([q.A.T @ q.b for q in qps])
    step = (step_scale / (2.0 * np.linalg.eigvalsh(AtA)[:, -1]))[:, None]
    member = np.zeros((K, n_balls, n))
    radius = np.zeros((K, n_balls))
    for k, q in enumerate(qps):
        for g, ball in enumerate(q.constraints):
            member[k, g, ball.indices] = 1.0
            radius[k, g] = ball.radius
    free = 1.0 - member.sum(axis=1)
    x = np.zeros((K, n))
    for it in range(n_iter):
        y = x - step * 2.0 * (np.einsum("kij,kj->ki", AtA, x) - Atb)
        norms = np.sqrt(np.einsum("kgi,ki->kg", member, y * y))
        shrink = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
        y = y * (free + np.einsum("kgi,kg->ki", member, shrink))
        moved = np.max(np.abs(y - x)) / (1.0 + np.max(np.abs(y)))
        x = y
        if moved < tol:
            break
    return x
