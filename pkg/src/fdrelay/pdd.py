"""Penalty dual decomposition (PDD) for impairment-aware relay design.

The MSE problem is rewritten with auxiliary matrices so that every equality
constraint is affine in each of two variable blocks::

    B1 = {F, G, C, J, L1~, L2~, L3~, L4~}
    B2 = {F~, J~, L1, L2, L3, L4, L5, L6}

with ``J = G L1`` (so ``J J~^H`` is the relay covariance), ``L1 L1~^H`` the
relay input covariance, ``L2 L2~^H`` the destination covariance, ``L5`` and
``L6`` the source-relay and end-to-end signal paths and ``L4 L4~^H`` the MSE
matrix. The augmented Lagrangian (AL) is minimized block by block in an
inner loop; an outer loop either shrinks the penalty parameter ``rho`` or
takes a dual step on the multipliers.

Alternating exact block minimization contracts slowly on this problem (the
AL decrease per sweep shrinks by a factor close to one), so by default each
sweep is followed by a safeguarded extrapolation along the last step, which
is kept only if it lowers the AL further.

Because the AL is an exact convex quadratic in each block, a block update is
a :class:`~fdrelay.qcqp.QuadraticProgram` whose matrix is obtained by
evaluating the (real-affine) residual maps at the origin and at the unit
vectors of the block, all in one batched call.

Multi-user designs replicate ``C, L2, L3, L4, L6`` and their constraints per
user; single-user runs are the one-user case of the same engine.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import covariance as cv
from . import qcqp
from .errors import DomainError, NoConvergence, RelayLoopUnstable, NotPSDError
from .linalg import chol_factor, diag_part, herm, trace
from .system import ChannelSet

log = logging.getLogger(__name__)

# relative jitter of the Cholesky factors built at consistent points
CHOL_JITTER = 1e-12
# regularization of the closed-form weight update S = (L4 L4^H)^{-1}
S_REG = 1e-12
# halvings of the initial relay gain before giving up
INIT_HALVINGS = 10
# restart after STALL_STEPS consecutive penalty steps that each cut zeta by less than 5 %
STALL_RATIO = 0.95
STALL_STEPS = 2
TRACE_COLUMNS = ("outer_iter", "inner_iters", "zeta", "al_value", "mse", "rho")

SHARED_TILDE = ("F", "J", "L1")
USER_TILDE = ("L2", "L3", "L4")


@dataclass
class PddConfig:
    """Penalty/dual schedule and stopping rules.

    The switch threshold between a penalty step and a dual step at outer
    iteration ``k`` is ``max(zeta0_factor * zeta_{k-1}, zeta_th)``.

    With ``rho0_relative`` (default) the initial penalty parameter is
    ``rho0`` times the smallest eigenvalue of the initial MSE matrix (its
    square for the rate objective, whose weight scales by up to ``1/E``), so
    the schedule does not depend on the noise and power units.

    A weak initial penalty lets the first inner loops move far from the
    starting point, which ends at better designs than a strong one, but a
    penalty weight ``1/(2 rho)`` below ``1/(2 E)`` also admits the collapsed
    point ``L4 = L4~ = 0``, from which the block updates cannot escape. The
    outer loop detects the resulting stall and restarts from the consistent
    point of the current design (see :attr:`ConvergenceTrace.restarts`).

    ``extrapolate`` turns on the safeguarded extrapolation after each inner
    sweep; its step factor starts at ``beta0``, grows by half after every
    accepted step up to ``beta_max`` and halves after a rejected one.
    """

    rho0: float = 10.0
    rho0_relative: bool = True
    c_rho: float = 0.6
    zeta0_factor: float = 0.9
    zeta_th: float = 1e-5
    eps_inner: float = 1e-6
    max_outer: int = 60
    max_inner: int = 50
    qp_tol: float = 1e-8
    qp_max_iter: int = 5000
    extrapolate: bool = True
    beta0: float = 0.5
    beta_max: float = 10.0

    def __post_init__(self):
        if not 0 < self.c_rho < 1:
            raise ValueError("c_rho must lie in (0, 1)")
        if not self.zeta_th > 0:
            raise ValueError("zeta_th must be positive")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if not 0 < self.zeta0_factor <= 1:
            raise ValueError("zeta0_factor must lie in (0, 1]")
        if not 0 < self.beta0 <= self.beta_max:
            raise ValueError("need 0 < beta0 <= beta_max")

    def switch_threshold(self, zeta_prev):
        return max(self.zeta0_factor * zeta_prev, self.zeta_th)


@dataclass
class Papr:
    """Instantaneous per-chain power budgets and PAPR factors (linear)."""

    P_I_tx: float
    P_I_rx: float
    omega_tx: float = 1.0
    omega_rx: float = 1.0

    def __post_init__(self):
        for name in ("P_I_tx", "P_I_rx", "omega_tx", "omega_rx"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def tx_row_bound(self, cfg):
        """Bound on ``||row_l(J)||^2`` for every relay transmit chain."""
        return self.P_I_tx / (self.omega_tx * (1.0 + cfg.kappa_r))

    def rx_chain_bound(self, cfg):
        """Bound on each diagonal entry of the relay receive covariance."""
        return self.P_I_rx / (self.omega_rx * (1.0 + cfg.beta_r))


def _rx_chain_cov(cfg, ch, Q, X):
    """Relay receive covariance without the noise floor, linear in ``Q = FF^H``, ``X = JJ^H``."""
    Hsr, Hrr = ch.H_est["sr"], ch.H_est["rr"]
    Qd = Q + cfg.kappa_s * diag_part(Q)
    Xd = X + cfg.kappa_r * diag_part(X)
    return (Hsr @ Qd @ herm(Hsr) + trace(ch.C_tx["sr"] @ Qd)[..., None, None] * ch.C_rx["sr"]
            + Hrr @ Xd @ herm(Hrr) + trace(ch.C_tx["rr"] @ Xd)[..., None, None] * ch.C_rx["rr"])


def relay_rx_chain_power(cfg, ch, F, X):
    """Diagonal of the relay receive covariance entering the per-chain limit.

    ``X`` plays the role of ``J J^H`` (the undistorted relay covariance).
    """
    M = _rx_chain_cov(cfg, ch, F @ herm(F), X)
    return np.real(np.diag(M)) + cfg.sigma2_nr


def received_si_power(ch, M_out):
    """``tr(H_rr M_out H_rr^H)``: SI power at the relay before cancellation."""
    Hrr = ch.H_est["rr"]
    return float(np.real(np.trace(Hrr @ M_out @ herm(Hrr))))


def papr_satisfied(papr, cfg, ch, F, M_out, rtol=0.0):
    """True if a design with relay covariance ``M_out`` meets both per-chain limits."""
    rows = np.real(np.diag(M_out)) <= papr.tx_row_bound(cfg) * (1.0 + rtol)
    rx = relay_rx_chain_power(cfg, ch, F, M_out) <= papr.rx_chain_bound(cfg) * (1.0 + rtol)
    return bool(np.all(rows) and np.all(rx))


class _Problem:
    """Shapes, residual maps and constraints of one PDD instance."""

    def __init__(self, cfg, users, rate=False, papr=None, si_cap=None):
        self.cfg = cfg
        self.users = list(users)
        self.n_users = len(self.users)
        if self.n_users < 1:
            raise ValueError("at least one user is required")
        self.rate = rate
        self.papr = papr
        self.si_cap = si_cap
        c = cfg
        self.shapes = {"F": (c.N_s, c.d), "G": (c.N_r, c.M_r), "J": (c.N_r, c.M_r),
                       "L1": (c.M_r, c.M_r), "L5": (c.M_r, c.d)}
        for u in range(self.n_users):
            self.shapes.update({f"C{u}": (c.M_d, c.d), f"L2{u}": (c.M_d, c.M_d),
                                f"L3{u}": (c.d, c.M_d), f"L4{u}": (c.d, c.d),
                                f"L6{u}": (c.M_d, c.d)})
        for name in self.tilde_pairs():
            self.shapes["t" + name] = self.shapes[name]
        self.block1 = (["F", "G"] + [f"C{u}" for u in range(self.n_users)] + ["J", "tL1"]
                       + [f"t{k}{u}" for k in USER_TILDE for u in range(self.n_users)])
        self.block2 = (["tF", "tJ", "L1"]
                       + [f"{k}{u}" for k in USER_TILDE for u in range(self.n_users)]
                       + ["L5"] + [f"L6{u}" for u in range(self.n_users)])
        self._papr_cache = None
        self._b1_check = None
        self.set_scales(1.0, [1.0] * self.n_users)

    def set_scales(self, a_r, a_d):
        """Work in units where the relay input and destination covariances are O(1).

        The relay input is divided by ``sqrt(a_r)`` and destination ``u``'s
        signal by ``sqrt(a_d[u])``; ``G`` and ``C`` absorb the inverse
        factors, so ``F``, ``J``, the relay covariance and the MSE matrix are
        unchanged while the residual groups become comparable in size.
        """
        self.a_r = float(a_r)
        self.a_d = [float(a) for a in a_d]
        self.ucfg, self.susers = [], []
        for ch, ad in zip(self.users, self.a_d):
            c = self.cfg.replace(sigma2_nr=self.cfg.sigma2_nr / self.a_r,
                                 sigma2_nd=self.cfg.sigma2_nd / ad)
            sc = ch.copy()
            for link, a in (("sr", self.a_r), ("rr", self.a_r), ("rd", ad), ("sd", ad)):
                sc.H_est[link] = ch.H_est[link] / np.sqrt(a)
                sc.H_true[link] = ch.H_true[link] / np.sqrt(a)
                sc.C_rx[link] = ch.C_rx[link] / a
            self.ucfg.append(c)
            self.susers.append(sc)

    def to_scaled(self, G, receivers):
        return G * np.sqrt(self.a_r), [C * np.sqrt(a) for C, a in zip(receivers, self.a_d)]

    def physical(self, values):
        """(F, G, [C_u]) in physical units from (scaled) block values."""
        G = values["G"] / np.sqrt(self.a_r)
        Cs = [values[f"C{u}"] / np.sqrt(a) for u, a in enumerate(self.a_d)]
        return values["F"].copy(), G, Cs

    def tilde_pairs(self):
        return list(SHARED_TILDE) + [f"{k}{u}" for k in USER_TILDE for u in range(self.n_users)]

    def group_names(self):
        names = self.tilde_pairs() + ["M1"]
        names += [f"M2_{u}" for u in range(self.n_users)]
        names += [f"M3_{u}" for u in range(self.n_users)]
        names += [f"CL_{u}" for u in range(self.n_users)]
        names += ["JGL", "L5"]
        names += [f"L6_{u}" for u in range(self.n_users)]
        return names

    def residuals(self, v):
        """All equality-constraint residuals (batched if any input is)."""
        cfg, u0 = self.ucfg[0], self.susers[0]
        r = {}
        for name in self.tilde_pairs():
            r[name] = v[name] - v["t" + name]
        Q = v["F"] @ herm(v["tF"])
        X = v["J"] @ herm(v["tJ"])
        r["M1"] = cv.m1_bilinear(cfg, u0, Q, X) - v["L1"] @ herm(v["tL1"])
        eye = np.eye(cfg.d)
        for u, ch in enumerate(self.susers):
            C, L6 = v[f"C{u}"], v[f"L6{u}"]
            r[f"M2_{u}"] = cv.m2_bilinear(self.ucfg[u], ch, Q, X) - v[f"L2{u}"] @ herm(v[f"tL2{u}"])
            M3 = v[f"L3{u}"] @ herm(v[f"tL3{u}"]) - herm(C) @ L6 - herm(L6) @ C + eye
            r[f"M3_{u}"] = M3 - v[f"L4{u}"] @ herm(v[f"tL4{u}"])
            r[f"CL_{u}"] = herm(C) @ v[f"L2{u}"] - v[f"L3{u}"]
        r["JGL"] = v["J"] - v["G"] @ v["L1"]
        r["L5"] = v["L5"] - u0.H_est["sr"] @ v["F"]
        for u, ch in enumerate(self.susers):
            r[f"L6_{u}"] = v[f"L6{u}"] - ch.H_est["rd"] @ v["G"] @ v["L5"]
        return r

    def objective_terms(self, v, weights=None):
        """Residual-form objective: ``||S^{1/2} L4||^2`` summed over users."""
        out = {}
        for u in range(self.n_users):
            L4 = v[f"L4{u}"]
            if weights is not None:
                L4 = weights[u] @ L4
            out[f"obj_{u}"] = L4
        return out

    def b1_constraints(self, layout):
        cfg = self.cfg
        cons = [qcqp.Ball(layout.indices("F"), np.sqrt(cfg.P_s_max / (1.0 + cfg.kappa_s)), "P_s"),
                qcqp.Ball(layout.indices("J"), np.sqrt(cfg.P_r_max / (1.0 + cfg.kappa_r)), "P_r")]
        if self.si_cap is not None:
            cons.append(self._si_cap_constraint(layout))
        if self.papr is not None:
            rb = np.sqrt(self.papr.tx_row_bound(cfg))
            for l in range(cfg.N_r):
                cons.append(qcqp.Ball(layout.row_indices("J", l), rb, f"row{l}"))
            cons.extend(self._rx_chain_constraints(layout))
        return cons

    def b1_feasible_point(self, values):
        """Pull ``values`` onto the B1 balls radially; ``None`` if still infeasible."""
        if self._b1_check is None:
            layout = qcqp.VariableLayout({k: self.shapes[k] for k in self.block1})
            cons = self.b1_constraints(layout)
            check = qcqp.QuadraticProgram(np.zeros((1, layout.n)), np.zeros(1), constraints=cons)
            self._b1_check = (layout, check)
        layout, check = self._b1_check
        x = layout.pack({k: values[k] for k in self.block1})
        for con in check.constraints:
            if isinstance(con, qcqp.Ball):
                nrm = np.linalg.norm(x[con.indices])
                if nrm > con.radius:
                    x[con.indices] *= con.radius / nrm
        if check.violation(x) > qcqp.FEAS_TOL:
            return None
        out = dict(values)
        out.update(layout.unpack(x))
        return out

    def design_ok(self, cfg, ch, F, G, M_out):
        """Extra design-level constraints (SI cap, per-chain limits) in physical units."""
        if self.si_cap is not None and received_si_power(ch, M_out) > self.si_cap:
            return False
        if self.papr is not None and not papr_satisfied(self.papr, cfg, ch, F, M_out):
            return False
        return True

    @property
    def has_design_constraints(self):
        return self.si_cap is not None or self.papr is not None

    def _si_cap_constraint(self, layout):
        """``||H_rr J||_F^2 <= P_th`` as a real quadratic form over ``J``."""
        Hrr = self.users[0].H_est["rr"]
        A = np.kron(np.eye(self.cfg.M_r), Hrr)
        Q = herm(A) @ A
        n = layout.n_complex
        idx = layout.real_indices("J")
        P = np.zeros((layout.n, layout.n))
        P[np.ix_(idx, idx)] = Q.real
        P[np.ix_(idx + n, idx + n)] = Q.real
        P[np.ix_(idx, idx + n)] = -Q.imag
        P[np.ix_(idx + n, idx)] = Q.imag
        return qcqp.Quadratic(P, self.si_cap, "si_cap")

    def _rx_chain_constraints(self, layout):
        """Per-receive-chain limits as quadratics ``x^T P_l x <= t_l`` over (F, J).

        Each diagonal entry is a PSD quadratic form; its matrix is recovered
        by polarization from evaluations at unit vectors and their pairwise
        sums.
        """
        if self._papr_cache is None:
            cfg, ch = self.cfg, self.users[0]
            sub = qcqp.VariableLayout({"F": self.shapes["F"], "J": self.shapes["J"]})
            n = sub.n
            iu, ju = np.triu_indices(n, 1)
            eye = np.eye(n)
            vals = sub.unpack(np.concatenate([eye, eye[iu] + eye[ju]]))
            F, J = vals["F"], vals["J"]
            M = _rx_chain_cov(cfg, ch, F @ herm(F), J @ herm(J))
            q = np.real(np.diagonal(M, axis1=-2, axis2=-1))
            qi, qij = q[:n], q[n:]
            P = np.zeros((cfg.M_r, n, n))
            for l in range(cfg.M_r):
                P[l][np.arange(n), np.arange(n)] = qi[:, l]
                off = 0.5 * (qij[:, l] - qi[iu, l] - qi[ju, l])
                P[l][iu, ju] = off
                P[l][ju, iu] = off
            bound = self.papr.rx_chain_bound(cfg) - cfg.sigma2_nr
            if not bound > 0:
                raise DomainError("receive per-chain budget is below the relay noise floor")
            self._papr_cache = (P, bound)
        P, bound = self._papr_cache
        re = np.concatenate([layout.real_indices("F"), layout.real_indices("J")])
        full = np.concatenate([re, re + layout.n_complex])
        cons = []
        for l in range(P.shape[0]):
            Pl = np.zeros((layout.n, layout.n))
            Pl[np.ix_(full, full)] = P[l]
            cons.append(qcqp.Quadratic(Pl, bound, f"rx{l}"))
        return cons


@dataclass
class PddBlocks:
    """Current values of both blocks (plus WMMSE weights when present)."""

    problem: _Problem
    values: dict
    weights: list = None
    restarts: int = 0

    @property
    def B1(self):
        return {k: self.values[k] for k in self.problem.block1}

    @property
    def B2(self):
        return {k: self.values[k] for k in self.problem.block2}

    def copy(self):
        w = None if self.weights is None else [x.copy() for x in self.weights]
        return PddBlocks(self.problem, {k: v.copy() for k, v in self.values.items()}, w)

    def with_values(self, new):
        vals = dict(self.values)
        vals.update(new)
        return PddBlocks(self.problem, vals, self.weights)

    def design(self, user=0):
        """``(F, G, C_user)`` in physical units."""
        F, G, Cs = self.problem.physical(self.values)
        return cv.DesignVariables(F, G, Cs[user])

    def receivers(self):
        return self.problem.physical(self.values)[2]


@dataclass
class DualState:
    """Multipliers per constraint group and the penalty parameter ``rho``."""

    lam: dict
    rho: float

    def copy(self):
        return DualState({k: v.copy() for k, v in self.lam.items()}, self.rho)


@dataclass
class ConvergenceTrace:
    """Per-outer-iteration log plus the AL after every inner iteration.

    ``last_iterate`` holds the raw PDD iterate at termination and
    ``final_blocks`` the consistent, power-feasible point built from it (or
    the best earlier consistent point, if that one scores better).
    """

    rows: list = field(default_factory=list)
    inner_al: list = field(default_factory=list)
    converged: bool = False
    final_blocks: PddBlocks = None
    last_iterate: PddBlocks = None
    weights: list = None
    restarts: int = 0

    def append(self, **row):
        self.rows.append({k: row[k] for k in TRACE_COLUMNS})

    @property
    def outer_iters(self):
        return len(self.rows)

    @property
    def total_inner_iters(self):
        return int(sum(r["inner_iters"] for r in self.rows))

    @property
    def final_zeta(self):
        return self.rows[-1]["zeta"] if self.rows else float("nan")

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)

    def inner_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["outer_iter", "inner_iter", "al_value"])
            for k, als in enumerate(self.inner_al):
                for m, a in enumerate(als):
                    w.writerow([k, m, repr(float(a))])


def _as_users(channels):
    if isinstance(channels, ChannelSet):
        return [channels]
    return list(channels)


def _relay_gain_init(cfg, ch, F, users):
    """Matched relay direction scaled to the largest stable, power-feasible gain."""
    d = cfg.d
    U_sr = np.linalg.svd(ch.H_est["sr"])[0][:, :d]
    V_rd = np.linalg.svd(users[0].H_est["rd"])[2].conj().T[:, :d]
    G_dir = V_rd @ herm(U_sr)
    M1_0 = cv.m1(cfg, ch, F, np.zeros((cfg.N_r, cfg.N_r)))
    open_loop = float(np.real(np.trace(G_dir @ M1_0 @ herm(G_dir))))
    a = np.sqrt(cfg.P_r_max / ((1.0 + cfg.kappa_r) * open_loop))

    def feasible(scale):
        try:
            return cv.relay_power(cfg, ch, F, scale * G_dir) <= cfg.P_r_max
        except (RelayLoopUnstable, NotPSDError):
            return False

    hi = a
    for _ in range(INIT_HALVINGS + 1):
        if feasible(a):
            break
        hi, a = a, 0.5 * a
    else:
        raise RelayLoopUnstable("no stable initial relay gain after repeated halving")
    if hi > a:
        lo = a
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        a = lo
    return a * G_dir


def consistent_values(problem, F, G, receivers):
    """Block values (in the problem's working units) at which every residual vanishes.

    ``F, G, receivers`` are given in physical units.
    """
    Gs, Cs = problem.to_scaled(G, receivers)
    cfg, ch = problem.ucfg[0], problem.susers[0]
    M_out = cv.solve_mout(cfg, ch, F, Gs)
    L1 = chol_factor(cv.m1(cfg, ch, F, M_out), CHOL_JITTER)
    J = Gs @ L1
    L5 = ch.H_est["sr"] @ F
    v = {"F": F, "G": Gs, "J": J, "L1": L1, "L5": L5}
    for u, (cfu, chu, C) in enumerate(zip(problem.ucfg, problem.susers, Cs)):
        L2 = chol_factor(cv.m2(cfu, chu, F, M_out), CHOL_JITTER)
        L3 = herm(C) @ L2
        L6 = chu.H_est["rd"] @ Gs @ L5
        E = cv.mse_matrix(cfu, chu, F, Gs, C, M_out)
        v.update({f"C{u}": C, f"L2{u}": L2, f"L3{u}": L3, f"L6{u}": L6,
                  f"L4{u}": chol_factor(E, CHOL_JITTER)})
    for name in problem.tilde_pairs():
        v["t" + name] = v[name].copy()
    return {k: np.array(x, dtype=complex) for k, x in v.items()}


def _init(problem, pdd_cfg):
    cfg, ch = problem.cfg, problem.users[0]
    V = np.linalg.svd(ch.H_est["sr"])[2].conj().T[:, :cfg.d]
    F = V * np.sqrt(cfg.P_s_max / ((1.0 + cfg.kappa_s) * cfg.d))
    G = _relay_gain_init(cfg, ch, F, problem.users)
    if problem.has_design_constraints:
        G = cv.scale_relay_to_feasible(cfg, ch, cv.DesignVariables(F, G, np.zeros((cfg.M_d, cfg.d))),
                                       extra=problem.design_ok).G
        F = _scale_source_for_papr(problem, F, G)
    receivers = [cv.mmse_receiver(cfg, chu, F, G) for chu in problem.users]
    M_out = cv.solve_mout(cfg, ch, F, G)
    a_r = float(np.real(np.trace(cv.m1(cfg, ch, F, M_out)))) / cfg.M_r
    a_d = [float(np.real(np.trace(cv.m2(cfg, chu, F, M_out)))) / cfg.M_d for chu in problem.users]
    problem.set_scales(a_r, a_d)
    values = consistent_values(problem, F, G, receivers)
    weights = None
    if problem.rate:
        weights = [_weight_sqrt(values[f"L4{u}"]) for u in range(problem.n_users)]
    blocks = PddBlocks(problem, values, weights)
    lam = {g: np.zeros(r.shape, dtype=complex)
           for g, r in problem.residuals(values).items()}
    rho = pdd_cfg.rho0
    if pdd_cfg.rho0_relative:
        lam_min = min(float(np.linalg.eigvalsh(cv.mse_matrix(cfg, chu, F, G, C, M_out))[0])
                      for chu, C in zip(problem.users, receivers))
        # the weight S = E^{-1} scales the objective by up to 1/lam_min
        rho *= lam_min ** 2 if problem.rate else lam_min
    return blocks, DualState(lam, rho)


def _scale_source_for_papr(problem, F, G):
    """Shrink ``F`` until the design constraints hold (the relay noise floor stays)."""
    cfg, ch = problem.cfg, problem.users[0]

    def ok(a):
        try:
            M = cv.solve_mout(cfg, ch, a * F, G)
        except (RelayLoopUnstable, NotPSDError):
            return False
        return problem.design_ok(cfg, ch, a * F, G, M)

    if ok(1.0):
        return F
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo * F


def init_blocks(cfg, channels, rng=None, pdd_cfg=None, rate=False, papr=None):
    """Consistent starting point (all residuals zero) and zero multipliers.

    ``F`` spreads the source budget equally over the ``d`` strongest right
    singular directions of the source-relay channel, ``G`` maps the ``d``
    strongest relay receive directions onto the strongest relay-destination
    directions and takes the largest stable gain within the relay budget,
    and every ``C`` is the MMSE receiver. ``rng`` is accepted for interface
    symmetry; the construction is deterministic.
    """
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    problem = _Problem(cfg, _as_users(channels), rate=rate, papr=papr)
    return _init(problem, pdd_cfg)


def _weight_sqrt(L4):
    """``S^{1/2}`` for the closed-form weight ``S = (L4 L4^H + reg I)^{-1}``."""
    A = L4 @ herm(L4)
    n = A.shape[0]
    A = 0.5 * (A + herm(A)) + S_REG * np.eye(n)
    w, U = np.linalg.eigh(A)
    return (U / np.sqrt(w)) @ herm(U)


def _sq(x):
    return float(np.sum(np.abs(x) ** 2))


def violation(blocks):
    """Total squared constraint violation ``zeta``."""
    return float(sum(_sq(r) for r in blocks.problem.residuals(blocks.values).values()))


def objective(blocks):
    """Surrogate objective: ``sum ||L4||^2`` or the weighted-MSE form with ``S``."""
    p = blocks.problem
    terms = p.objective_terms(blocks.values, blocks.weights)
    val = sum(_sq(t) for t in terms.values())
    if blocks.weights is not None:
        for W in blocks.weights:
            S = W @ W
            val -= float(np.linalg.slogdet(S)[1]) + S.shape[0]
    return val


def augmented_lagrangian(blocks, duals, rho=None):
    """``objective + (1/2 rho) sum_g ||res_g + rho lam_g||^2``."""
    rho = duals.rho if rho is None else rho
    res = blocks.problem.residuals(blocks.values)
    pen = sum(_sq(r + rho * duals.lam[g]) for g, r in res.items())
    return objective(blocks) + pen / (2.0 * rho)


def _flatten(arr, batch):
    arr = np.broadcast_to(arr, (batch,) + arr.shape[-2:])
    return np.swapaxes(arr, -1, -2).reshape(batch, -1)


def _block_program(blocks, duals, names, rho, constrained):
    p = blocks.problem
    layout = qcqp.VariableLayout({k: p.shapes[k] for k in names})
    n = layout.n
    pts = np.concatenate([np.zeros((1, n)), np.eye(n)])
    vals = dict(blocks.values)
    vals.update(layout.unpack(pts))
    res = p.residuals(vals)
    w = np.sqrt(1.0 / (2.0 * rho))
    parts = [w * (_flatten(r, n + 1) + rho * duals.lam[g].T.reshape(-1)) for g, r in res.items()]
    obj = p.objective_terms(vals, blocks.weights)
    parts += [_flatten(t, n + 1) for t in obj.values()]
    R = np.concatenate(parts, axis=1)
    R = np.concatenate([R.real, R.imag], axis=1)
    A = (R[1:] - R[0]).T
    b = -R[0]
    cons = p.b1_constraints(layout) if constrained else []
    return qcqp.QuadraticProgram(A, b, constraints=cons, layout=layout)


def _update(blocks, duals, names, rho, pdd_cfg, constrained):
    qp = _block_program(blocks, duals, names, rho, constrained)
    rep = qcqp.solve(qp, tol=pdd_cfg.qp_tol, max_iter=pdd_cfg.qp_max_iter)
    if rep.status != "Converged":
        log.warning("block subproblem stopped with status %s (kkt %.3e)",
                    rep.status, rep.kkt_residual)
    return blocks.with_values(rep.solution)


def update_block_B1(blocks, duals, rho=None, pdd_cfg=None):
    """Exact AL minimization over ``{F, G, C, J, L~1..L~4}`` under the power balls."""
    rho = duals.rho if rho is None else rho
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    return _update(blocks, duals, blocks.problem.block1, rho, pdd_cfg, True)


def update_block_B2(blocks, duals, rho=None, pdd_cfg=None):
    """Exact unconstrained AL minimization over ``{F~, J~, L1..L6}``."""
    rho = duals.rho if rho is None else rho
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    return _update(blocks, duals, blocks.problem.block2, rho, pdd_cfg, False)


def update_weights(blocks):
    """Closed-form weight block ``S = E^{-1}`` (stored as ``S^{1/2}``).

    ``E`` is the MSE matrix of the current ``(F, G, C)``; at a consistent
    point it equals ``L4 L4^H``. Using the design's own MSE matrix keeps
    ``S`` bounded when the penalized ``L4`` drifts towards zero.
    """
    p = blocks.problem
    F, G, Cs = p.physical(blocks.values)
    try:
        M_out = cv.solve_mout(p.cfg, p.users[0], F, G)
    except (RelayLoopUnstable, NotPSDError):
        return blocks
    w = []
    for ch, C in zip(p.users, Cs):
        E = cv.mse_matrix(p.cfg, ch, F, G, C, M_out)
        w.append(_weight_sqrt(chol_factor(E, CHOL_JITTER)))
    return PddBlocks(p, blocks.values, w)


def outer_update(blocks, duals, pdd_cfg, zeta_now, zeta_prev=None):
    """Penalty step if the violation did not drop enough, dual step otherwise.

    ``zeta_prev`` is the violation at the end of the previous outer
    iteration (``None`` on the first one, which makes the threshold
    ``zeta_th``).
    """
    threshold = pdd_cfg.zeta_th if zeta_prev is None else pdd_cfg.switch_threshold(zeta_prev)
    if zeta_now >= threshold:
        return DualState({k: v.copy() for k, v in duals.lam.items()}, pdd_cfg.c_rho * duals.rho)
    res = blocks.problem.residuals(blocks.values)
    lam = {g: duals.lam[g] + res[g] / duals.rho for g in duals.lam}
    return DualState(lam, duals.rho)


def true_mse(blocks):
    """Sum over users of ``tr(E)`` at the blocks' ``(F, G, C)``; NaN if the loop is unstable."""
    p = blocks.problem
    F, G, Cs = p.physical(blocks.values)
    try:
        M_out = cv.solve_mout(p.cfg, p.users[0], F, G)
    except (RelayLoopUnstable, NotPSDError):
        return float("nan")
    return float(sum(np.real(np.trace(cv.mse_matrix(p.cfg, ch, F, G, C, M_out)))
                     for ch, C in zip(p.users, Cs)))


def _extrapolated(blocks, last, beta, duals, al):
    """``blocks + beta (blocks - last)`` if it is B1-feasible and lowers the AL, else ``None``."""
    p = blocks.problem
    vals = {k: v + beta * (v - last.values[k]) for k, v in blocks.values.items()}
    vals = p.b1_feasible_point(vals)
    if vals is None:
        return None
    trial = blocks.with_values(vals)
    al_trial = augmented_lagrangian(trial, duals)
    return (trial, al_trial) if al_trial < al else None


def _inner_loop(blocks, duals, pdd_cfg):
    als = []
    prev = augmented_lagrangian(blocks, duals)
    last = None
    beta = pdd_cfg.beta0
    m = 0
    for m in range(1, pdd_cfg.max_inner + 1):
        new = update_block_B1(blocks, duals, pdd_cfg=pdd_cfg)
        new = update_block_B2(new, duals, pdd_cfg=pdd_cfg)
        al = augmented_lagrangian(new, duals)
        if pdd_cfg.extrapolate and last is not None:
            step = _extrapolated(new, last, beta, duals, al)
            if step is None:
                beta = max(0.5 * beta, 0.1 * pdd_cfg.beta0)
            else:
                new, al = step
                beta = min(1.5 * beta, pdd_cfg.beta_max)
        last = blocks = new
        als.append(al)
        if abs(prev - al) <= pdd_cfg.eps_inner * (1.0 + abs(al)):
            break
        prev = al
    return blocks, als, m


def _finalize(problem, blocks):
    """Feasible design from the last iterate: power scaling, then MMSE receivers."""
    cfg, ch = problem.cfg, problem.users[0]
    extra = problem.design_ok if problem.has_design_constraints else None
    base = blocks.design()
    design = cv.scale_relay_to_feasible(cfg, ch, base, extra=extra)
    F, G = design.F, design.G
    if problem.has_design_constraints:
        F = _scale_source_for_papr(problem, F, G)
    receivers = [cv.mmse_receiver(cfg, chu, F, G) for chu in problem.users]
    values = consistent_values(problem, F, G, receivers)
    final = PddBlocks(problem, values)
    if problem.rate:
        final = update_weights(final)
    return final


def _design_score(problem, blocks):
    """True objective of a consistent iterate: sum MSE, or minus the sum rate."""
    F, G, Cs = problem.physical(blocks.values)
    cfg = problem.cfg
    try:
        M_out = cv.solve_mout(cfg, problem.users[0], F, G)
    except (RelayLoopUnstable, NotPSDError):
        return float("inf")
    if problem.rate:
        return -sum(cv.achievable_rate(cfg, ch, F, G, M_out) for ch in problem.users)
    return float(sum(np.real(np.trace(cv.mse_matrix(cfg, ch, F, G, C, M_out)))
                     for ch, C in zip(problem.users, Cs)))


def _better(problem, candidate, incumbent):
    """Keep the incumbent feasible design unless the candidate improves on it."""
    if _design_score(problem, candidate) <= _design_score(problem, incumbent):
        return candidate
    return incumbent


def _run(problem, pdd_cfg):
    blocks, duals = _init(problem, pdd_cfg)
    best = blocks
    trace = ConvergenceTrace()
    zeta_prev = None
    saved = None
    stalls = 0
    for k in range(pdd_cfg.max_outer):
        blocks, als, m = _inner_loop(blocks, duals, pdd_cfg)
        zeta = violation(blocks)
        trace.inner_al.append(als)
        trace.append(outer_iter=k, inner_iters=m, zeta=zeta, al_value=als[-1],
                     mse=true_mse(blocks), rho=duals.rho)
        if zeta < pdd_cfg.zeta_th:
            trace.converged = True
            break
        if saved is not None and zeta > saved[2]:
            # the last multiplier step made things worse: undo it, tighten the penalty
            blocks, old, zeta = saved
            duals = DualState(old.lam, pdd_cfg.c_rho * old.rho)
            saved = None
            continue
        new = outer_update(blocks, duals, pdd_cfg, zeta, zeta_prev)
        saved = (blocks, duals, zeta) if new.rho == duals.rho else None
        stalls = stalls + 1 if (zeta_prev is not None and saved is None
                                and zeta > STALL_RATIO * zeta_prev) else 0
        duals = new
        zeta_prev = zeta
        if stalls >= STALL_STEPS:
            # penalty steps no longer reduce the violation: restart from the
            # consistent point of the current design, keeping the penalty
            blocks = best = _better(problem, _finalize(problem, blocks), best)
            duals = DualState({g: np.zeros_like(v) for g, v in duals.lam.items()}, duals.rho)
            stalls, zeta_prev, saved = 0, None, None
            trace.restarts += 1
            continue
        if problem.rate:
            blocks = update_weights(blocks)
    trace.last_iterate = blocks
    trace.final_blocks = _better(problem, _finalize(problem, blocks), best)
    trace.weights = trace.final_blocks.weights
    return trace.final_blocks, trace


def _result(problem, pdd_cfg):
    final, trace = _run(problem, pdd_cfg)
    if not trace.converged:
        raise NoConvergence(f"violation {trace.final_zeta:.3e} after {pdd_cfg.max_outer} outer iterations",
                            trace=trace, design=final.design())
    return final, trace


def run_algorithm1(cfg, channels, pdd_cfg=None, rng=None):
    """Impairment-aware MSE minimization. Returns ``(DesignVariables, ConvergenceTrace)``.

    Raises
    ------
    NoConvergence
        If the violation is still above ``zeta_th`` after ``max_outer`` outer
        iterations; the exception carries the trace and the (feasible) design.
    """
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    final, trace = _result(_Problem(cfg, _as_users(channels)[:1]), pdd_cfg)
    return final.design(), trace


def run_rate_maximization(cfg, channels, pdd_cfg=None, rng=None):
    """Rate maximization through the weighted-MSE surrogate with ``S = E^{-1}``.

    The weight block ``S = E^{-1}`` is updated in closed form once per outer
    iteration from the MSE matrix of the current ``(F, G, C)``, so each
    inner loop minimizes a weighted MSE with fixed ``S``. Jointly in
    ``(L4, S)`` the penalized objective is unbounded below (``L4 -> 0`` with
    ``S = (L4 L4^H)^{-1}``), which rules out the update inside the inner
    loop. The final design gets MMSE receivers and a last
    weight update, so ``S`` equals the inverse MMSE matrix of the returned
    design.
    The returned trace carries the final weights in ``trace.weights`` (as
    ``S^{1/2}``, per user).
    """
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    final, trace = _result(_Problem(cfg, _as_users(channels)[:1], rate=True), pdd_cfg)
    return final.design(), trace


def run_multiuser(cfg, per_user_channels, pdd_cfg=None, rng=None):
    """Sum-MSE minimization for several destinations sharing one source and relay.

    Returns ``(F, G, [C_l], trace)``.
    """
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    final, trace = _result(_Problem(cfg, _as_users(per_user_channels)), pdd_cfg)
    F, G, receivers = final.problem.physical(final.values)
    return F, G, receivers, trace


def run_with_saturation(cfg, channels, pdd_cfg=None, papr=None, rng=None):
    """MSE minimization with per-chain instantaneous power limits at the relay.

    ``papr`` is a :class:`Papr` (or a mapping with the same fields).
    """
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    if papr is None:
        raise ValueError("papr budgets are required")
    if not isinstance(papr, Papr):
        papr = Papr(**papr)
    final, trace = _result(_Problem(cfg, _as_users(channels)[:1], papr=papr), pdd_cfg)
    return final.design(), trace


def run_with_si_cap(cfg, channels, P_th, pdd_cfg=None, rng=None):
    """MSE minimization with the received SI power capped, ``tr(H_rr M_out H_rr^H) <= P_th``."""
    pdd_cfg = PddConfig() if pdd_cfg is None else pdd_cfg
    if not P_th > 0:
        raise ValueError("P_th must be positive")
    final, trace = _result(_Problem(cfg, _as_users(channels)[:1], si_cap=float(P_th)), pdd_cfg)
    return final.design(), trace
