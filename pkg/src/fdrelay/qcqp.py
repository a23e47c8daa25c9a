"""Convex quadratic programs with ball and quadratic constraints.

A program minimizes ``||A x - b||^2 + c^T x`` over a real vector ``x``
subject to constraints ``x^T P_k x <= t_k`` (a Euclidean ball on a subset of
coordinates is the special case of a diagonal 0/1 ``P_k``). Complex matrix
variables are mapped to ``x`` by :class:`VariableLayout`: the real parts of
all variables (each column-stacked) come first, then all imaginary parts.

Two solvers are provided. ``"dual"`` (default) maximizes the concave dual
over the few constraint multipliers with a projected Newton method; each
dual evaluation is one Cholesky solve, so accuracy does not degrade with the
conditioning of ``A``. ``"apg"`` is accelerated projected gradient with
adaptive restart and is limited to ball constraints.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from .linalg import vec, unvec

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 5000
# Tikhonov weight on the normal equations, relative to their mean diagonal
REGULARIZATION = 1e-12
# relative feasibility slack of returned solutions
FEAS_TOL = 1e-10


class VariableLayout:
    """Named complex matrix variables <-> stacked real vector."""

    def __init__(self, shapes):
        self.names = list(shapes)
        self.shapes = {k: tuple(v) for k, v in shapes.items()}
        self.sizes = {k: int(np.prod(v)) for k, v in self.shapes.items()}
        self.n_complex = sum(self.sizes.values())
        self.n = 2 * self.n_complex
        self.offsets = {}
        off = 0
        for k in self.names:
            self.offsets[k] = off
            off += self.sizes[k]

    def real_indices(self, name):
        o = self.offsets[name]
        return np.arange(o, o + self.sizes[name])

    def indices(self, name):
        """Real-vector indices carrying variable ``name`` (real then imaginary)."""
        r = self.real_indices(name)
        return np.concatenate([r, r + self.n_complex])

    def row_indices(self, name, row):
        rows, cols = self.shapes[name]
        r = self.offsets[name] + row + rows * np.arange(cols)
        return np.concatenate([r, r + self.n_complex])

    def pack(self, values):
        z = np.concatenate([vec(np.asarray(values[k], dtype=complex)) for k in self.names])
        return np.concatenate([z.real, z.imag])

    def unpack(self, x):
        """Real vector(s) -> dict of complex arrays (leading batch axes kept)."""
        x = np.asarray(x)
        z = x[..., :self.n_complex] + 1j * x[..., self.n_complex:]
        out = {}
        for k in self.names:
            o = self.offsets[k]
            rows, cols = self.shapes[k]
            out[k] = unvec(z[..., o:o + self.sizes[k]], rows, cols)
        return out


@dataclass
class Ball:
    """``||x[indices]|| <= radius``."""

    indices: np.ndarray
    radius: float
    name: str = ""

    def matrix(self, n):
        P = np.zeros((n, n))
        P[self.indices, self.indices] = 1.0
        return P

    @property
    def bound(self):
        return self.radius ** 2


@dataclass
class Quadratic:
    """``x^T P x <= bound`` with ``P`` symmetric PSD."""

    P: np.ndarray
    bound: float
    name: str = ""

    def matrix(self, n):
        return self.P


@dataclass
class QuadraticProgram:
    """``min ||A x - b||^2 + c^T x`` subject to ball/quadratic constraints."""

    A: np.ndarray
    b: np.ndarray
    c: np.ndarray = None
    constraints: list = field(default_factory=list)
    layout: VariableLayout = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float).reshape(-1)
        for con in self.constraints:
            if isinstance(con, Ball) and not con.radius > 0:
                raise ValueError("ball radius must be positive")

    @property
    def n(self):
        return self.A.shape[1]

    def objective(self, x):
        r = self.A @ x - self.b
        val = float(r @ r)
        if self.c is not None:
            val += float(self.c @ x)
        return val

    def gradient(self, x):
        g = 2.0 * self.A.T @ (self.A @ x - self.b)
        if self.c is not None:
            g = g + self.c
        return g

    def violation(self, x):
        """Largest relative constraint violation (0 if feasible)."""
        worst = 0.0
        for con in self.constraints:
            if isinstance(con, Ball):
                v = np.linalg.norm(x[con.indices]) / con.radius - 1.0
            else:
                v = (x @ con.P @ x - con.bound) / max(abs(con.bound), 1e-300)
            worst = max(worst, v)
        return worst


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    status: str
    multipliers: np.ndarray = None
    solution: dict = None


def _project_balls(x, balls):
    x = x.copy()
    for ball in balls:
        nrm = np.linalg.norm(x[ball.indices])
        if nrm > ball.radius:
            x[ball.indices] *= ball.radius / nrm
    return x


def _finish(qp, x, its, kkt, status, mu=None):
    sol = qp.layout.unpack(x) if qp.layout is not None else None
    return SolveReport(x, qp.objective(x), its, float(kkt), status, mu, sol)


def _solve_apg(qp, tol, max_iter, warm_start):
    balls = qp.constraints
    if any(not isinstance(c, Ball) for c in balls):
        raise ValueError("apg handles ball constraints only")
    AtA = qp.A.T @ qp.A
    L = 2.0 * max(np.linalg.eigvalsh(AtA).max(), 1e-300)
    g0 = np.linalg.norm(qp.gradient(np.zeros(qp.n)))
    x = _project_balls(np.zeros(qp.n) if warm_start is None else warm_start, balls)
    y, t = x.copy(), 1.0
    f_prev = qp.objective(x)
    kkt = np.inf
    for it in range(1, max_iter + 1):
        x_new = _project_balls(y - qp.gradient(y) / L, balls)
        f_new = qp.objective(x_new)
        if f_new > f_prev:
            # adaptive restart keeps the iterate objective nonincreasing
            y, t = x.copy(), 1.0
            x_new = _project_balls(x - qp.gradient(x) / L, balls)
            f_new = qp.objective(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + (t - 1.0) / t_new * (x_new - x)
        gmap = L * (x - _project_balls(x - qp.gradient(x) / L, balls))
        kkt = np.linalg.norm(gmap)
        x, t, f_prev = x_new, t_new, f_new
        if kkt <= tol * (1.0 + g0):
            return _finish(qp, x, it, kkt, "Converged")
    return _finish(qp, x, max_iter, kkt, "MaxIter")


class _DualProblem:
    """Dual function of the program over the constraint multipliers."""

    def __init__(self, qp, reg):
        self.qp = qp
        self.AtA = qp.A.T @ qp.A
        scale = max(np.trace(self.AtA) / qp.n, 1e-300)
        self.reg = reg * scale * np.eye(qp.n)
        rhs = qp.A.T @ qp.b
        if qp.c is not None:
            rhs = rhs - 0.5 * qp.c
        self.rhs = rhs
        self.P = [c.matrix(qp.n) for c in qp.constraints]
        self.t = np.array([c.bound for c in qp.constraints], dtype=float)

    def primal(self, mu):
        H = self.AtA + self.reg
        for m, P in zip(mu, self.P):
            if m:
                H = H + m * P
        cf = sla.cho_factor(H, lower=True, check_finite=False)
        return sla.cho_solve(cf, self.rhs, check_finite=False), cf

    def h(self, x):
        return np.array([x @ P @ x for P in self.P]) - self.t

    def value(self, mu, x):
        return self.qp.objective(x) + float(mu @ self.h(x))


def _restore_feasibility(qp, x):
    """Pull violated constraints back onto their boundary.

    Balls are projected; a violated quadratic constraint is met by scaling
    the coordinates in its support, which can only shrink every other
    constraint that is homogeneous on those coordinates.
    """
    x = _project_balls(x, [c for c in qp.constraints if isinstance(c, Ball)])
    for con in qp.constraints:
        if isinstance(con, Quadratic):
            val = x @ con.P @ x
            if val > con.bound:
                support = np.flatnonzero(np.any(con.P != 0, axis=0))
                x[support] *= np.sqrt(con.bound / val)
    return x


def _solve_dual(qp, tol, max_iter, reg):
    dual = _DualProblem(qp, reg)
    m = len(dual.P)
    mu = np.zeros(m)
    x, cf = dual.primal(mu)
    scale_t = np.maximum(np.abs(dual.t), 1e-300)
    h = dual.h(x)
    if np.all(h <= FEAS_TOL * scale_t):
        return _finish(qp, x, 0, 0.0, "Converged", mu)
    g = dual.value(mu, x)
    its, kkt = 0, np.inf
    for its in range(1, max_iter + 1):
        free = (mu > 0) | (h > 0)
        V = np.stack([P @ x for P in dual.P], axis=1)
        W = sla.cho_solve(cf, V, check_finite=False)
        Hd = 2.0 * V.T @ W
        idx = np.flatnonzero(free)
        Hf = Hd[np.ix_(idx, idx)]
        Hf = Hf + 1e-14 * max(np.trace(Hf), 1e-300) * np.eye(len(idx))
        step = np.zeros(m)
        step[idx] = np.linalg.solve(Hf, h[idx])
        alpha = 1.0
        while True:
            mu_new = np.maximum(mu + alpha * step, 0.0)
            x_new, cf_new = dual.primal(mu_new)
            g_new = dual.value(mu_new, x_new)
            # the dual value carries rounding of order 1e-16 |objective|
            if g_new >= g - 1e-12 * (1.0 + abs(g)) or alpha < 1e-10:
                break
            alpha *= 0.5
        mu, x, cf, g = mu_new, x_new, cf_new, g_new
        h = dual.h(x)
        feas = np.max(np.maximum(h, 0.0) / scale_t)
        comp = np.max(np.abs(mu * h)) / (1.0 + abs(g))
        kkt = max(feas, comp)
        if kkt <= tol or alpha < 1e-10:
            break
    x = _restore_feasibility(qp, x)
    status = "Converged" if kkt <= tol else "MaxIter"
    return _finish(qp, x, its, kkt, status, mu)


def solve(qp, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, warm_start=None, method="dual",
          reg=REGULARIZATION):
    """Solve a :class:`QuadraticProgram`.

    Unconstrained programs are solved exactly from the regularized normal
    equations. ``warm_start`` is used by ``"apg"`` only; the dual method
    does not need one.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not qp.constraints:
        dual = _DualProblem(qp, reg)
        x, _ = dual.primal(np.zeros(0))
        return _finish(qp, x, 1, np.linalg.norm(qp.gradient(x)), "Converged")
    if method == "apg":
        return _solve_apg(qp, tol, max_iter, warm_start)
    if method != "dual":
        raise ValueError(f"unknown method {method!r}")
    return _solve_dual(qp, tol, max_iter, reg)


def complexity_bound(N_tilde, M_tilde, l, digits=1.0):
    """Interior-point arithmetic bound ``(1+M)^1/2 N (N^2 + M + sum l^2) digit(eps)``.

    The O(1) constant is set to one. The bound refers to a conic
    interior-point solver, not to the solvers in this module.
    """
    l = np.asarray(l, dtype=float)
    return float(np.sqrt(1.0 + M_tilde) * N_tilde * (N_tilde ** 2 + M_tilde + np.sum(l ** 2)) * digits)


def b1_dims(cfg):
    """Real variable count, constraint count and constraint sizes of the B1 update."""
    d, Ns, Nr, Mr, Md = cfg.d, cfg.N_s, cfg.N_r, cfg.M_r, cfg.M_d
    N_tilde = 4 * d * (Ns + Md) + 2 * (Nr * Mr + Nr ** 2 + Mr ** 2 + Md ** 2 + d ** 2 + d * (2 * Md + Mr))
    l = [2 * d * Ns, 2 * Nr ** 2, 2 * d * (Ns + Md + d) + 2 * (Nr ** 2 + Mr ** 2 + Md ** 2)]
    return N_tilde, 3, l


def b2_dims(cfg):
    """Same for the B2 update; the stated constraint count is 1 while three sizes are listed."""
    d, Ns, Nr, Mr, Md = cfg.d, cfg.N_s, cfg.N_r, cfg.M_r, cfg.M_d
    N_tilde = 2 * d * (2 * Md + Mr + Ns + d) + 2 * (Nr ** 2 + Mr ** 2 + Md ** 2)
    l = [2 * d * Ns, 2 * Nr ** 2, 2 * d * (Ns + Md + d) + 2 * (Nr ** 2 + Mr ** 2 + Md ** 2)]
    return N_tilde, 1, l
