"""Closed-form second-order analysis of the impaired full-duplex AF relay.

Every function works with the *estimated* channels of a :class:`ChannelSet`;
CSI errors enter through their correlation matrices only. Distortion terms
of second order in the impairment coefficients are dropped, matching the
first-order model of the analysis.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, DomainError, NotPSDError, RelayLoopUnstable
from .linalg import (SelectionMatrix, diag_part, herm, hermitize, kron, trace,
                     unvec, vec)

# the relay loop is declared unstable at spectral radius >= 1 - LOOP_MARGIN
LOOP_MARGIN = 1e-6
# NotPSD threshold for the symmetrized M_out
MOUT_PSD_TOL = 1e-8


@dataclass
class DesignVariables:
    """Source precoder ``F``, relay amplification ``G``, destination filter ``C``."""

    F: np.ndarray
    G: np.ndarray
    C: np.ndarray

    def copy(self):
        return DesignVariables(self.F.copy(), self.G.copy(), self.C.copy())

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class RelayTransfer:
    Theta: np.ndarray
    B: np.ndarray
    loop_condition: float
    spectral_radius: float


def _csi_term(C_rx, C_tx, X):
    """``C_rx tr(C_tx X)`` (batched over leading axes of ``X``)."""
    return trace(C_tx @ X)[..., None, None] * C_rx


def _check_shape(X, shape, name):
    if X.shape[-2:] != shape:
        raise DimensionError(f"{name} has shape {X.shape[-2:]}, expected {shape}")


def source_cov(cfg, F):
    """Covariance of the distorted source signal, ``FF^H + kappa_s diag(FF^H)``."""
    Q = F @ herm(F)
    return Q + cfg.kappa_s * diag_part(Q)


def relay_tx_cov(cfg, M_out):
    """``E{r_out r_out^H} = M_out + kappa_r diag(M_out)``."""
    return M_out + cfg.kappa_r * diag_part(M_out)


def min0(cfg, ch, F):
    """Relay input covariance with the relay silent (``M_in,0``)."""
    _check_shape(F, (cfg.N_s, cfg.d), "F")
    H = ch.H_est["sr"]
    Q = source_cov(cfg, F)
    out = H @ Q @ herm(H) + _csi_term(ch.C_rx["sr"], ch.C_tx["sr"], Q)
    return hermitize(out + cfg.sigma2_nr * np.eye(cfg.M_r))


def si_terms(cfg, ch, M_out):
    """Residual SI seen at the relay input for relay covariance ``M_out``."""
    H = ch.H_est["rr"]
    Rout = relay_tx_cov(cfg, M_out)
    return H @ Rout @ herm(H) + _csi_term(ch.C_rx["rr"], ch.C_tx["rr"], Rout)


def m1(cfg, ch, F, M_out):
    """Covariance of the SI-suppressed relay input, first order in the distortions."""
    _check_shape(F, (cfg.N_s, cfg.d), "F")
    _check_shape(M_out, (cfg.N_r, cfg.N_r), "M_out")
    return hermitize(m1_bilinear(cfg, ch, F @ herm(F), M_out))


def m1_bilinear(cfg, ch, Q, X):
    """:func:`m1` as a linear map of ``Q = F F^H`` and ``X = M_out``.

    Neither argument needs to be Hermitian, so ``Q = F F~^H`` and
    ``X = J J~^H`` give the block-bilinear form used by the optimizer.
    Leading batch axes broadcast.
    """
    Hsr, Hrr = ch.H_est["sr"], ch.H_est["rr"]
    Qd = Q + cfg.kappa_s * diag_part(Q)
    M0 = (Hsr @ Qd @ herm(Hsr) + _csi_term(ch.C_rx["sr"], ch.C_tx["sr"], Qd)
          + cfg.sigma2_nr * np.eye(cfg.M_r))
    dX = diag_part(X)
    out = (M0 + cfg.kappa_r * Hrr @ dX @ herm(Hrr)
           + _csi_term(ch.C_rx["rr"], ch.C_tx["rr"], X + cfg.kappa_r * dX))
    inner = M0 + Hrr @ X @ herm(Hrr) + _csi_term(ch.C_rx["rr"], ch.C_tx["rr"], X)
    return out + cfg.beta_r * diag_part(inner)


def m2(cfg, ch, F, M_out):
    """Received covariance at the destination, ``E{y y^H}``.

    The relay-link distortion term uses ``kappa_r`` in both the channel and
    the CSI-error part.
    """
    _check_shape(F, (cfg.N_s, cfg.d), "F")
    _check_shape(M_out, (cfg.N_r, cfg.N_r), "M_out")
    return hermitize(m2_bilinear(cfg, ch, F @ herm(F), M_out))


def m2_bilinear(cfg, ch, Q, X):
    """:func:`m2` as a linear map of ``Q = F F^H`` and ``X = M_out`` (see :func:`m1_bilinear`)."""
    out = _dest_input(cfg, ch, Q + cfg.kappa_s * diag_part(Q), X + cfg.kappa_r * diag_part(X))
    undist = _dest_input(cfg, ch, Q, X)
    return out + cfg.beta_d * diag_part(undist)


def _dest_input(cfg, ch, Q, R):
    Hsd, Hrd = ch.H_est["sd"], ch.H_est["rd"]
    return (Hsd @ Q @ herm(Hsd) + _csi_term(ch.C_rx["sd"], ch.C_tx["sd"], Q)
            + Hrd @ R @ herm(Hrd) + _csi_term(ch.C_rx["rd"], ch.C_tx["rd"], R)
            + cfg.sigma2_nd * np.eye(cfg.M_d))


def dest_input_cov(cfg, ch, F, M_out, distorted=True):
    """Covariance of the destination input before receive distortion."""
    Q = source_cov(cfg, F) if distorted else F @ herm(F)
    R = relay_tx_cov(cfg, M_out) if distorted else M_out
    return _dest_input(cfg, ch, Q, R)


def build_B(cfg, ch):
    """Loop matrix ``B`` with ``vec(M1) = (I + beta_r D) vec(M_in,0) + B vec(M_out)``."""
    H = ch.H_est["rr"]
    Dn = SelectionMatrix(cfg.N_r)
    Dm = SelectionMatrix(cfg.M_r)
    HH = kron(H.conj(), H)
    outer = np.outer(vec(ch.C_rx["rr"]), vec(ch.C_tx["rr"].conj()))
    B = cfg.kappa_r * Dn.rmul(HH) + cfg.beta_r * Dm.apply(HH)
    B = B + outer + cfg.kappa_r * Dn.rmul(outer) + cfg.beta_r * Dm.apply(outer)
    return B


def _loop(cfg, ch, G):
    _check_shape(G, (cfg.N_r, cfg.M_r), "G")
    K = kron(G.conj(), G)
    B = build_B(cfg, ch)
    A = K @ B
    radius = float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0
    if radius >= 1.0 - LOOP_MARGIN:
        raise RelayLoopUnstable(f"relay loop spectral radius {radius:.6f} >= 1", radius)
    L = np.eye(cfg.N_r ** 2) - A
    return K, B, L, radius


def relay_transfer(cfg, ch, G):
    """Relay transfer function ``Theta`` mapping ``vec(M_in,0)`` to ``vec(E{r_out r_out^H})``."""
    K, B, L, radius = _loop(cfg, ch, G)
    Dn = SelectionMatrix(cfg.N_r)
    Dm = SelectionMatrix(cfg.M_r)
    right = K + cfg.beta_r * Dm.rmul(K)
    core = np.linalg.solve(L, right)
    Theta = core + cfg.kappa_r * Dn.apply(core)
    return RelayTransfer(Theta, B, float(np.linalg.cond(L)), radius)


def solve_mout(cfg, ch, F, G, M_in0=None):
    """Undistorted relay transmit covariance ``M_out`` from the vectorized fixed point."""
    K, B, L, _ = _loop(cfg, ch, G)
    if M_in0 is None:
        M_in0 = min0(cfg, ch, F)
    v = vec(M_in0)
    v = v + cfg.beta_r * SelectionMatrix(cfg.M_r).apply(v)
    M_out = hermitize(unvec(np.linalg.solve(L, K @ v), cfg.N_r))
    w = np.linalg.eigvalsh(M_out)
    if w.size and w.min() < -MOUT_PSD_TOL * max(w.max(), 1e-300):
        raise NotPSDError(f"M_out has eigenvalue {w.min():.3e}")
    return M_out


def relay_power(cfg, ch, F, G):
    """Average relay transmit power ``E{||r_out||^2}``."""
    return float(np.real(trace(relay_tx_cov(cfg, solve_mout(cfg, ch, F, G)))))


def source_power(cfg, F):
    return float((1.0 + cfg.kappa_s) * np.linalg.norm(F) ** 2)


def equivalent_channel(ch, G):
    return ch.H_est["rd"] @ G @ ch.H_est["sr"]


def mse_matrix(cfg, ch, F, G, C, M_out=None):
    """MSE matrix ``E = C^H M2 C + I - C^H H_eq F - F^H H_eq^H C``."""
    if M_out is None:
        M_out = solve_mout(cfg, ch, F, G)
    _check_shape(C, (cfg.M_d, cfg.d), "C")
    Y = m2(cfg, ch, F, M_out)
    S = equivalent_channel(ch, G) @ F
    E = herm(C) @ Y @ C + np.eye(cfg.d) - herm(C) @ S - herm(S) @ C
    return hermitize(E)


def mse(cfg, ch, design):
    return float(np.real(np.trace(mse_matrix(cfg, ch, design.F, design.G, design.C))))


def mmse_receiver(cfg, ch, F, G, M_out=None):
    """Linear MMSE destination filter ``C* = M2^{-1} H_eq F``."""
    if M_out is None:
        M_out = solve_mout(cfg, ch, F, G)
    Y = m2(cfg, ch, F, M_out)
    return np.linalg.solve(Y, equivalent_channel(ch, G) @ F)


def achievable_rate(cfg, ch, F, G, M_out=None):
    """``W log2 |I + F^H H_eq^H Gamma^{-1} H_eq F|`` in bits/s."""
    if M_out is None:
        M_out = solve_mout(cfg, ch, F, G)
    S = equivalent_channel(ch, G) @ F
    Gamma = hermitize(m2(cfg, ch, F, M_out) - S @ herm(S))
    try:
        Lg = np.linalg.cholesky(Gamma)
    except np.linalg.LinAlgError:
        raise DomainError("interference-plus-noise covariance is not positive definite")
    X = np.linalg.solve(Lg, S)
    _, logdet = np.linalg.slogdet(np.eye(cfg.d) + herm(X) @ X)
    return float(cfg.W * logdet / np.log(2.0))


def mmse_rate(cfg, ch, F, G):
    """``-W log2 |E_mmse|``; equals :func:`achievable_rate`."""
    M_out = solve_mout(cfg, ch, F, G)
    C = mmse_receiver(cfg, ch, F, G, M_out)
    _, logdet = np.linalg.slogdet(mse_matrix(cfg, ch, F, G, C, M_out))
    return float(-cfg.W * logdet / np.log(2.0))


def is_power_feasible(cfg, ch, design, tol=1e-9):
    try:
        pr = relay_power(cfg, ch, design.F, design.G)
    except (RelayLoopUnstable, NotPSDError):
        return False
    return (source_power(cfg, design.F) <= cfg.P_s_max * (1 + tol)
            and pr <= cfg.P_r_max * (1 + tol))


def scale_relay_to_feasible(cfg, ch, design, extra=None, tol=1e-9, iters=80):
    """Shrink ``G`` by a scalar until the relay constraints hold.

    ``extra(cfg, ch, F, G, M_out) -> bool`` adds further constraints (e.g. a
    received-SI cap). The largest feasible scale in ``[0, 1]`` is found by
    bisection; ``F`` is projected onto its power ball and ``C`` is kept.
    """
    F = design.F
    pmax = cfg.P_s_max / (1.0 + cfg.kappa_s)
    nF = np.linalg.norm(F) ** 2
    if nF > pmax:
        F = F * np.sqrt(pmax / nF)

    def ok(a):
        G = a * design.G
        try:
            M_out = solve_mout(cfg, ch, F, G)
        except (RelayLoopUnstable, NotPSDError):
            return False
        if np.real(trace(relay_tx_cov(cfg, M_out))) > cfg.P_r_max * (1.0 - tol):
            return False
        return True if extra is None else bool(extra(cfg, ch, F, G, M_out))

    if ok(1.0):
        return DesignVariables(F, design.G.copy(), design.C.copy())
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return DesignVariables(F, lo * design.G, design.C.copy())
