"""Symbol-level simulation of the impaired full-duplex relay chain.

The simulator never uses the closed-form covariances unless asked to
(``distortion="model"``); by default each distortion variance follows the
running empirical power of the chain's undistorted signal, which makes it an
independent oracle for :mod:`fdrelay.covariance`.
"""

from dataclasses import dataclass, field

import numpy as np

from . import covariance as cv
from .errors import RelayLoopUnstable
from .linalg import crandn, herm_sqrt
from .system import LINKS, make_rng

BURN_IN = 0.1
# divergence guard on the running relay output power, relative to P_r_max
DIVERGENCE_FACTOR = 1e6


@dataclass
class ChainResult:
    """Empirical second-order statistics of one simulation run.

    Covariances are sample averages over the post-burn-in window. The MSE
    matrix aligns ``s(t - 1)`` with ``y(t)`` (one-symbol relay delay).
    """

    r_out_cov: np.ndarray
    y_cov: np.ndarray
    mse_matrix: np.ndarray
    m_in_cov: np.ndarray
    r_in_tilde_cov: np.ndarray
    n_used: int
    samples: dict = field(default_factory=dict)

    @property
    def mse(self):
        return float(np.real(np.trace(self.mse_matrix)))


def _cov(X):
    return X.T @ X.conj() / X.shape[0]


def _running_power(U):
    """Mean of ``|U[:t]|^2`` per column for every ``t`` (0 at ``t = 0``)."""
    P = np.abs(U) ** 2
    csum = np.cumsum(P, axis=0)
    out = np.zeros_like(P)
    out[1:] = csum[:-1] / np.arange(1, U.shape[0])[:, None]
    return out


def _channel_draws(ch, link, n, rng, csi):
    """Channel matrices per symbol: fixed truth or fresh CSI-error draws."""
    if csi == "fixed":
        return None, ch.H_true[link]
    A = herm_sqrt(ch.C_rx[link])
    B = herm_sqrt(ch.C_tx[link])
    M, N = ch.H_est[link].shape
    W = crandn(rng, n, M, N)
    return ch.H_est[link][None] + A @ W @ B, None


def simulate_chain(cfg, ch, F, G, C, n_sym, rng, csi="ensemble", distortion="empirical",
                   burn_in=BURN_IN, keep_samples=False):
    """Simulate the source-relay-destination chain symbol by symbol.

    Parameters
    ----------
    csi : {"ensemble", "fixed"}
        ``"fixed"`` uses ``ch.H_true`` for every symbol. ``"ensemble"`` draws
        a fresh CSI error around the estimates each symbol, which is the law
        the closed-form expressions average over.
    distortion : {"empirical", "model"}
        Source of the distortion variances: running empirical powers of the
        undistorted chain signals, or the closed-form covariances.

    Raises
    ------
    RelayLoopUnstable
        If the running relay output power exceeds ``1e6 * P_r_max``.
    """
    rng = make_rng(rng)
    n = int(n_sym)
    d = cfg.d
    s = crandn(rng, n, d)
    z_txs = crandn(rng, n, cfg.N_s)
    n_r = np.sqrt(cfg.sigma2_nr) * crandn(rng, n, cfg.M_r)
    z_rxr = crandn(rng, n, cfg.M_r)
    z_txr = crandn(rng, n, cfg.N_r)
    n_d = np.sqrt(cfg.sigma2_nd) * crandn(rng, n, cfg.M_d)
    z_rxd = crandn(rng, n, cfg.M_d)
    draws = {link: _channel_draws(ch, link, n, rng, csi) for link in LINKS}

    if distortion == "model":
        M_out = cv.solve_mout(cfg, ch, F, G)
        FF = F @ F.conj().T
        var_txs = np.broadcast_to(cfg.kappa_s * np.real(np.diag(FF)), (n, cfg.N_s))
        M_in = cv.min0(cfg, ch, F) + cv.si_terms(cfg, ch, M_out)
        var_rxr = cfg.beta_r * np.real(np.diag(M_in))
        var_txr = cfg.kappa_r * np.real(np.diag(M_out))
    elif distortion != "empirical":
        raise ValueError(f"unknown distortion mode {distortion!r}")

    u_s = s @ F.T
    if distortion == "empirical":
        var_txs = cfg.kappa_s * _running_power(u_s)
    e_txs = np.sqrt(var_txs) * z_txs
    x = u_s + e_txs

    Hsr_t, Hsr = draws["sr"]
    Hrr_t, Hrr = draws["rr"]
    Hrr_est = ch.H_est["rr"]
    if Hsr_t is not None:
        hx = np.einsum("tij,tj->ti", Hsr_t, x)
    else:
        hx = x @ Hsr.T
    base = hx + n_r

    m_out = np.zeros((n, cfg.N_r), dtype=complex)
    r_out = np.zeros((n, cfg.N_r), dtype=complex)
    m_in = np.zeros((n, cfg.M_r), dtype=complex)
    r_tilde = np.zeros((n, cfg.M_r), dtype=complex)
    e_txr = np.zeros((n, cfg.N_r), dtype=complex)
    e_rxr = np.zeros((n, cfg.M_r), dtype=complex)

    emp = distortion == "empirical"
    sum_mout = np.zeros(cfg.N_r)
    sum_min = np.zeros(cfg.M_r)
    limit = DIVERGENCE_FACTOR * cfg.P_r_max
    prev = np.zeros(cfg.M_r, dtype=complex)
    power_acc = 0.0
    for t in range(n):
        mo = G @ prev
        if emp:
            vt = cfg.kappa_r * (sum_mout / t if t else sum_mout)
        else:
            vt = var_txr
        et = np.sqrt(vt) * z_txr[t]
        ro = mo + et
        H = Hrr if Hrr_t is None else Hrr_t[t]
        mi = base[t] + H @ ro
        if emp:
            vr = cfg.beta_r * (sum_min / t if t else sum_min)
        else:
            vr = var_rxr
        er = np.sqrt(vr) * z_rxr[t]
        rt = mi + er - Hrr_est @ mo
        m_out[t], r_out[t], m_in[t], r_tilde[t] = mo, ro, mi, rt
        e_txr[t], e_rxr[t] = et, er
        if emp:
            sum_mout += np.abs(mo) ** 2
            sum_min += np.abs(mi) ** 2
        power_acc = 0.99 * power_acc + 0.01 * float(np.real(ro @ ro.conj()))
        if power_acc > limit or not np.isfinite(power_acc):
            raise RelayLoopUnstable(f"relay output power diverged at symbol {t}")
        prev = rt

    Hrd_t, Hrd = draws["rd"]
    Hsd_t, Hsd = draws["sd"]
    if Hrd_t is not None:
        u_d = (np.einsum("tij,tj->ti", Hrd_t, r_out)
               + np.einsum("tij,tj->ti", Hsd_t, x) + n_d)
    else:
        u_d = r_out @ Hrd.T + x @ Hsd.T + n_d
    if emp:
        var_rxd = cfg.beta_d * _running_power(u_d)
    else:
        var_rxd = cfg.beta_d * np.real(np.diag(cv.dest_input_cov(cfg, ch, F, M_out)))
    e_rxd = np.sqrt(var_rxd) * z_rxd
    y = u_d + e_rxd

    start = max(int(np.ceil(burn_in * n)), 1)
    s_hat = y @ C.conj()
    err = s[start - 1:n - 1] - s_hat[start:]
    result = ChainResult(
        r_out_cov=_cov(r_out[start:]),
        y_cov=_cov(y[start:]),
        mse_matrix=_cov(err),
        m_in_cov=_cov(m_in[start:]),
        r_in_tilde_cov=_cov(r_tilde[start:]),
        n_used=n - start,
    )
    if keep_samples:
        result.samples = dict(s=s, x=x, u_s=u_s, e_tx_s=e_txs, m_in=m_in, e_rx_r=e_rxr,
                              r_in_tilde=r_tilde, m_out=m_out, e_tx_r=e_txr, r_out=r_out,
                              u_d=u_d, e_rx_d=e_rxd, y=y)
    return result
