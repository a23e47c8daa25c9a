"""System parameters, unit conversions and channel/CSI-error generation.

Power-like quantities are stored in milliwatts (linear) throughout; path
gains and distortion coefficients are dimensionless linear ratios. Only
ratios of powers enter the MSE, so the milliwatt convention is a choice of
scale, not of physics.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import DimensionError
from .linalg import crandn, diag_part, herm_sqrt

LINKS = ("sr", "rd", "sd", "rr")


def db_to_lin(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


def lin_to_db(x):
    return 10.0 * np.log10(x)


def dbm_to_mw(x_dbm):
    return db_to_lin(x_dbm)


def dbm_to_w(x_dbm):
    return 10.0 ** ((np.asarray(x_dbm, dtype=float) - 30.0) / 10.0)


def make_rng(seed):
    """The package's random stream: numpy ``Generator`` over PCG64.

    ``seed`` is an int (64-bit) or a sequence of ints fed to
    ``numpy.random.SeedSequence``; equal seeds give bit-identical streams.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SystemConfig:
    """Physical and design parameters of the relay link (linear units, mW)."""

    N_s: int = 4
    N_r: int = 4
    M_r: int = 4
    M_d: int = 4
    d: int = 2
    P_s_max: float = 1.0
    P_r_max: float = 1.0
    sigma2_nr: float = 1e-4
    sigma2_nd: float = 1e-4
    kappa_s: float = 1e-4
    kappa_r: float = 1e-4
    beta_r: float = 1e-4
    beta_d: float = 1e-4
    rho_sr: float = 1e-3
    rho_rd: float = 1e-3
    rho_sd: float = 1e-3
    rho_rr: float = 1.0
    K_R: float = 10.0
    T: float = 10
    W: float = 1.0

    def __post_init__(self):
        for name in ("N_s", "N_r", "M_r", "M_d", "d"):
            if int(getattr(self, name)) < 1:
                raise DimensionError(f"{name} must be >= 1")
        if self.d > min(self.N_s, self.M_r, self.N_r, self.M_d):
            raise DimensionError("d must not exceed min(N_s, M_r, N_r, M_d)")
        for name in ("P_s_max", "P_r_max", "sigma2_nr", "sigma2_nd",
                     "rho_sr", "rho_rd", "rho_sd", "rho_rr", "W"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("kappa_s", "kappa_r", "beta_r", "beta_d", "K_R"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.T >= 1:
            raise ValueError("T must be >= 1")

    def replace(self, **changes):
        return replace(self, **changes)

    def with_kappa(self, kappa):
        """All four distortion coefficients set to ``kappa``."""
        return replace(self, kappa_s=kappa, kappa_r=kappa, beta_r=kappa, beta_d=kappa)

    def with_dims(self, n, m=None, d=None):
        m = n if m is None else m
        return replace(self, N_s=n, N_r=n, M_r=m, M_d=m, d=self.d if d is None else d)

    def ideal_hardware(self):
        return self.with_kappa(0.0)

    def link_params(self, link):
        """(kappa_tx, beta_rx, sigma2_rx, P_tx) of a link."""
        if link == "sr":
            return self.kappa_s, self.beta_r, self.sigma2_nr, self.P_s_max
        if link == "sd":
            return self.kappa_s, self.beta_d, self.sigma2_nd, self.P_s_max
        if link == "rd":
            return self.kappa_r, self.beta_d, self.sigma2_nd, self.P_r_max
        if link == "rr":
            return self.kappa_r, self.beta_r, self.sigma2_nr, self.P_r_max
        raise KeyError(link)

    def link_shape(self, link):
        return {"sr": (self.M_r, self.N_s), "rd": (self.M_d, self.N_r),
                "sd": (self.M_d, self.N_s), "rr": (self.M_r, self.N_r)}[link]

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def default_config():
    """Default setup: 4x4 antennas, d=2, -40 dB impairments, -40 dBm noise."""
    kappa = float(db_to_lin(-40.0))
    sigma2 = float(dbm_to_mw(-40.0))
    pmax = float(dbm_to_mw(0.0))
    path = float(db_to_lin(-30.0))
    return SystemConfig(
        N_s=4, N_r=4, M_r=4, M_d=4, d=2,
        P_s_max=pmax, P_r_max=pmax,
        sigma2_nr=sigma2, sigma2_nd=sigma2,
        kappa_s=kappa, kappa_r=kappa, beta_r=kappa, beta_d=kappa,
        rho_sr=path, rho_rd=path, rho_sd=path, rho_rr=float(db_to_lin(0.0)),
        K_R=10.0, T=10, W=1.0,
    )


def desk_config(**changes):
    """Reduced 2x2, d=1 variant of the defaults used for fast experiments."""
    return default_config().replace(N_s=2, N_r=2, M_r=2, M_d=2, d=1).replace(**changes)


@dataclass
class ChannelSet:
    """Estimated and true channels plus CSI-error covariances per link.

    ``H_est[link]`` is what the designs see; ``H_true = H_est + Delta`` with
    ``Delta = C_rx^{1/2} Delta~ C_tx^{1/2}``.
    """

    H_est: dict
    H_true: dict
    C_rx: dict
    C_tx: dict
    meta: dict = field(default_factory=dict)

    def copy(self):
        return ChannelSet({k: v.copy() for k, v in self.H_est.items()},
                          {k: v.copy() for k, v in self.H_true.items()},
                          {k: v.copy() for k, v in self.C_rx.items()},
                          {k: v.copy() for k, v in self.C_tx.items()},
                          dict(self.meta))

    def without_csi_error(self):
        """Same estimates, zero error covariances, true channels = estimates."""
        return ChannelSet({k: v.copy() for k, v in self.H_est.items()},
                          {k: v.copy() for k, v in self.H_est.items()},
                          {k: np.zeros_like(v) for k, v in self.C_rx.items()},
                          {k: np.zeros_like(v) for k, v in self.C_tx.items()},
                          dict(self.meta))

    def without_si(self):
        """Self-interference channel (and its CSI error) removed."""
        out = self.copy()
        out.H_est["rr"] = np.zeros_like(out.H_est["rr"])
        out.H_true["rr"] = np.zeros_like(out.H_true["rr"])
        out.C_rx["rr"] = np.zeros_like(out.C_rx["rr"])
        out.C_tx["rr"] = np.zeros_like(out.C_tx["rr"])
        return out

    def error(self, link):
        return self.H_true[link] - self.H_est[link]


def csi_error_cov(cfg, H_est, link):
    """Receive/transmit CSI-error correlation of one link.

    ``C_rx = (sigma2/P I + (kappa+beta)/N (H H^H + diag(H H^H))) / (2T)`` and
    ``C_tx = I``; with equal coefficients ``kappa + beta = 2 kappa``.
    """
    H_est = np.asarray(H_est)
    M, N = H_est.shape
    kappa_tx, beta_rx, sigma2, ptx = cfg.link_params(link)
    HH = H_est @ H_est.conj().T
    C_rx = (sigma2 / ptx * np.eye(M) + (kappa_tx + beta_rx) / N * (HH + diag_part(HH))) / (2.0 * cfg.T)
    return 0.5 * (C_rx + C_rx.conj().T), np.eye(N, dtype=complex)


def draw_estimates(cfg, rng):
    """Channel estimates: Rayleigh for sr/rd/sd, Rician for the SI link."""
    H = {}
    for link, rho in (("sr", cfg.rho_sr), ("rd", cfg.rho_rd), ("sd", cfg.rho_sd)):
        H[link] = np.sqrt(rho) * crandn(rng, *cfg.link_shape(link))
    shape = cfg.link_shape("rr")
    K = cfg.K_R
    los = np.sqrt(cfg.rho_rr * K / (1.0 + K)) * np.ones(shape)
    H["rr"] = los + np.sqrt(cfg.rho_rr / (1.0 + K)) * crandn(rng, *shape)
    return H


def draw_channels(cfg, rng):
    """Draw one channel realization.

    The estimates are drawn first, then an independent CSI error per link
    is added, so the estimates are identical across configurations that
    only differ in ``T`` or the impairment levels.
    """
    rng = make_rng(rng)
    H_est = draw_estimates(cfg, rng)
    white = {link: crandn(rng, *cfg.link_shape(link)) for link in LINKS}
    H_true, C_rx, C_tx = {}, {}, {}
    for link in LINKS:
        C_rx[link], C_tx[link] = csi_error_cov(cfg, H_est[link], link)
        delta = herm_sqrt(C_rx[link]) @ white[link] @ herm_sqrt(C_tx[link])
        H_true[link] = H_est[link] + delta
    return ChannelSet(H_est, H_true, C_rx, C_tx)


def channels_from_estimates(cfg, H_est, rng=None):
    """Build a ChannelSet around given estimates (zero error if ``rng`` is None)."""
    H_est = {k: np.asarray(v, dtype=complex) for k, v in H_est.items()}
    H_true, C_rx, C_tx = {}, {}, {}
    for link in LINKS:
        C_rx[link], C_tx[link] = csi_error_cov(cfg, H_est[link], link)
        if rng is None:
            H_true[link] = H_est[link].copy()
        else:
            w = crandn(rng, *H_est[link].shape)
            H_true[link] = H_est[link] + herm_sqrt(C_rx[link]) @ w @ herm_sqrt(C_tx[link])
    return ChannelSet(H_est, H_true, C_rx, C_tx)


def draw_multiuser_channels(cfg, n_users, rng):
    """Per-user channel sets sharing the source-relay and SI links."""
    rng = make_rng(rng)
    base = draw_channels(cfg, rng)
    users = [base]
    for _ in range(1, n_users):
        ch = draw_channels(cfg, rng)
        for link in ("sr", "rr"):
            ch.H_est[link] = base.H_est[link]
            ch.H_true[link] = base.H_true[link]
            ch.C_rx[link] = base.C_rx[link]
            ch.C_tx[link] = base.C_tx[link]
        users.append(ch)
    return users
