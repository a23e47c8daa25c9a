"""Comparison designs: half-duplex, impairment-unaware, dynamic-range-threshold
designs and the independent optimal receiver.

Every design function returns plain ``(F, G, C)`` variables; evaluation is
always done by the caller with :mod:`fdrelay.covariance` and the true
configuration, so a baseline's internal model can never leak into its score.
"""

import numpy as np

from . import covariance as cv
from . import pdd
from .errors import NoConvergence

# grade -> (P_th / sigma_n^2, sigma_si^2 / sigma_n^2)
DR_GRADES = {
    "high": (1e2, 0.1),
    "med": (1e4, 1.0),
    "low": (1e6, 10.0),
}

HD_ACCOUNTING = ("rate_equivalent", "raw")


def _run_or_fallback(runner, *args, **kwargs):
    """Run a PDD design and keep the returned design even if it stopped early."""
    try:
        design, trace = runner(*args, **kwargs)
    except NoConvergence as exc:
        return exc.design, exc.trace
    return design, trace


def design_unaware(cfg, channels, pdd_cfg=None, rng=None, return_trace=False):
    """Design that ignores all hardware impairments and CSI errors.

    The optimizer sees ``kappa = beta = 0`` and perfect (estimated) channels;
    the result is then shrunk along ``G`` until it meets the true power
    constraints. The receiver is the one the unaware model prescribes.
    """
    model_cfg = cfg.with_kappa(0.0)
    model_ch = channels.without_csi_error()
    design, trace = _run_or_fallback(pdd.run_algorithm1, model_cfg, model_ch, pdd_cfg)
    design = cv.scale_relay_to_feasible(cfg, channels, design)
    return (design, trace) if return_trace else design


def dr_parameters(cfg, grade):
    """``(P_th, sigma_si^2)`` of a dynamic-range grade, relative to the relay noise."""
    key = str(grade).lower()
    if key not in DR_GRADES:
        raise ValueError(f"unknown DR grade {grade!r}; expected one of {sorted(DR_GRADES)}")
    p_mult, s_mult = DR_GRADES[key]
    return p_mult * cfg.sigma2_nr, s_mult * cfg.sigma2_nr


def design_dr(cfg, channels, grade, pdd_cfg=None, rng=None, return_trace=False):
    """Impairment-unaware design with a received-SI cap and inflated relay noise.

    The design model has no distortion and no CSI error, adds the residual SI
    floor ``sigma_si^2`` to the relay noise and caps the received SI power
    ``tr(H_rr M_out H_rr^H) <= P_th``. The output is shrunk to meet the true
    power constraints (the cap is kept during the shrinking).
    """
    P_th, sigma2_si = dr_parameters(cfg, grade)
    model_cfg = cfg.with_kappa(0.0).replace(sigma2_nr=cfg.sigma2_nr + sigma2_si)
    model_ch = channels.without_csi_error()
    design, trace = _run_or_fallback(pdd.run_with_si_cap, model_cfg, model_ch, P_th, pdd_cfg)

    def cap(c, h, F, G, M_out):
        return pdd.received_si_power(channels, M_out) <= P_th

    design = cv.scale_relay_to_feasible(cfg, channels, design, extra=cap)
    return (design, trace) if return_trace else design


def apply_rxopt(cfg, channels, design):
    """Replace ``C`` by the MMSE receiver of the true model; ``F`` and ``G`` are kept."""
    C = cv.mmse_receiver(cfg, channels, design.F, design.G)
    return cv.DesignVariables(design.F.copy(), design.G.copy(), C)


def hd_mse(cfg, channels, design, accounting="rate_equivalent"):
    """MSE of a half-duplex design (``H_rr = 0``).

    ``"raw"`` returns ``tr(E)``. ``"rate_equivalent"`` charges the two time
    slots: each stream must carry twice the rate, which for an MMSE
    eigen-error ``e`` (rate ``-log2 e``) is the error ``sqrt(e)`` of a
    full-duplex stream with the same net rate, so the score is
    ``tr(E^{1/2})``.
    """
    if accounting not in HD_ACCOUNTING:
        raise ValueError(f"accounting must be one of {HD_ACCOUNTING}")
    ch = channels.without_si()
    E = cv.mse_matrix(cfg, ch, design.F, design.G, design.C)
    if accounting == "raw":
        return float(np.real(np.trace(E)))
    ev = np.clip(np.linalg.eigvalsh(E), 0.0, None)
    return float(np.sum(np.sqrt(ev)))


def hd_rate(cfg, channels, design):
    """Half-duplex rate: the link rate with ``H_rr = 0``, halved for the two slots."""
    ch = channels.without_si()
    return 0.5 * cv.achievable_rate(cfg, ch, design.F, design.G)


def design_hd(cfg, channels, pdd_cfg=None, rng=None, accounting="rate_equivalent",
              return_trace=False):
    """Aware design of the half-duplex link. Returns ``(design, hd_mse)``.

    The SI channel and its CSI error are removed in design and evaluation;
    all transmit and receive distortions are kept.
    """
    ch = channels.without_si()
    design, trace = _run_or_fallback(pdd.run_algorithm1, cfg, ch, pdd_cfg)
    score = hd_mse(cfg, channels, design, accounting)
    if return_trace:
        return design, score, trace
    return design, score
