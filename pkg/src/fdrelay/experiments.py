"""Monte Carlo orchestration: sweeps, model validation, convergence and
complexity reports, configuration loading and CSV output.

Every trial draws its channels from its own stream seeded by
``(master_seed, trial)``, so all methods and all sweep values of one trial
see the same channel estimates.
"""

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from . import baselines as bl
from . import covariance as cv
from . import pdd as optim
from . import qcqp
from .errors import FdRelayError, NoConvergence, NotPSDError, RelayLoopUnstable
from .simulation import simulate_chain
from .system import (SystemConfig, db_to_lin, default_config, desk_config, draw_channels,
                     make_rng)

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("kappa", "sigma_n2", "T", "dims", "rho_rr")
BASE_METHODS = ("aware", "unaware", "dr_high", "dr_med", "dr_low", "hd", "rate_aware")
RXOPT_SUFFIX = "_rxopt"
RECORD_COLUMNS = ("trial", "sweep_param", "sweep_value", "method", "mse", "rate",
                  "outer_iters", "total_inner_iters", "final_zeta", "wall_ms", "status")
SUMMARY_COLUMNS = ("sweep_param", "sweep_value", "method", "n", "n_ok", "mse_median",
                   "mse_q1", "mse_q3", "rate_median", "rate_q1", "rate_q3")
DESK_TRIALS = 20
FULL_SCALE_TRIALS = 100


def valid_method(name):
    if name in BASE_METHODS:
        return True
    if name.endswith(RXOPT_SUFFIX):
        base = name[: -len(RXOPT_SUFFIX)]
        return base in BASE_METHODS and base not in ("hd", "rate_aware")
    return False


def apply_sweep_value(cfg, param, value):
    """Configuration at one sweep point.

    ``kappa`` (all four coefficients) and ``rho_rr`` are given in dB,
    ``sigma_n2`` (both noise powers) in dBm, ``T`` as a count and ``dims`` as
    the common antenna number (``d`` is capped at it).
    """
    if param == "kappa":
        return cfg.with_kappa(float(db_to_lin(value)))
    if param == "sigma_n2":
        s = float(db_to_lin(value))
        return cfg.replace(sigma2_nr=s, sigma2_nd=s)
    if param == "T":
        return cfg.replace(T=int(value))
    if param == "dims":
        n = int(value)
        return cfg.with_dims(n, d=min(cfg.d, n))
    if param == "rho_rr":
        return cfg.replace(rho_rr=float(db_to_lin(value)))
    raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")


@dataclass
class ExperimentSpec:
    """A Monte Carlo sweep: one parameter, several methods, shared channels per trial."""

    base: SystemConfig = field(default_factory=desk_config)
    sweep_param: str = "kappa"
    sweep_values: tuple = (-40.0,)
    methods: tuple = ("aware",)
    trials: int = DESK_TRIALS
    master_seed: int = 0
    pdd: optim.PddConfig = field(default_factory=optim.PddConfig)
    hd_accounting: str = "rate_equivalent"
    workers: int = 1

    def __post_init__(self):
        self.sweep_values = tuple(self.sweep_values)
        self.methods = tuple(self.methods)
        if self.sweep_param not in SWEEP_PARAMS:
            raise ValueError(f"unknown sweep parameter {self.sweep_param!r}")
        if not self.sweep_values:
            raise ValueError("sweep_values must be nonempty")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        bad = [m for m in self.methods if not valid_method(m)]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        if self.hd_accounting not in bl.HD_ACCOUNTING:
            raise ValueError(f"hd_accounting must be one of {bl.HD_ACCOUNTING}")

    def trial_seed(self, trial):
        return [int(self.master_seed), int(trial)]


@dataclass
class ExperimentRecord:
    trial: int
    sweep_param: str
    sweep_value: float
    method: str
    mse: float
    rate: float
    outer_iters: int
    total_inner_iters: int
    final_zeta: float
    wall_ms: float
    status: str = "ok"


def _trace_stats(trace):
    if trace is None:
        return 0, 0, 0.0
    return trace.outer_iters, trace.total_inner_iters, float(trace.final_zeta)


def _design_method(cfg, ch, base, pdd_cfg, hd_accounting):
    """(design, trace, status, hd_score) of one base method."""
    status = "ok"
    hd_score = None
    if base == "aware":
        runner = optim.run_algorithm1
    elif base == "rate_aware":
        runner = optim.run_rate_maximization
    else:
        runner = None
    if runner is not None:
        try:
            design, trace = runner(cfg, ch, pdd_cfg)
        except NoConvergence as exc:
            design, trace, status = exc.design, exc.trace, "no_convergence"
        return design, trace, status, hd_score
    if base == "unaware":
        design, trace = bl.design_unaware(cfg, ch, pdd_cfg, return_trace=True)
    elif base.startswith("dr_"):
        design, trace = bl.design_dr(cfg, ch, base[3:], pdd_cfg, return_trace=True)
    elif base == "hd":
        design, hd_score, trace = bl.design_hd(cfg, ch, pdd_cfg, accounting=hd_accounting,
                                               return_trace=True)
    else:
        raise ValueError(f"unknown method {base!r}")
    if not trace.converged:
        status = "no_convergence"
    return design, trace, status, hd_score


def evaluate_method(cfg, ch, method, pdd_cfg=None, hd_accounting="rate_equivalent", cache=None):
    """Design with ``method`` and score it under the true model.

    Returns ``(mse, rate, trace, status, design)``. ``rate`` is the
    achievable rate of ``(F, G)``; for the half-duplex method it is halved
    and ``mse`` follows ``hd_accounting``. ``cache`` (a dict) shares base
    designs between a method and its ``_rxopt`` variant on the same channels.
    """
    pdd_cfg = optim.PddConfig() if pdd_cfg is None else pdd_cfg
    rxopt = method.endswith(RXOPT_SUFFIX)
    base = method[: -len(RXOPT_SUFFIX)] if rxopt else method
    if cache is not None and base in cache:
        design, trace, status, hd_score = cache[base]
    else:
        design, trace, status, hd_score = _design_method(cfg, ch, base, pdd_cfg, hd_accounting)
        if cache is not None:
            cache[base] = (design, trace, status, hd_score)
    if base == "hd":
        return hd_score, bl.hd_rate(cfg, ch, design), trace, status, design
    if rxopt:
        design = bl.apply_rxopt(cfg, ch, design)
    mse = cv.mse(cfg, ch, design)
    rate = cv.achievable_rate(cfg, ch, design.F, design.G)
    return mse, rate, trace, status, design


def _run_trial(spec, trial):
    records = []
    for value in spec.sweep_values:
        cfg = apply_sweep_value(spec.base, spec.sweep_param, value)
        ch = draw_channels(cfg, make_rng(spec.trial_seed(trial)))
        cache = {}
        for method in spec.methods:
            t0 = time.perf_counter()
            try:
                mse, rate, trace, status, _ = evaluate_method(cfg, ch, method, spec.pdd,
                                                              spec.hd_accounting, cache)
            except RelayLoopUnstable as exc:
                logger.warning("trial %d %s=%s %s: %s", trial, spec.sweep_param, value, method, exc)
                mse = rate = float("nan")
                trace, status = None, "unstable"
            except (FdRelayError, NotPSDError, np.linalg.LinAlgError) as exc:
                logger.warning("trial %d %s=%s %s: %s", trial, spec.sweep_param, value, method, exc)
                mse = rate = float("nan")
                trace, status = None, "error"
            wall = 1e3 * (time.perf_counter() - t0)
            outer, inner, zeta = _trace_stats(trace)
            if status == "ok" and zeta >= spec.pdd.zeta_th:
                status = "no_convergence"
            records.append(ExperimentRecord(trial, spec.sweep_param, float(value), method,
                                            float(mse), float(rate), outer, inner, zeta,
                                            wall, status))
    return records


def run_sweep(spec, out_dir=None):
    """Run every (trial, sweep value, method) and optionally write the CSV files.

    Records come back ordered by trial, then sweep value, then method,
    whatever the number of workers. Failed trials are recorded with their
    status and never abort the sweep.
    """
    trials = range(int(spec.trials))
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            chunks = list(pool.map(_run_trial, [spec] * len(trials), trials))
    else:
        chunks = [_run_trial(spec, t) for t in trials]
    records = [r for chunk in chunks for r in chunk]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_records(records, os.path.join(out_dir, "records.csv"))
        write_summary(summarize(records), os.path.join(out_dir, "summary.csv"))
    return records


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            row = asdict(r)
            w.writerow([_fmt(row[c]) for c in RECORD_COLUMNS])


def read_records(path):
    types = {f.name: f.type for f in fields(ExperimentRecord)}
    with open(path, newline="") as fh:
        return [ExperimentRecord(**{k: types[k](v) for k, v in row.items()})
                for row in csv.DictReader(fh)]


def summarize(records):
    """Median and quartiles of MSE and rate per (sweep value, method).

    Statistics use every record with a finite MSE (designs that stopped
    before the violation threshold are still feasible designs); ``n_ok``
    counts the converged ones.
    """
    groups = {}
    for r in records:
        groups.setdefault((r.sweep_param, r.sweep_value, r.method), []).append(r)
    rows = []
    for (param, value, method), rs in groups.items():
        mse = np.array([r.mse for r in rs if np.isfinite(r.mse)])
        rate = np.array([r.rate for r in rs if np.isfinite(r.rate)])
        q = np.percentile(mse, [50, 25, 75]) if mse.size else [np.nan] * 3
        qr = np.percentile(rate, [50, 25, 75]) if rate.size else [np.nan] * 3
        rows.append(dict(sweep_param=param, sweep_value=value, method=method, n=len(rs),
                         n_ok=sum(r.status == "ok" for r in rs),
                         mse_median=float(q[0]), mse_q1=float(q[1]), mse_q3=float(q[2]),
                         rate_median=float(qr[0]), rate_q1=float(qr[1]), rate_q3=float(qr[2])))
    return rows


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class ValidationReport:
    """Relative Frobenius errors of the closed forms against the simulator."""

    err_r_out: float
    err_y: float
    err_mse: float
    n_sym: int
    wall_s: float

    def max_error(self):
        return max(self.err_r_out, self.err_y, self.err_mse)


def _rel(A, B):
    return float(np.linalg.norm(A - B) / np.linalg.norm(B))


def validate(cfg, channels, design, n_sym=100_000, rng=0, csi="ensemble"):
    """Simulate the chain and compare relay output, received and error covariances."""
    t0 = time.perf_counter()
    sim = simulate_chain(cfg, channels, design.F, design.G, design.C, n_sym, rng, csi=csi)
    M_out = cv.solve_mout(cfg, channels, design.F, design.G)
    r_out = cv.relay_tx_cov(cfg, M_out)
    y = cv.m2(cfg, channels, design.F, M_out)
    E = cv.mse_matrix(cfg, channels, design.F, design.G, design.C, M_out)
    return ValidationReport(_rel(sim.r_out_cov, r_out), _rel(sim.y_cov, y),
                            _rel(sim.mse_matrix, E), int(n_sym), time.perf_counter() - t0)


def convergence_report(cfg, channels, pdd_cfg=None, out_dir=None, k=0):
    """Run the MSE design and write ``trace_<k>.csv`` plus ``trace_<k>_inner.csv``.

    Returns the :class:`~fdrelay.pdd.ConvergenceTrace`; a run that stops at
    ``max_outer`` still returns its trace.
    """
    try:
        _, trace = optim.run_algorithm1(cfg, channels, pdd_cfg)
    except NoConvergence as exc:
        trace = exc.trace
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        trace.to_csv(os.path.join(out_dir, f"trace_{k}.csv"))
        trace.inner_to_csv(os.path.join(out_dir, f"trace_{k}_inner.csv"))
    return trace


def complexity_report(cfg, digits=1.0):
    """Problem sizes and per-update operation bounds of the two block updates.

    For the second block the single-constraint count is kept as stated for
    the method while all three constraint dimensions are listed, so the
    mismatch stays visible.
    """
    rows = []
    for name, dims in (("B1", qcqp.b1_dims(cfg)), ("B2", qcqp.b2_dims(cfg))):
        N, M, l = dims
        rows.append(dict(block=name, N_tilde=N, M_tilde=M, l=";".join(str(x) for x in l),
                         bound=qcqp.complexity_bound(N, M, l, digits)))
    return rows


def format_table(rows):
    cols = list(rows[0])
    width = {c: max(len(c), *(len(f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c]))
                              for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join((f"{r[c]:.4g}" if isinstance(r[c], float) else str(r[c])).ljust(width[c])
                               for c in cols))
    return "\n".join(lines)


# --- configuration files -------------------------------------------------

def _convert_db(section, valid):
    out = {}
    for key, value in (section or {}).items():
        if key == "kappa_db":
            lin = float(db_to_lin(value))
            out.update(kappa_s=lin, kappa_r=lin, beta_r=lin, beta_d=lin)
            continue
        if key == "sigma2_dbm":
            lin = float(db_to_lin(value))
            out.update(sigma2_nr=lin, sigma2_nd=lin)
            continue
        for suffix in ("_dbm", "_db"):
            if key.endswith(suffix) and key[: -len(suffix)] in valid:
                out[key[: -len(suffix)]] = float(db_to_lin(value))
                break
        else:
            if key not in valid:
                raise KeyError(f"unknown configuration key {key!r}")
            out[key] = value
    return out


def load_config(path=None, full_scale=False):
    """Read an experiment configuration file.

    The file has optional ``system``, ``pdd`` and ``experiment`` sections.
    Keys mirror the :class:`SystemConfig` / :class:`PddConfig` field names;
    a ``_db`` (or ``_dbm``) suffix marks a value in decibels that is
    converted to linear units, and ``kappa_db`` / ``sigma2_dbm`` set all
    distortion coefficients / both noise powers at once. Returns an
    :class:`ExperimentSpec`.
    """
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    unknown = set(data) - {"system", "pdd", "experiment"}
    if unknown:
        raise KeyError(f"unknown configuration sections {sorted(unknown)}")
    base = default_config() if full_scale else desk_config()
    base = base.replace(**_convert_db(data.get("system"), set(SystemConfig.field_names())))
    pdd_fields = {f.name for f in fields(optim.PddConfig)}
    pdd_cfg = optim.PddConfig(**_convert_db(data.get("pdd"), pdd_fields))
    exp = dict(data.get("experiment") or {})
    sweep = exp.pop("sweep", {}) or {}
    trials = exp.pop("trials", FULL_SCALE_TRIALS if full_scale else DESK_TRIALS)
    allowed = {"methods", "master_seed", "hd_accounting", "workers"}
    extra = set(exp) - allowed
    if extra:
        raise KeyError(f"unknown experiment keys {sorted(extra)}")
    kw = {k: (tuple(v) if k == "methods" else v) for k, v in exp.items()}
    return ExperimentSpec(base=base, sweep_param=sweep.get("param", "kappa"),
                          sweep_values=tuple(sweep.get("values", (-40.0,))),
                          trials=int(trials), pdd=pdd_cfg, **kw)
