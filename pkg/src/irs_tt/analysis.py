"""Metrics, RIP probing, Monte Carlo trials and sweeps, log-log slope fits."""

import dataclasses
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import estimators as est
from .errors import ConfigError, DimensionMismatch, Diverged, IrsTTError, NonPositiveInput
from .system_model import (
    SystemConfig,
    apply_pilots,
    build_ground_truth,
    gen_pilots,
    measure,
    random_tt_channel,
)

SWEEPABLE = ("T", "UM", "LP", "N", "K", "noise_var", "D")
SOLVERS = ("als", "agd", "ttsvd")

# step sizes for D = 1..5 IRS hops (AGD)
DEFAULT_STEP_BY_D = {1: 0.2, 2: 1.0, 3: 5.0, 4: 10.0, 5: 15.0}


def derive_seed(master, role, *indices):
    """Independent 63-bit seed for a named stream; adding new roles never shifts old ones."""
    key = (zlib.crc32(role.encode()),) + tuple(int(i) for i in indices)
    state = np.random.SeedSequence(int(master), spawn_key=key).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


def recovery_error(B_hat, B_star):
    """``(||B_hat - B_star||_F, ||B_hat - B_star||_F / ||B_star||_F)``.

    The relative error is ``nan`` when ``B_star`` is zero.
    """
    B_hat = np.asarray(B_hat)
    B_star = np.asarray(B_star)
    if B_hat.shape != B_star.shape:
        raise DimensionMismatch(f"estimate {B_hat.shape} vs truth {B_star.shape}")
    err = float(np.linalg.norm((B_hat - B_star).ravel()))
    ref = float(np.linalg.norm(B_star.ravel()))
    return err, (err / ref if ref > 0 else math.nan)


@dataclass
class RipReport:
    samples: int
    rho: np.ndarray
    delta_hat: float
    quantiles: dict

    @property
    def median_dev(self):
        return self.quantiles[0.5]


def rip_probe(config, pilot_kind="gaussian", samples=1000, rng_seed=0, order=None,
              phase_policy="random-uniform"):
    """Monte Carlo lower estimate of the RIP constant of ``B -> B x_3 X``.

    One pilot matrix is drawn; each sample is a random unit-norm-factor
    TT channel tensor, and ``rho = ||B x_3 X||^2 / (T ||B||^2)``.
    """
    if samples < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    X = gen_pilots(config, pilot_kind, derive_seed(rng_seed, "rip-pilots"), order=order).X
    rho = np.empty(samples)
    for i in range(samples):
        tt = random_tt_channel(config, derive_seed(rng_seed, "rip-channels", i),
                               derive_seed(rng_seed, "rip-phases", i), phase_policy)
        B = build_ground_truth(tt)
        Y = apply_pilots(B, X)
        rho[i] = np.vdot(Y, Y).real / (config.T * np.vdot(B, B).real)
    dev = np.abs(rho - 1.0)
    qs = {q: float(np.quantile(dev, q)) for q in (0.5, 0.9, 0.99)}
    return RipReport(samples, rho, float(dev.max()), qs)


def slope_fit(points):
    """OLS fit of ``log y = slope * log x + intercept``; returns ``(slope, intercept, r2)``."""
    pts = list(points)
    if len(pts) < 2:
        raise ValueError("slope_fit needs at least two points")
    x = np.array([p[0] for p in pts], dtype=float)
    y = np.array([p[1] for p in pts], dtype=float)
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x * y)):
        raise NonPositiveInput("log-log fit needs finite positive x and y")
    lx, ly = np.log(x), np.log(y)
    dx = lx - lx.mean()
    sxx = float(dx @ dx)
    if sxx == 0:
        raise ValueError("slope_fit needs at least two distinct x values")
    slope = float(dx @ (ly - ly.mean())) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(resid @ resid) / ss_tot
    return slope, intercept, r2


# ---------------------------------------------------------------- trials


@dataclass
class TrialRecord:
    sweep_param: str
    value: object
    trial: int
    solver: str
    error_abs: float
    error_rel: float
    iterations: int
    wall_time: float
    seed: int
    status: str = "ok"
    final_loss: float = math.nan
    best_loss: float = math.nan

    @property
    def ok(self):
        return self.status == "ok"


def apply_sweep_value(config, param, value):
    """Copy of ``config`` with one swept parameter replaced."""
    if param == "T":
        return dataclasses.replace(config, T=int(value))
    if param == "UM":
        return dataclasses.replace(config, U=1, M=int(value))
    if param == "LP":
        return dataclasses.replace(config, L=int(value), P=1)
    if param == "N":
        return dataclasses.replace(config, irs_sizes=(int(value),) * config.D)
    if param == "K":
        return dataclasses.replace(config, K=int(value))
    if param == "noise_var":
        return dataclasses.replace(config, noise_var=float(value))
    if param == "D":
        return dataclasses.replace(config, irs_sizes=(config.irs_sizes[0],) * int(value))
    raise ConfigError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")


def run_trial(config, solver, pilot_kind="gaussian", phase_policy="random-uniform", opts=None,
              seed=0, pilot_order=None, sweep_param="", value=None):
    """Generate one scenario from ``seed``, run ``solver`` on it, score the estimate.

    Solver failures are reported in ``status`` with NaN errors, never raised.
    """
    if solver not in SOLVERS:
        raise ConfigError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    opts = opts or est.SolverOptions()
    tt = random_tt_channel(config, derive_seed(seed, "channels"), derive_seed(seed, "phases"),
                           phase_policy)
    B = build_ground_truth(tt)
    pilots = gen_pilots(config, pilot_kind, derive_seed(seed, "pilots"), order=pilot_order)
    Y = measure(B, pilots.X, config.noise_var, derive_seed(seed, "noise"))
    init = est.random_init(config.factor_shapes, derive_seed(seed, "init", opts.init_seed),
                           opts.init_scale)

    start = time.perf_counter()
    final = best = math.nan
    try:
        if solver == "als":
            res = est.als_single((init[1], init[0]), tt.phases, pilots, Y, opts)
        elif solver == "agd":
            res = est.agd_multi(init, tt.phases, pilots, Y, opts)
        if solver == "ttsvd":
            n = config.irs_sizes
            B_hat = est.ttsvd_baseline(Y, pilots, (n[-1], n[0]), opts.pinv_tol)
            iterations = 1
        else:
            B_hat = res.tensor()
            iterations = res.iterations
            final, best = float(res.loss_trace[-1]), float(np.min(res.loss_trace))
        status = "ok"
    except IrsTTError as exc:
        B_hat = None
        trace = getattr(exc, "loss_trace", None)
        iterations = len(trace) - 1 if trace is not None else 0
        status = "diverged" if isinstance(exc, Diverged) else f"error:{type(exc).__name__}"
    wall = time.perf_counter() - start

    if B_hat is None:
        err_abs = err_rel = math.nan
    else:
        err_abs, err_rel = recovery_error(B_hat, B)
    return TrialRecord(sweep_param, value, -1, solver, err_abs, err_rel, max(iterations, 0), wall,
                       int(seed), status, final, best)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepSpec:
    base: SystemConfig
    param: str
    values: tuple
    solvers: tuple = ("als",)
    trials: int = 20
    master_seed: int = 0
    pilot_kind: str = "gaussian"
    pilot_order: Optional[int] = None
    phase_policy: str = "random-uniform"
    solver_opts: dict = field(default_factory=dict)
    step_size_by_D: Optional[dict] = None

    def __post_init__(self):
        if self.param not in SWEEPABLE:
            raise ConfigError(f"cannot sweep {self.param!r}; choose from {SWEEPABLE}")
        self.values = tuple(self.values)
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError(f"sweep values must be strictly increasing, got {self.values}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        self.solvers = tuple(self.solvers)
        for s in self.solvers:
            if s not in SOLVERS:
                raise ConfigError(f"unknown solver {s!r}; choose from {SOLVERS}")

    def options_for(self, solver, config):
        opts = self.solver_opts.get(solver) or est.SolverOptions()
        if solver == "agd" and self.step_size_by_D and config.D in self.step_size_by_D:
            opts = dataclasses.replace(opts, step_size=self.step_size_by_D[config.D])
        return opts

    def jobs(self):
        for v in self.values:
            cfg = apply_sweep_value(self.base, self.param, v)
            for solver in self.solvers:
                for t in range(self.trials):
                    yield (cfg, solver, self.pilot_kind, self.phase_policy, self.options_for(solver, cfg),
                           derive_seed(self.master_seed, "trial", t), self.pilot_order, self.param, v, t)


def _run_job(job):
    *args, trial = job
    rec = run_trial(*args)
    rec.trial = trial
    return rec


@dataclass
class SweepResult:
    records: list
    aggregate: list


def _sort_key(rec):
    return (rec.value, rec.solver, rec.trial)


def aggregate_records(records):
    """Mean and quantiles of the errors per (value, solver); failed trials are counted, not averaged."""
    groups = {}
    for rec in sorted(records, key=_sort_key):
        groups.setdefault((rec.value, rec.solver), []).append(rec)
    rows = []
    for (value, solver), recs in groups.items():
        good = [r for r in recs if r.ok]
        abs_e = np.array([r.error_abs for r in good])
        rel_e = np.array([r.error_rel for r in good])
        row = {
            "sweep_param": recs[0].sweep_param,
            "value": value,
            "solver": solver,
            "trials": len(recs),
            "failed": len(recs) - len(good),
            "mean_error_abs": math.fsum(abs_e) / len(good) if good else math.nan,
            "mean_error_rel": math.fsum(rel_e) / len(good) if good else math.nan,
        }
        for q in (0.25, 0.5, 0.75):
            row[f"q{int(q * 100)}_error_abs"] = float(np.quantile(abs_e, q)) if good else math.nan
        rows.append(row)
    return rows


def run_sweep(spec, workers=1):
    """Run every (value, solver, trial) job; output order is canonical whatever ``workers`` is."""
    jobs = list(spec.jobs())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_job, jobs, chunksize=1))
    else:
        records = [_run_job(j) for j in jobs]
    records.sort(key=_sort_key)
    return SweepResult(records, aggregate_records(records))


def mean_curve(result, solver, metric="mean_error_abs"):
    """``[(value, mean error)]`` for one solver from a sweep aggregate."""
    return [(row["value"], row[metric]) for row in result.aggregate if row["solver"] == solver]
