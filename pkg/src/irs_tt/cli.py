"""Command-line entry point: ``irs-tt {sweep,rip,gradcheck,demo}``.

Configs are flat ``key = value`` files; ``#`` starts a comment. Sources
are applied in order: built-in defaults, the ``--config`` file, then
``--seed``/``--trials``/``--out`` and ``--set KEY=VALUE`` flags.
Relative output paths are placed under ``$IRS_TT_OUTPUT_DIR`` when it is set.
"""

import argparse
import csv
import dataclasses
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, estimators as est
from .errors import IrsTTError, ParseError, ValidationError
from .system_model import (
    PHASE_POLICIES,
    SystemConfig,
    build_phase_tensor,
    gen_pilots,
    measure,
    parse_pilot_kind,
    build_ground_truth,
    chain_from,
    random_tt_channel,
)

OUTPUT_DIR_ENV = "IRS_TT_OUTPUT_DIR"

CSV_HEADER = ["sweep_param", "value", "trial", "solver", "error_abs", "error_rel",
              "iterations", "wall_time_ms", "seed", "status"]
AGG_HEADER = ["sweep_param", "value", "solver", "trials", "failed", "mean_error_abs",
              "mean_error_rel", "q25_error_abs", "q50_error_abs", "q75_error_abs",
              "mean_final_loss", "mean_best_loss"]


def _int(text):
    return int(text)


def _float(text):
    return float(text)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _str_list(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _str(text):
    return text.strip()


def _step(text):
    return "auto" if text.strip() == "auto" else float(text)


# key -> (parser, default, description); the table doubles as the schema docs
SCHEMA = {
    "L": (_int, 10, "BS antennas"),
    "P": (_int, 1, "BS receive time slots per block (LP = L*P)"),
    "U": (_int, 1, "users"),
    "M": (_int, 10, "antennas per user (UM = U*M)"),
    "LP": (_int, None, "shorthand: sets L=LP, P=1"),
    "UM": (_int, None, "shorthand: sets U=1, M=UM"),
    "N": (_int, 10, "elements per IRS"),
    "D": (_int, 1, "number of IRS hops"),
    "irs_sizes": (_int_list, None, "explicit per-hop sizes, overrides N and D"),
    "K": (_int, 10, "phase blocks"),
    "T": (_int, 100, "pilot time slots"),
    "noise_var": (_float, 1e-6, "noise variance gamma^2"),
    "pilot": (_str, "gaussian", "gaussian|bernoulli|psk<order>|qam<order>|dft"),
    "phase_policy": (_str, "random-uniform", "|".join(PHASE_POLICIES)),
    "solvers": (_str_list, ("als",), "comma list of als,agd,ttsvd"),
    "sweep_param": (_str, "T", "one of " + ",".join(analysis.SWEEPABLE)),
    "sweep_values": (_float_list, (100.0,), "comma list, strictly increasing"),
    "trials": (_int, 20, "Monte Carlo trials per point"),
    "seed": (_int, 0, "master seed"),
    "workers": (_int, 1, "worker processes for sweeps"),
    "als_iters": (_int, 100, "ALS iterations"),
    "agd_iters": (_int, 100000, "AGD sweep budget"),
    "agd_step": (_step, "auto", "AGD step size, or auto for the per-D default"),
    "stop_tol": (_float, 0.0, "relative loss-change stop (0 runs the full budget)"),
    "pinv_tol": (_float, 1e-12, "relative singular-value cutoff for pseudoinverses"),
    "rank_limits": (_int_list, (), "per-factor rank caps B_0..B_D (empty = none)"),
    "init_scale": (_str, "unit", "unit|raw initial factor scaling"),
    "backend": (_str, "auto", "AGD kernel backend: auto|cython|python"),
    "timing": (_bool, False, "write measured wall_time_ms (breaks byte determinism)"),
    "rip_samples": (_int, 1000, "random TT tensors per RIP probe"),
    "gradcheck_step": (_float, 1e-5, "finite-difference step"),
    "gradcheck_tol": (_float, 1e-6, "max relative gradient error"),
    "out": (_str, "", "output CSV path"),
}


@dataclass
class RunConfig:
    values: dict
    system: SystemConfig
    pilot_kind: str
    pilot_order: object
    out: str
    verbose: bool = True

    def __getitem__(self, key):
        return self.values[key]

    def solver_options(self, solver):
        v = self.values
        common = dict(pinv_tol=v["pinv_tol"], rank_limits=v["rank_limits"] or None,
                      stop_tol=v["stop_tol"], init_scale=v["init_scale"],
                      backend=None if v["backend"] == "auto" else v["backend"])
        if solver == "agd":
            step = v["agd_step"]
            if step == "auto":
                step = analysis.DEFAULT_STEP_BY_D.get(self.system.D, 0.2)
            return est.SolverOptions(max_iters=v["agd_iters"], step_size=step, **common)
        return est.SolverOptions(max_iters=v["als_iters"], **common)

    def sweep_spec(self):
        v = self.values
        param = v["sweep_param"]
        values = tuple(_sweep_value(param, x) for x in v["sweep_values"])
        return analysis.SweepSpec(
            base=self.system, param=param, values=values, solvers=v["solvers"],
            trials=v["trials"], master_seed=v["seed"], pilot_kind=self.pilot_kind,
            pilot_order=self.pilot_order, phase_policy=v["phase_policy"],
            solver_opts={s: self.solver_options(s) for s in v["solvers"]},
            step_size_by_D=analysis.DEFAULT_STEP_BY_D if v["agd_step"] == "auto" else None,
        )


def _sweep_value(param, x):
    if param == "noise_var":
        return float(x)
    if x != int(x):
        raise ValidationError("sweep_values", f"{param} needs integer values, got {x}")
    return int(x)


def parse_pairs(text, source="config"):
    """Parse flat ``key = value`` text into an ordered list of ``(key, raw, line)``."""
    pairs = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key = value in {source}, got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"empty key in {source}", line=lineno)
        if key not in SCHEMA:
            raise ParseError(f"unknown key in {source}", line=lineno, key=key)
        if key in seen:
            raise ParseError(f"duplicate key (first on line {seen[key]})", line=lineno, key=key)
        seen[key] = lineno
        pairs.append((key, value, lineno))
    return pairs


def parse_config(text="", overrides=(), verbose=True):
    """Build a validated :class:`RunConfig` from config text and ``KEY=VALUE`` overrides.

    Overrides win over the file; both are checked against :data:`SCHEMA`.
    """
    raw = {}
    lines = {}
    for key, value, lineno in parse_pairs(text):
        raw[key] = value
        lines[key] = lineno
    for item in overrides:
        if "=" not in item:
            raise ParseError(f"override must be KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in SCHEMA:
            raise ParseError("unknown key in override", key=key)
        raw[key] = value
        lines.pop(key, None)

    values = {k: spec[1] for k, spec in SCHEMA.items()}
    for key, text_value in raw.items():
        try:
            values[key] = SCHEMA[key][0](text_value)
        except ValueError as exc:
            raise ParseError(f"bad value {text_value!r}: {exc}", line=lines.get(key), key=key) from None
    return _validate(values, raw, verbose)


def _validate(v, given, verbose):
    for short, (a, b) in (("UM", ("U", "M")), ("LP", ("L", "P"))):
        if short in given:
            clash = [k for k in (a, b) if k in given]
            if clash:
                raise ValidationError(short, f"conflicts with {', '.join(clash)}; give one or the other")
            if v[short] < 1:
                raise ValidationError(short, f"must be >= 1, got {v[short]}")
            v[a], v[b] = (1, v[short]) if short == "UM" else (v[short], 1)
    for key in ("L", "P", "U", "M", "N", "D", "K", "T", "trials", "workers", "als_iters",
                "agd_iters", "rip_samples"):
        if v[key] < 1:
            raise ValidationError(key, f"must be >= 1, got {v[key]}")
    if not v["noise_var"] >= 0:
        raise ValidationError("noise_var", f"must be >= 0, got {v['noise_var']}")
    if v["agd_step"] != "auto" and not v["agd_step"] > 0:
        raise ValidationError("agd_step", f"must be > 0 or auto, got {v['agd_step']}")
    if not v["stop_tol"] >= 0:
        raise ValidationError("stop_tol", "must be >= 0")
    if not v["pinv_tol"] > 0:
        raise ValidationError("pinv_tol", "must be > 0")
    if v["phase_policy"] not in PHASE_POLICIES:
        raise ValidationError("phase_policy", f"must be one of {PHASE_POLICIES}")
    if v["init_scale"] not in ("unit", "raw"):
        raise ValidationError("init_scale", "must be unit or raw")
    if v["backend"] not in ("auto", "cython", "python"):
        raise ValidationError("backend", "must be auto, cython or python")
    for s in v["solvers"]:
        if s not in analysis.SOLVERS:
            raise ValidationError("solvers", f"unknown solver {s!r}; choose from {analysis.SOLVERS}")
    if not v["solvers"]:
        raise ValidationError("solvers", "needs at least one solver")
    if v["sweep_param"] not in analysis.SWEEPABLE:
        raise ValidationError("sweep_param", f"must be one of {analysis.SWEEPABLE}")
    vals = v["sweep_values"]
    if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
        raise ValidationError("sweep_values", "must be nonempty and strictly increasing")
    try:
        kind, order = parse_pilot_kind(v["pilot"])
    except IrsTTError as exc:
        raise ValidationError("pilot", str(exc)) from None

    sizes = v["irs_sizes"] if "irs_sizes" in given else (v["N"],) * v["D"]
    if not sizes or min(sizes) < 1:
        raise ValidationError("irs_sizes", "must be a nonempty list of positive ints")
    if v["rank_limits"] and len(v["rank_limits"]) != len(sizes) + 1:
        raise ValidationError("rank_limits", f"needs {len(sizes) + 1} entries (one per factor)")
    system = SystemConfig(L=v["L"], P=v["P"], U=v["U"], M=v["M"], K=v["K"], T=v["T"],
                          irs_sizes=sizes, noise_var=v["noise_var"])

    # checks at every swept point, so a sweep cannot fail halfway through
    param = v["sweep_param"]
    points = [(system, None)]
    for x in vals:
        try:
            points.append((analysis.apply_sweep_value(system, param, _sweep_value(param, x)), x))
        except (IrsTTError, ValueError) as exc:
            raise ValidationError("sweep_values", str(exc)) from None
    for cfg, x in points:
        where = "" if x is None else f" at {param}={x:g}"
        problem = None
        if kind == "dft" and cfg.T < cfg.UM:
            problem = ("pilot", f"dft pilots need T >= UM, got T={cfg.T}, UM={cfg.UM}{where}")
        elif any(s in ("als", "ttsvd") for s in v["solvers"]) and cfg.T < cfg.UM:
            problem = ("T", f"als/ttsvd need T >= UM, got T={cfg.T}, UM={cfg.UM}{where}")
        elif "als" in v["solvers"] and cfg.D != 1:
            problem = ("solvers", f"als needs a single IRS (D = 1){where}")
        if problem:
            raise ValidationError("sweep_values" if x is not None else problem[0], problem[1])
    return RunConfig(v, system, kind, order, v["out"], verbose)


# ---------------------------------------------------------------- CSV


def _fmt_float(x):
    return "nan" if math.isnan(x) else "%.16e" % x


def _fmt_value(x):
    return str(x) if isinstance(x, (int, np.integer)) else _fmt_float(float(x))


def write_csv(records, path, timing=False):
    """Write trial records sorted by (value, solver, trial).

    ``wall_time_ms`` is written as 0 unless ``timing`` is set, so files are
    byte-identical across runs with the same seed.
    """
    rows = sorted(records, key=lambda r: (r.value, r.solver, r.trial))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.sweep_param, _fmt_value(r.value), r.trial, r.solver,
                        _fmt_float(r.error_abs), _fmt_float(r.error_rel), r.iterations,
                        _fmt_float(r.wall_time * 1e3 if timing else 0.0), r.seed, r.status])


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _aggregate_rows(result):
    by_key = {}
    for r in result.records:
        by_key.setdefault((r.value, r.solver), []).append(r)
    out = []
    for row in result.aggregate:
        recs = [r for r in by_key[(row["value"], row["solver"])] if r.ok and not math.isnan(r.final_loss)]
        row = dict(row)
        row["mean_final_loss"] = math.fsum(r.final_loss for r in recs) / len(recs) if recs else math.nan
        row["mean_best_loss"] = math.fsum(r.best_loss for r in recs) / len(recs) if recs else math.nan
        out.append(row)
    return out


def write_aggregate_csv(result, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_HEADER)
        for row in _aggregate_rows(result):
            w.writerow([row["sweep_param"], _fmt_value(row["value"]), row["solver"], row["trials"],
                        row["failed"]] + [_fmt_float(row[k]) for k in AGG_HEADER[5:]])


def aggregate_path(path):
    p = Path(path)
    return p.with_name(p.stem + "_aggregate" + (p.suffix or ".csv"))


# ---------------------------------------------------------------- commands


def _say(cfg, *args):
    if cfg.verbose:
        print(*args)


def cmd_sweep(cfg, out):
    result = analysis.run_sweep(cfg.sweep_spec(), workers=cfg["workers"])
    write_csv(result.records, out, timing=cfg["timing"])
    write_aggregate_csv(result, aggregate_path(out))
    for row in result.aggregate:
        _say(cfg, f"{row['sweep_param']}={_fmt_value(row['value']):>24} {row['solver']:>6}  "
                  f"mean_abs={row['mean_error_abs']:.4e} mean_rel={row['mean_error_rel']:.4e} "
                  f"failed={row['failed']}/{row['trials']}")
    _say(cfg, f"wrote {out} and {aggregate_path(out)}")
    failed = sum(not r.ok for r in result.records)
    return failed


def cmd_rip(cfg, out):
    rep = analysis.rip_probe(cfg.system, cfg.pilot_kind, cfg["rip_samples"], cfg["seed"],
                             order=cfg.pilot_order, phase_policy=cfg["phase_policy"])
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "rho", "abs_dev"])
        for i, rho in enumerate(rep.rho):
            w.writerow([i, _fmt_float(rho), _fmt_float(abs(rho - 1.0))])
    _say(cfg, f"T={cfg.system.T} UM={cfg.system.UM} pilot={cfg['pilot']} samples={rep.samples}")
    _say(cfg, f"delta_hat={rep.delta_hat:.6e}  " +
         "  ".join(f"q{int(q * 100)}={v:.4e}" for q, v in rep.quantiles.items()))
    _say(cfg, f"wrote {out}")
    return 0


def finite_difference_check(f, grad, Z, h):
    """Max relative error between ``grad`` (w.r.t. ``Z*``) and central differences of ``f``."""
    num = np.zeros_like(grad)
    for idx in np.ndindex(Z.shape):
        parts = []
        for unit in (1.0, 1j):
            Zp, Zm = Z.copy(), Z.copy()
            Zp[idx] += h * unit
            Zm[idx] -= h * unit
            parts.append((f(Zp) - f(Zm)) / (2 * h))
        # df/dre = 2 re g, df/dim = 2 im g
        num[idx] = 0.5 * (parts[0] + 1j * parts[1])
    return float(np.abs(num - grad).max() / max(np.abs(num).max(), 1e-300))


def gradcheck_cases(seed=0, h=1e-5):
    """``[(case, factor, max relative error)]`` for D = 1 (H, G and the chain form) and D = 2."""
    out = []
    small = SystemConfig(L=4, P=1, U=1, M=4, K=3, T=6, irs_sizes=(3,), noise_var=0.0)
    for D, sizes in ((1, (3,)), (2, (3, 3))):
        cfg = dataclasses.replace(small, irs_sizes=sizes)
        s = analysis.derive_seed
        tt = random_tt_channel(cfg, s(seed, "gc-ch", D), s(seed, "gc-ph", D))
        X = gen_pilots(cfg, "gaussian", s(seed, "gc-x", D)).X
        Y = measure(build_ground_truth(tt), X, 0.01, s(seed, "gc-noise", D))
        init = est.random_init(cfg.factor_shapes, s(seed, "gc-init", D), "raw")
        diags = tt.phases.all_diagonals()
        T = X.shape[1]

        def loss_with(d, Z):
            fs = list(init)
            fs[d] = Z
            R = chain_from(fs, diags) @ X - Y
            return float(np.vdot(R, R).real) / T

        for d in range(D + 1):
            g = est.wirtinger_grad_multi(init, diags, X, Y, d)
            out.append((f"D={D}", f"B_{d}", finite_difference_check(lambda Z: loss_with(d, Z), g, init[d], h)))
        if D == 1:
            S = build_phase_tensor(tt.phases, 1)
            gH, gG = est.wirtinger_grads_single(init[1], init[0], S, X, Y)
            out.append(("D=1", "H", finite_difference_check(lambda Z: loss_with(1, Z), gH, init[1], h)))
            out.append(("D=1", "G", finite_difference_check(lambda Z: loss_with(0, Z), gG, init[0], h)))
    return out


def cmd_gradcheck(cfg, out):
    rows = gradcheck_cases(cfg["seed"], cfg["gradcheck_step"])
    tol = cfg["gradcheck_tol"]
    failed = 0
    _say(cfg, f"{'case':<6} {'factor':<6} {'max_rel_err':>12}  result")
    for case, factor, err in rows:
        ok = err < tol
        failed += not ok
        _say(cfg, f"{case:<6} {factor:<6} {err:12.3e}  {'pass' if ok else 'FAIL'}")
    _say(cfg, f"max relative gradient error {max(r[2] for r in rows):.3e} (tolerance {tol:g})")
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "factor", "max_rel_err", "pass"])
            for case, factor, err in rows:
                w.writerow([case, factor, _fmt_float(err), int(err < tol)])
    return failed


def cmd_demo(cfg, out):
    solver = cfg["solvers"][0]
    system, opts = cfg.system, cfg.solver_options(solver)
    seed = analysis.derive_seed(cfg["seed"], "trial", 0)
    tt = random_tt_channel(system, analysis.derive_seed(seed, "channels"),
                           analysis.derive_seed(seed, "phases"), cfg["phase_policy"])
    B = build_ground_truth(tt)
    pilots = gen_pilots(system, cfg.pilot_kind, analysis.derive_seed(seed, "pilots"), order=cfg.pilot_order)
    Y = measure(B, pilots.X, system.noise_var, analysis.derive_seed(seed, "noise"))
    init = est.random_init(system.factor_shapes, analysis.derive_seed(seed, "init", opts.init_seed),
                           opts.init_scale)
    if solver == "als":
        res = est.als_single((init[1], init[0]), tt.phases, pilots, Y, opts)
    elif solver == "agd":
        res = est.agd_multi(init, tt.phases, pilots, Y, opts)
    else:
        n = system.irs_sizes
        B_hat = est.ttsvd_baseline(Y, pilots, (n[-1], n[0]), opts.pinv_tol)
        err = analysis.recovery_error(B_hat, B)
        _say(cfg, f"ttsvd: error_abs={err[0]:.6e} error_rel={err[1]:.6e}")
        return 0
    err = analysis.recovery_error(res.tensor(), B)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(res.loss_trace):
            w.writerow([i, _fmt_float(v)])
    best = int(np.argmin(res.loss_trace))
    _say(cfg, f"{solver}: {res.iterations} iterations, final loss {res.loss_trace[-1]:.6e}, "
              f"best loss {res.loss_trace[best]:.6e} at iteration {best}")
    _say(cfg, f"error_abs={err[0]:.6e} error_rel={err[1]:.6e} (last iterate)")
    _say(cfg, f"wrote loss trace to {out}")
    return 0


COMMANDS = {"sweep": cmd_sweep, "rip": cmd_rip, "gradcheck": cmd_gradcheck, "demo": cmd_demo}


def resolve_output(cmd, out):
    path = Path(out or f"{cmd}.csv")
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env and not path.is_absolute():
        path = Path(env) / path
    return path


def build_parser():
    p = argparse.ArgumentParser(prog="irs-tt", description="IRS channel estimation experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", metavar="PATH", help="output CSV path")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per point")
    p.add_argument("--strict", action="store_true", help="exit nonzero if any trial or check fails")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                   help="override a config key (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="suppress the summary")
    p.add_argument("--list-keys", action="store_true", help="print the config schema and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.list_keys:
        for key, (_, default, doc) in SCHEMA.items():
            print(f"{key:<15} default={default!r:<18} {doc}")
        return 0
    try:
        text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
        overrides = list(args.overrides)
        for key, val in (("seed", args.seed), ("trials", args.trials), ("out", args.out)):
            if val is not None:
                overrides.append(f"{key}={val}")
        cfg = parse_config(text, overrides, verbose=not args.quiet)
        out = resolve_output(args.command, cfg.out)
        if out.parent and not out.parent.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
        failures = COMMANDS[args.command](cfg, out)
    except (IrsTTError, OSError) as exc:
        print(f"irs-tt: error: {exc}", file=sys.stderr)
        return 2
    if args.command == "gradcheck" and failures:
        return 1
    if args.strict and failures:
        print(f"irs-tt: {failures} failed trial(s)", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
