"""Command line front end: fit, tune, select and simulate commands over CSV
datasets, with JSON/CSV artifacts and a fixed exit-code contract (0 success,
2 configuration error, 3 numerical failure)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisSpec, TermSpec, assemble_design
from .correlation import CorrelationModel
from .criteria import criterion_report
from .data import LongitudinalDataset, Subject
from .errors import ConfigError, LsocvError, NumericalError
from .estimator import PenalizedFitter, leverage_diagnostics
from .optimizer import OptimizerConfig, grid_search, optimize_lambda
from .selection import estimate_candidates, select_correlation
from .simulation import (
    SimScenario,
    run_efficiency_experiment,
    run_function_estimation,
    run_selection_cell,
    run_selection_experiment,
    selection_table_rows,
    truncated_lag1,
)

log = logging.getLogger("lsocv")

CONFIG_KEYS = {
    "input", "terms", "corr", "lambda", "min_obs", "seed", "reps", "threads",
    "out", "experiment", "cell", "rho", "sigma", "working", "include_opt",
    "trace", "candidates", "lambda_policy", "knot_placement",
}


def parse_dataset(path, min_obs: int = 1):
    """Read a CSV with columns subject_id, y, optional time; any remaining
    columns become covariates. Rows stay in file order within subject.

    Returns (dataset, n_dropped) where n_dropped counts subjects removed by
    the min_obs filter.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for required in ("subject_id", "y"):
            if required not in header:
                raise ConfigError(f"{path}: missing required column {required!r}")
        idx = {name: i for i, name in enumerate(header)}
        cov_names = [h for h in header if h not in ("subject_id", "y", "time")]
        has_time = "time" in idx
        groups: dict[str, dict] = {}
        order: list[str] = []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            sid = row[idx["subject_id"]].strip()
            try:
                yval = float(row[idx["y"]])
            except ValueError:
                raise ConfigError(f"{path}:{row_no}: non-numeric y {row[idx['y']]!r}") from None
            rec = groups.get(sid)
            if rec is None:
                rec = {"y": [], "time": [], "cov": {c: [] for c in cov_names}}
                groups[sid] = rec
                order.append(sid)
            rec["y"].append(yval)
            if has_time:
                try:
                    rec["time"].append(float(row[idx["time"]]))
                except ValueError:
                    raise ConfigError(f"{path}:{row_no}: non-numeric time") from None
            for c in cov_names:
                try:
                    rec["cov"][c].append(float(row[idx[c]]))
                except ValueError:
                    raise ConfigError(f"{path}:{row_no}: non-numeric covariate {c!r}") from None
        if not order:
            raise ConfigError(f"{path}: no data rows")
    subjects, dropped, ids = [], 0, []
    for sid in order:
        rec = groups[sid]
        if len(rec["y"]) < min_obs:
            dropped += 1
            continue
        subjects.append(Subject(
            y=np.array(rec["y"]),
            covariates={c: np.array(v) for c, v in rec["cov"].items()},
            times=np.array(rec["time"]) if has_time else None,
        ))
        ids.append(sid)
    if not subjects:
        raise ConfigError(f"{path}: no subjects left after --min-obs {min_obs}")
    dataset = LongitudinalDataset(subjects)
    dataset.subject_ids = ids
    dataset.n_dropped = dropped
    return dataset, dropped


def parse_corr(spec: str) -> CorrelationModel:
    """Parse 'cs:rho=0.8' style correlation specifications."""
    parts = spec.split(":")
    structure = parts[0].strip().lower()
    opts = _parse_opts(parts[1:], spec)
    d = {"structure": structure}
    for key in ("rho", "alpha", "theta"):
        if key in opts:
            d[key] = float(opts.pop(key))
    if opts:
        raise ConfigError(f"unknown correlation option(s) {sorted(opts)} in {spec!r}")
    return CorrelationModel.from_json(d)


def _parse_opts(parts, context):
    opts = {}
    for p in parts:
        if "=" not in p:
            raise ConfigError(f"expected key=value, got {p!r} in {context!r}")
        k, v = p.split("=", 1)
        opts[k.strip()] = v.strip()
    return opts


def resolve_terms(term_strs, dataset, knot_placement: str = "equal") -> list[TermSpec]:
    """Turn 'smooth:x2:knots=10:order=4:q=2' strings into term specifications,
    filling basis domains from the data when not given explicitly."""
    if not term_strs:
        raise ConfigError("at least one --term is required")
    terms = []
    for raw in term_strs:
        parts = raw.split(":")
        kind = parts[0].strip().lower()
        if kind == "linear":
            if len(parts) < 2:
                raise ConfigError(f"linear term needs a covariate: {raw!r}")
            terms.append(TermSpec("linear", parts[1].strip()))
            continue
        if kind not in ("smooth", "vc"):
            raise ConfigError(f"unknown term kind {kind!r} in {raw!r}")
        if len(parts) < 2:
            raise ConfigError(f"{kind} term needs a covariate: {raw!r}")
        cov = parts[1].strip()
        opts = _parse_opts(parts[2:], raw)
        knots = int(opts.pop("knots", 10))
        order = int(opts.pop("order", 4))
        q = int(opts.pop("q", 2))
        if "domain" in opts:
            a, b = (float(v) for v in opts.pop("domain").split(","))
        else:
            vals = dataset.time_column() if kind == "vc" else dataset.covariate_column(cov)
            a, b = float(vals.min()), float(vals.max())
        if opts:
            raise ConfigError(f"unknown term option(s) {sorted(opts)} in {raw!r}")
        interior = None
        if knot_placement == "quantile":
            vals = dataset.time_column() if kind == "vc" else dataset.covariate_column(cov)
            qs = np.arange(1, knots + 1) / (knots + 1)
            interior = tuple(float(v) for v in np.quantile(vals, qs))
        spec = BasisSpec(order=order, interior_knots=knots, domain=(a, b),
                         penalty_order=q, interior_positions=interior)
        modifier = None if (kind == "vc" and cov in ("1", "intercept")) else cov
        terms.append(TermSpec(kind, modifier, spec))
    return terms


def parse_lambda_policy(raw: str | None):
    """--lambda fixed=v1,v2 | optimize | grid=lo:hi:num"""
    if raw is None or raw == "optimize":
        return ("optimize", None)
    if raw.startswith("fixed="):
        vals = np.array([float(v) for v in raw[len("fixed="):].split(",")])
        return ("fixed", vals)
    if raw.startswith("grid="):
        lo, hi, num = raw[len("grid="):].split(":")
        return ("grid", (float(lo), float(hi), int(num)))
    raise ConfigError(f"bad --lambda value {raw!r}")


# ---------------------------------------------------------------------------
# deterministic artifact writers
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, payload):
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON serializable: {type(o)}")

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def _emit_error(exc: Exception):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _prepare(cfg):
    dataset, dropped = parse_dataset(cfg["input"], min_obs=cfg.get("min_obs") or 1)
    if dropped:
        log.info("dropped %d subjects below min-obs", dropped)
    terms = resolve_terms(cfg.get("terms") or [], dataset,
                          cfg.get("knot_placement") or "equal")
    assembly = assemble_design(dataset, terms)
    model = parse_corr(cfg.get("corr") or "ind")
    return dataset, assembly, model


def cmd_fit(cfg) -> int:
    dataset, assembly, model = _prepare(cfg)
    policy, value = parse_lambda_policy(cfg.get("lambda") or "fixed=" + ",".join(
        ["0"] * max(len(assembly.penalties), 1)))
    if policy != "fixed":
        raise ConfigError("fit requires --lambda fixed=...; use tune to optimize")
    lam = value if len(assembly.penalties) else np.zeros(0)
    fitter = PenalizedFitter(dataset, assembly, model)
    res = fitter.fit(lam)
    lev = leverage_diagnostics(res)
    report = criterion_report(res)
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "fit.json", {
        "lambda": list(res.lam),
        "correlation": model.to_json(),
        "p": assembly.p,
        "n": dataset.n,
        "N": dataset.N,
        "trace_A": res.trace_A,
        "ridged": res.ridged,
        "dropped_subjects": dataset.n_dropped,
        "leverage": {
            "per_subject": list(lev.per_subject),
            "mean": lev.mean,
            "max_ratio": lev.max_ratio,
            "dominant": lev.dominant,
        },
        "criteria": report.to_json(),
    })
    _write_fitted(out / "fitted.csv", dataset, res)
    return 0


def _write_fitted(path, dataset, res):
    has_time = dataset.subjects[0].times is not None
    ids = getattr(dataset, "subject_ids", [str(i) for i in range(dataset.n)])
    header = ["subject_id"] + (["time"] if has_time else []) + ["y", "fitted", "residual"]
    rows = []
    pos = 0
    for sid, s in zip(ids, dataset.subjects):
        for j in range(s.n_obs):
            row = [sid]
            if has_time:
                row.append(s.times[j])
            row += [s.y[j], res.fitted[pos], res.residuals[pos]]
            rows.append(row)
            pos += 1
    write_csv(path, header, rows)


def cmd_tune(cfg) -> int:
    dataset, assembly, model = _prepare(cfg)
    if not assembly.penalties:
        raise ConfigError("tune requires at least one penalized term")
    policy, value = parse_lambda_policy(cfg.get("lambda"))
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    fitter = PenalizedFitter(dataset, assembly, model)
    if policy == "fixed":
        raise ConfigError("tune requires --lambda optimize or grid=...")
    if policy == "grid":
        lo, hi, num = value
        axes = [np.logspace(np.log10(lo), np.log10(hi), num)] * len(assembly.penalties)
        gres = grid_search(dataset, assembly, model, axes, fitter=fitter)
        lam = gres.lam
        res = fitter.fit(lam)
        tune_info = {"method": "grid", "grid_shape": list(gres.values.shape),
                     "indices": list(gres.indices), "boundary_hit": gres.boundary_hit}
    else:
        opt = optimize_lambda(dataset, assembly, model, OptimizerConfig(), fitter=fitter)
        lam, res = opt.lam, opt.fit
        tune_info = {
            "method": "newton",
            "termination": opt.trace.termination,
            "boundary_hit": opt.trace.boundary_hit,
            "iterations": len(opt.trace.rows) - 1,
        }
        if cfg.get("trace"):
            header, rows = opt.trace.as_rows()
            write_csv(out / "trace.csv", header, rows)
    report = criterion_report(res)
    write_json(out / "tune.json", {
        "lambda": list(lam),
        "correlation": model.to_json(),
        "tuner": tune_info,
        "criteria": report.to_json(),
        "trace_A": res.trace_A,
    })
    _write_fitted(out / "fitted.csv", dataset, res)
    return 0


def cmd_select(cfg) -> int:
    dataset, assembly, _ = _prepare(cfg)
    structures = tuple((cfg.get("candidates") or "ind,cs,ar1,un").split(","))
    candidates = estimate_candidates(dataset, assembly, structures)
    report = select_correlation(dataset, assembly, candidates,
                                lambda_policy=cfg.get("lambda_policy") or "zero")
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "select.json", report.to_json())
    return 0


def _parse_cell(cell: str):
    opts = _parse_opts(cell.split(","), cell)
    known = {"n", "rho", "truth"}
    if set(opts) - known:
        raise ConfigError(f"unknown cell key(s) {sorted(set(opts) - known)}")
    return int(opts.get("n", 100)), float(opts.get("rho", 0.5)), opts.get("truth", "cs").lower()


def cmd_simulate(cfg) -> int:
    experiment = cfg.get("experiment") or "table1"
    out = Path(cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg.get("seed") or 0)
    reps = int(cfg.get("reps") or 200)
    threads = int(cfg.get("threads") or (os.cpu_count() or 1))
    manifest = {"command": "simulate", "experiment": experiment, "seed": seed,
                "reps": reps, "version": __version__}

    if experiment == "table1":
        if cfg.get("cell"):
            n, rho, truth = _parse_cell(cfg["cell"])
            cells = [run_selection_cell(n, rho, truth, n_reps=reps, seed=seed,
                                        threads=threads)]
            manifest["cell"] = {"n": n, "rho": rho, "truth": truth}
        else:
            cells = run_selection_experiment(n_reps=reps, seed=seed, threads=threads)
        header, rows = selection_table_rows(cells)
        write_csv(out / "table1.csv", header, rows)
    elif experiment == "efficiency":
        rho = float(cfg.get("rho") or 0.8)
        sigma = float(cfg.get("sigma") or 1.0)
        scenario = SimScenario(n=100, n_i=5, sigma=sigma,
                               correlation=CorrelationModel("cs", rho=rho), seed=seed)
        working = cfg.get("working") or "truth"
        models = {"truth": CorrelationModel("cs", rho=rho)} if working == "truth" \
            else {"lag1": truncated_lag1(rho)}
        result = run_efficiency_experiment(scenario, models, n_reps=reps,
                                           include_opt=bool(cfg.get("include_opt")),
                                           threads=threads)
        label = result.labels[0]
        rows = [[r, result.v_over_star[label][r], result.opt_over_star[label][r]]
                for r in range(reps)]
        write_csv(out / "efficiency.csv",
                  ["replicate", "loss_ratio_vstar", "loss_ratio_opt"], rows)
        manifest["working"] = working
        manifest["failures"] = result.failures
        manifest["rho"], manifest["sigma"] = rho, sigma
    elif experiment == "function":
        rho = float(cfg.get("rho") or 0.8)
        sigma = float(cfg.get("sigma") or 1.0)
        scenario = SimScenario(n=100, n_i=5, sigma=sigma,
                               correlation=CorrelationModel("cs", rho=rho), seed=seed)
        models = {"w1": CorrelationModel("ind"), "w2": CorrelationModel("cs", rho=rho)}
        result = run_function_estimation(scenario, models, n_reps=reps, threads=threads)
        header = ["x"]
        for lb in result.labels:
            for func in ("f1", "f2"):
                header += [f"bias_{lb}_{func}", f"var_{lb}_{func}"]
        rows = []
        for g, x in enumerate(result.grid):
            row = [x]
            for lb in result.labels:
                for func in ("f1", "f2"):
                    row += [result.bias(lb, func)[g], result.variance(lb, func)[g]]
            rows.append(row)
        write_csv(out / "function_estimation.csv", header, rows)
        manifest["stalls"] = result.stalls
        manifest["rho"], manifest["sigma"] = rho, sigma
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    write_json(out / "manifest.json", manifest)
    return 0


COMMANDS = {"fit": cmd_fit, "tune": cmd_tune, "select": cmd_select, "simulate": cmd_simulate}


# ---------------------------------------------------------------------------
# argument parsing and config merging
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lsocv",
        description="Penalized-spline marginal regression with leave-subject-out CV",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_model=True):
        p.add_argument("--config", help="JSON config file; flags win on conflict")
        p.add_argument("--input", help="input CSV (subject_id, y, [time], covariates)")
        p.add_argument("--min-obs", dest="min_obs", type=int,
                       help="drop subjects with fewer observations")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if with_model:
            p.add_argument("--term", dest="terms", action="append",
                           help="e.g. smooth:x2:knots=10:order=4:q=2 (repeatable)")
            p.add_argument("--knot-placement", dest="knot_placement",
                           choices=["equal", "quantile"])

    p_fit = sub.add_parser("fit", help="fit at fixed penalties")
    common(p_fit)
    p_fit.add_argument("--corr", help="e.g. cs:rho=0.8")
    p_fit.add_argument("--lambda", dest="lambda_", help="fixed=v1,v2,...")

    p_tune = sub.add_parser("tune", help="select penalties by cross-validation")
    common(p_tune)
    p_tune.add_argument("--corr")
    p_tune.add_argument("--lambda", dest="lambda_", help="optimize | grid=lo:hi:num")
    p_tune.add_argument("--trace", action="store_const", const=True,
                        help="write the optimizer trace CSV")

    p_sel = sub.add_parser("select", help="choose a working correlation structure")
    common(p_sel)
    p_sel.add_argument("--candidates", help="comma list from ind,cs,ar1,un")
    p_sel.add_argument("--lambda-policy", dest="lambda_policy", choices=["zero", "optimize"])

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo experiment")
    p_sim.add_argument("--config")
    p_sim.add_argument("--experiment", choices=["table1", "efficiency", "function"])
    p_sim.add_argument("--cell", help='table1 cell, e.g. "n=100,rho=0.5,truth=cs"')
    p_sim.add_argument("--rho", type=float)
    p_sim.add_argument("--sigma", type=float)
    p_sim.add_argument("--working", choices=["truth", "lag1"])
    p_sim.add_argument("--include-opt", dest="include_opt", action="store_const", const=True)
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--threads", type=int)
    p_sim.add_argument("--out")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """File config merged under command-line flags; unknown keys rejected."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON in {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        cfg["lambda" if key == "lambda_" else key] = val
    if "terms" in cfg and isinstance(cfg["terms"], str):
        cfg["terms"] = [cfg["terms"]]
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LSOCV_LOG_LEVEL", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        code = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _emit_error(exc)
        return 2
    except (NumericalError, LsocvError) as exc:
        _emit_error(exc)
        return 3
    return code


if __name__ == "__main__":
    sys.exit(main())
