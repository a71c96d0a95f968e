"""Command-line entry point: ``moescale <subcommand> ...``.

Exit status is 0 on success, 1 on a data or fit error and 2 on a usage
error. Errors are reported on stderr as a single line::

    moescale: error[<kind>]: <message>

Every optional flag can also be set through an environment variable named
``MOESCALE_<FLAG>`` (upper case, dashes as underscores), e.g.
``MOESCALE_THREADS=4``. Command-line values win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from moescale import __version__, artifacts
from moescale.errors import MoeScaleError
from moescale.flops import estimator_ratio, flops_6nad, flops_breakdown, flops_per_token, training_flops
from moescale.frontier import (
    S_MAX,
    default_size_interval,
    optimal_size_given_sparsity,
    optimal_sparsity_given_size,
    optimal_sparsity_map,
)
from moescale.lbfgs import LbfgsOptions
from moescale.model import count_params, load_config
from moescale.paramlaw import (
    DEFAULT_GRID,
    HUBER_DELTA,
    ScalingLawCoeffs,
    fit_law,
    law_optimal_size,
    law_optimal_sparsity,
)
from moescale.runs import group_by_budget, load_runs, split_holdout_by_sparsity, write_runs_csv
from moescale.surface import (
    bootstrap,
    cv_error,
    fit_surface,
    grid_search_degrees,
    residual_sum_of_squares,
    surface_grid,
)
from moescale.synth import REFERENCE_SPARSITIES, SynthDesign, generate_runs_with_report, load_truth, structural_na

PROG = "moescale"
ENV_PREFIX = "MOESCALE_"


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with status 2."""


# --------------------------------------------------------------------------- helpers


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _emit(text: str, path: str | None) -> list[str]:
    if path:
        artifacts.atomic_write_text(path, text)
        return [path]
    sys.stdout.write(text)
    return []


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _degrees(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 3 or any(not 0 <= p <= 4 for p in parts):
        raise argparse.ArgumentTypeError(f"degrees must be three integers in 0..4, got {text!r}")
    return parts


def _map_fn(threads: int):
    if threads <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=threads)
    return pool.map, pool


def _write_bundle(args, command: str, inputs: Sequence[str], outputs: Sequence[str], metrics: dict) -> None:
    if not args.bundle:
        return
    artifacts.ReportBundle.for_inputs(command, inputs, outputs=list(outputs), metrics=metrics).write(args.bundle)


# --------------------------------------------------------------------------- flops


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    pc = count_params(cfg, include_input_embedding=args.include_input_embedding)
    pc_na = count_params(cfg).n_active
    row = {
        "n_total": pc.n_total,
        "n_active": pc.n_active,
        "sparsity": cfg.sparsity,
        "flops_per_token": flops_per_token(cfg),
        "flops_6na": flops_6nad(pc_na, 1),
        "estimator_ratio": float(estimator_ratio(cfg)),
    }
    if args.tokens is not None:
        row["tokens"] = args.tokens
        row["training_flops"] = training_flops(cfg, args.tokens, proxy=args.proxy)
        row["estimator"] = "6NaD" if args.proxy else "per_token"
    lines = [f"{k:<18}{_human(v)}" for k, v in row.items()]
    result = {"config": cfg.to_dict(), **row}
    if args.breakdown:
        bd = flops_breakdown(cfg)
        result["breakdown"] = bd.to_dict()
        lines.append("breakdown (flops/token)")
        lines += [f"  {k:<16}{_human(v)}" for k, v in bd.to_dict().items()]
    sys.stdout.write("\n".join(lines) + "\n")
    outputs = []
    if args.json:
        artifacts.write_json(args.json, result)
        outputs.append(args.json)
    _write_bundle(args, "flops", [args.config], outputs, {k: v for k, v in row.items() if k != "estimator"})
    return 0


def _human(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# --------------------------------------------------------------------------- fit-surface


def cmd_fit_surface(args) -> int:
    if args.degrees and args.grid_search:
        raise UsageError("--degrees and --grid-search are mutually exclusive")
    table = load_runs(args.runs)
    groups = group_by_budget(table, args.rel_tol, centers=[args.budget])
    if not groups.groups:
        raise ValueError(f"no runs within {args.rel_tol:g} relative of budget {args.budget:g}")
    records = groups.groups[0][1]
    size_var = {"total": "total_params", "active": "active_params"}[args.size_var]
    seed = args.seed
    map_fn, pool = _map_fn(args.threads)
    try:
        if args.degrees:
            degrees = args.degrees
            cv = cv_error(records, degrees, size_var, seed=seed)
        else:
            degrees, cv = grid_search_degrees(records, size_var, seed=seed, map_fn=map_fn)
    finally:
        if pool:
            pool.shutdown()
    fit = fit_surface(records, degrees, size_var, budget=args.budget)
    metrics = {
        "n_records": len(records),
        "rss": residual_sum_of_squares(fit, records),
        "cv_mse": cv,
        "degree_selection": "fixed" if args.degrees else "grid_search",
    }
    if args.bootstrap:
        ens = bootstrap(records, degrees, size_var, args.bootstrap, args.subsample_fraction, seed)
        m = ens.coefficient_matrix()
        metrics["bootstrap"] = {
            "k": args.bootstrap,
            "seed": seed,
            "subsample_fraction": args.subsample_fraction,
            "coef_mean": m.mean(axis=0).tolist(),
            "coef_std": m.std(axis=0, ddof=1).tolist() if len(m) > 1 else [0.0] * m.shape[1],
        }
    fit = dataclasses.replace(fit, metrics=metrics)
    outputs = [str(artifacts.write_json(args.out, fit.to_dict()))]
    if args.grid_out:
        dom = fit.fit_domain
        sizes = np.geomspace(dom["size_min"], dom["size_max"], args.grid_points)
        sparsities = np.unique(np.concatenate([records.column("sparsity"), np.linspace(0.0, S_MAX, args.grid_points)]))
        rows = surface_grid(fit, sizes, sparsities)
        artifacts.write_csv(args.grid_out, rows, ["size", "sparsity", "loss", "extrapolated"])
        outputs.append(args.grid_out)
    sys.stdout.write(f"degrees {','.join(map(str, degrees))}  records {len(records)}  cv_mse {cv:.6g}\n")
    _write_bundle(args, "fit-surface", [args.runs], outputs, {k: v for k, v in metrics.items() if k != "bootstrap"})
    return 0


# --------------------------------------------------------------------------- fit-law


def cmd_fit_law(args) -> int:
    table = load_runs(args.runs)
    holdout = None
    if args.holdout_sparsity is not None:
        table, holdout = split_holdout_by_sparsity(table, args.holdout_sparsity)
    grid = None
    if args.grid != "default":
        grid = _read_json(args.grid)
        unknown = sorted(set(grid) - set(DEFAULT_GRID))
        if unknown:
            raise ValueError(f"{args.grid}: unknown grid keys {', '.join(unknown)}")
    opts = LbfgsOptions(max_iter=args.max_iter)
    fit = fit_law(
        table,
        args.form,
        grid,
        opts,
        huber_delta=args.huber_delta,
        log_space=not args.raw_residuals,
        starts_fraction=args.starts_fraction,
        seed=args.seed,
        holdout=holdout,
        workers=args.threads,
    )
    artifacts.write_json(args.out, fit.to_dict())
    c = fit.coeffs
    names = ("alpha", "beta", "gamma", "lambda_exp", "delta_exp") if c.form == "moe" else ("alpha", "beta")
    sys.stdout.write(
        f"form {c.form}  starts {fit.starts_evaluated}  objective {fit.objective_value:.6g}  "
        + "  ".join(f"{n} {getattr(c, n):.6g}" for n in names)
        + "\n"
    )
    metrics = {"objective_value": fit.objective_value, **{f"fit_{k}": v for k, v in fit.fit_metrics.items()}}
    if fit.holdout_metrics:
        metrics.update({f"holdout_{k}": v for k, v in fit.holdout_metrics.items()})
    _write_bundle(args, "fit-law", [args.runs] + ([args.grid] if grid else []), [args.out], metrics)
    return 0


# --------------------------------------------------------------------------- frontier

FRONTIER_COLUMNS = [
    "budget",
    "constraint",
    "constraint_value",
    "size_variable",
    "opt_size",
    "opt_active_size",
    "opt_sparsity",
    "opt_loss",
    "at_boundary",
    "extrapolated",
    "source",
]


def _load_fit(path: str):
    data = _read_json(path)
    kind = data.get("kind")
    if kind == "isoflop_surface":
        from moescale.surface import SurfaceFit

        return SurfaceFit.from_dict(data)
    if kind == "scaling_law_fit":
        return ScalingLawCoeffs.from_dict(data["coefficients"])
    raise ValueError(f"{path}: unsupported artifact kind {kind!r}")


def cmd_frontier(args) -> int:
    modes = sum([args.fix_sparsity is not None, args.fix_size is not None, args.map])
    if modes > 1:
        raise UsageError("choose at most one of --fix-sparsity, --fix-size, --map")
    fits = [_load_fit(p) for p in args.fit]
    sparsities = args.fix_sparsity or list(REFERENCE_SPARSITIES)
    search_s = (0.0, args.s_max)
    rows = []

    def na(n, s):
        return structural_na(n, s, args.expert_fraction)

    for path, fit in zip(args.fit, fits):
        if isinstance(fit, ScalingLawCoeffs):
            if not args.budget:
                raise UsageError(f"{path} is a scaling-law fit; pass --budget")
            budgets = args.budget
            sizes = args.sizes or list(np.logspace(8, 11, 13))
            for c in budgets:
                if args.fix_size is not None or args.map:
                    for n in ([args.fix_size] if args.fix_size is not None else sizes):
                        rows.append(_row(law_optimal_sparsity(fit, c, n, na, search_s), fit, na))
                else:
                    for s in sparsities:
                        rows.append(_row(law_optimal_size(fit, c, s, na, tuple(args.size_range or (1e6, 1e14))), fit, na))
            continue
        interval = tuple(args.size_range) if args.size_range else default_size_interval(fit)
        if args.map:
            sizes = args.sizes or list(np.geomspace(*interval, 13))
            for r in optimal_sparsity_map([fit], sizes, search_s):
                rows.append(
                    {
                        "budget": r.budget,
                        "constraint": "fixed_size",
                        "constraint_value": r.size,
                        "size_variable": fit.size_variable,
                        "opt_size": r.size,
                        "opt_sparsity": r.opt_sparsity,
                        "opt_loss": r.opt_loss,
                        "at_boundary": r.at_boundary,
                        "source": path if r.reason is None else f"{path}: {r.reason}",
                    }
                )
        elif args.fix_size is not None:
            rows.append(_row(optimal_sparsity_given_size(fit, args.fix_size, search_s, source=path), fit, None))
        else:
            for s in sparsities:
                rows.append(_row(optimal_size_given_sparsity(fit, s, interval, source=path), fit, None))
    rows.sort(key=lambda r: (r["budget"] if r["budget"] is not None else -math.inf, r["constraint"], r["constraint_value"]))
    if args.out == "json":
        text = artifacts.dumps(rows)
    elif args.out == "csv":
        text = artifacts.csv_text(rows, FRONTIER_COLUMNS)
    else:
        text = artifacts.human_table(rows, FRONTIER_COLUMNS)
    outputs = _emit(text, args.output)
    _write_bundle(args, "frontier", args.fit, outputs, {"rows": len(rows)})
    return 0


def _row(p, fit, na) -> dict:
    row = p.to_dict()
    if isinstance(fit, ScalingLawCoeffs):
        row["opt_active_size"] = float(na(p.opt_size, p.opt_sparsity))
    return row


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    truth = load_truth(args.truth) if Path(args.truth).is_file() else None
    if truth is None:
        raise FileNotFoundError(f"no such file: {args.truth}")
    design_data = _read_json(args.design)
    if args.seed_given:
        design_data = {**design_data, "seed": args.seed}
    design = SynthDesign.from_dict(design_data, truth)
    result = generate_runs_with_report(design)
    write_runs_csv(result.table, args.out)
    for reason in result.skipped:
        sys.stderr.write(f"{PROG}: skipped cell {reason}\n")
    sys.stdout.write(f"wrote {len(result.table)} runs to {args.out} ({len(result.skipped)} cells skipped)\n")
    _write_bundle(
        args, "synth", [args.truth, args.design], [args.out], {"records": len(result.table), "skipped": len(result.skipped)}
    )
    return 0


# --------------------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    from moescale.validation import CRITERIA, compare_trees, run_validation

    numbers = args.criteria or sorted(CRITERIA)
    bad = [n for n in numbers if n not in CRITERIA]
    if bad:
        raise UsageError(f"unknown criteria: {', '.join(map(str, bad))} (valid: 1-{max(CRITERIA)})")

    def show(res):
        sys.stdout.write(res.line() + "\n")
        sys.stdout.flush()

    results = run_validation(args.out, numbers, progress=show)
    ok = all(r.passed for r in results)
    if args.repeat:
        with tempfile.TemporaryDirectory() as tmp:
            run_validation(tmp, numbers)
            same, diffs = compare_trees(args.out, tmp)
        sys.stdout.write(f"[{'PASS' if same else 'FAIL'}] criterion 9: determinism of validate artifacts\n")
        if not same:
            sys.stdout.write("  differing files: " + ", ".join(diffs) + "\n")
        ok = ok and same
    if not ok:
        raise MoeScaleError("validation failed; see the FAIL lines above")
    return 0


# --------------------------------------------------------------------------- report


def _flatten(prefix: str, obj, out: dict) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, (int, float, str, bool)) or obj is None:
        out[prefix] = obj


def cmd_report(args) -> int:
    rows = []
    for path in args.fit:
        data = _read_json(path)
        row = {"fit": path, "kind": data.get("kind")}
        if data.get("kind") == "isoflop_surface":
            row["budget"] = data.get("budget")
            row["degrees"] = ",".join(map(str, data.get("degrees", [])))
            _flatten("metrics", data.get("metrics") or {}, row)
        elif data.get("kind") == "scaling_law_fit":
            row["form"] = data.get("form")
            row["objective_value"] = data.get("objective_value")
            _flatten("fit", data.get("fit_metrics") or {}, row)
            _flatten("holdout", data.get("holdout_metrics") or {}, row)
            _flatten("coef", data.get("coefficients") or {}, row)
        else:
            raise ValueError(f"{path}: unsupported artifact kind {data.get('kind')!r}")
        rows.append(row)
    rows.sort(key=lambda r: (str(r["kind"]), str(r["fit"])))
    columns = ["fit", "kind"] + sorted({k for r in rows for k in r} - {"fit", "kind"})
    if args.out == "json":
        text = artifacts.dumps(rows)
    elif args.out == "csv":
        text = artifacts.csv_text(rows, columns)
    else:
        text = artifacts.human_table(rows, columns)
    outputs = _emit(text, args.output)
    _write_bundle(args, "report", args.fit, outputs, {"rows": len(rows)})
    return 0


# --------------------------------------------------------------------------- parser


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=1, help="worker count for parallel stages")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--bundle", default=None, help="also write a report bundle (digests, outputs, metrics)")

    p = argparse.ArgumentParser(prog=PROG, description="Scaling-law tools for sparse Mixture-of-Experts models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("flops", parents=[common], help="parameter and FLOP counts for a config")
    s.add_argument("--config", required=True)
    s.add_argument("--breakdown", action="store_true")
    s.add_argument("--proxy", action="store_true", help="training FLOPs from 6*N_a*D")
    s.add_argument("--tokens", type=float, default=None)
    s.add_argument("--include-input-embedding", action="store_true")
    s.add_argument("--json", default=None, help="write the numbers to this JSON file")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("fit-surface", parents=[common], help="fit an isoFLOP surface for one budget")
    s.add_argument("--runs", required=True)
    s.add_argument("--budget", type=float, required=True)
    s.add_argument("--rel-tol", type=float, default=0.1, help="budget bucket tolerance")
    s.add_argument("--degrees", type=_degrees, default=None, help="a,b,c")
    s.add_argument("--grid-search", action="store_true")
    s.add_argument("--size-var", choices=("total", "active"), default="total")
    s.add_argument("--bootstrap", type=int, default=0, metavar="K")
    s.add_argument("--subsample-fraction", type=float, default=0.8)
    s.add_argument("--out", required=True)
    s.add_argument("--grid-out", default=None, help="CSV of predicted loss over a (size, sparsity) grid")
    s.add_argument("--grid-points", type=_positive_int, default=25)
    s.set_defaults(func=cmd_fit_surface)

    s = sub.add_parser("fit-law", parents=[common], help="fit the parametric scaling law")
    s.add_argument("--runs", required=True)
    s.add_argument("--form", choices=("dense", "moe"), default="moe")
    s.add_argument("--holdout-sparsity", type=float, default=None)
    s.add_argument("--grid", default="default", help="'default' or a JSON file of per-parameter start values")
    s.add_argument("--huber-delta", type=float, default=HUBER_DELTA)
    s.add_argument("--starts-fraction", type=float, default=1.0)
    s.add_argument("--max-iter", type=_positive_int, default=500)
    s.add_argument("--raw-residuals", action="store_true", help="Huber on raw rather than log-loss residuals")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_law)

    s = sub.add_parser("frontier", parents=[common], help="compute-optimal points from a fit")
    s.add_argument("--fit", action="append", required=True)
    s.add_argument("--fix-sparsity", type=float, action="append", default=None)
    s.add_argument("--fix-size", type=float, default=None)
    s.add_argument("--map", action="store_true")
    s.add_argument("--budget", type=float, action="append", default=None, help="budgets for scaling-law fits")
    s.add_argument("--sizes", type=_float_list, default=None)
    s.add_argument("--size-range", type=float, nargs=2, default=None, metavar=("LO", "HI"))
    s.add_argument("--s-max", type=float, default=S_MAX)
    s.add_argument("--expert-fraction", type=float, default=0.8, help="N_a rule for scaling-law fits")
    s.add_argument("--out", choices=("table", "csv", "json"), default="table")
    s.add_argument("--output", default=None, help="file to write instead of stdout")
    s.set_defaults(func=cmd_frontier)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic runs from a known truth")
    s.add_argument("--truth", required=True)
    s.add_argument("--design", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate", parents=[common], help="run the acceptance checks on synthetic designs")
    s.add_argument("--out", required=True, help="directory for the artifact tree")
    s.add_argument("--criteria", type=lambda t: [int(v) for v in t.split(",")], default=None)
    s.add_argument("--repeat", action="store_true", help="run twice and compare the trees byte for byte")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("report", parents=[common], help="merge metrics from fit artifacts")
    s.add_argument("--fit", action="append", required=True)
    s.add_argument("--out", choices=("table", "csv", "json"), default="table")
    s.add_argument("--output", default=None)
    s.set_defaults(func=cmd_report)
    return p


def _apply_env(parser: argparse.ArgumentParser) -> None:
    """Default every optional flag from MOESCALE_<DEST> when set."""
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                _apply_env(sp)
            continue
        if not action.option_strings or action.required or action.dest in ("help", "version"):
            continue
        raw = os.environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = raw.strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            action.default = [action.type(v) if action.type else v for v in raw.split(",")]
        else:
            try:
                action.default = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{ENV_PREFIX}{action.dest.upper()}: {exc}") from None


def _error(kind: str, message: str) -> None:
    sys.stderr.write(f"{PROG}: error[{kind}]: {' '.join(str(message).split())}\n")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        _apply_env(parser)
    except UsageError as exc:
        _error("usage", str(exc))
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        _error("usage", str(exc))
        return 2
    except MoeScaleError as exc:
        _error(getattr(exc, "kind", "data"), str(exc))
        return 1
    except FileNotFoundError as exc:
        _error("missing-file", str(exc))
        return 1
    except (ValueError, KeyError, OSError) as exc:
        _error("data", str(exc))
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
