"""Command-line entry point: ``vaxsignal {mine,simulate,validate}``.

Options can also come from a flat ``key = value`` config file given with
``--config``; keys are the long flag names without leading dashes and
command-line flags win. Failures print one ``key=value`` line on stderr and
exit with 2 (configuration), 3 (input data) or 4 (pipeline).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .contingency import dump_table_csv
from .ingest import ColumnFilter, FilterPolicy, IngestError, parse_ontology, parse_reports
from .signal import (
    EmptyDataError,
    PermutationPlan,
    mine,
    prepare,
    write_ae_csv,
    write_group_csv,
    write_heatmap_csv,
    write_null,
)
from .sim import SimScenario, emit_sim_plots, run_study
from .zinb import FitConfig

EXIT_CONFIG, EXIT_DATA, EXIT_PIPELINE = 2, 3, 4
_KINDS = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_PIPELINE: "pipeline"}


class CliError(Exception):
    def __init__(self, code: int, reason: str):
        super().__init__(reason)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_CONFIG, message)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in _csv_list(text)]


def _add_data_args(p):
    p.add_argument("--reports", help="reports file (report_id,vaccines,aes)")
    p.add_argument("--ontology", help="ontology file (term,group)")
    p.add_argument("--delimiter", default=",", help="field delimiter")
    p.add_argument("--list-delimiter", default="|", help="delimiter inside list fields")
    p.add_argument("--min-ae-count", type=int, default=20)
    p.add_argument("--min-group-size", type=int, default=15)
    p.add_argument("--vaccine-whitelist", type=_csv_list, default=None,
                   help="comma-separated vaccines to keep")
    p.add_argument("--where", action="append", default=[], metavar="COL:LOW:HIGH",
                   help="inclusive range filter on an extra reports column (repeatable)")


def _add_common_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all CPUs)")


def _add_fit_args(p):
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--param-clamp", type=_float_list, default=None,
                   metavar="ALPHA[,PHI[,LOGR_LO,LOGR_HI]]",
                   help="bounds on |logit p|, |log mu| and log r")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vaxsignal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("mine", help="fit groups, run the permutation test, write signal tables")
    _add_common_args(m)
    _add_data_args(m)
    _add_fit_args(m)
    m.add_argument("--permutations", type=int, default=1000)
    m.add_argument("--alpha", type=float, default=0.01)
    m.add_argument("--s-min", type=float, default=3.0)
    m.add_argument("--dump-table", action="store_true", help="also write the contingency table")
    m.add_argument("--dump-null", action="store_true", help="also write the null distributions")
    m.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan")

    v = sub.add_parser("validate", help="ingest, filter and tabulate only")
    _add_common_args(v)
    _add_data_args(v)

    s = sub.add_parser("simulate", help="bias/MSE simulation study")
    _add_common_args(s)
    _add_fit_args(s)
    s.add_argument("--group-sizes", type=_int_list, default=[20, 50, 100, 200])
    s.add_argument("--vaccines", type=int, default=3)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--offset-mult", type=float, default=1.0)
    s.add_argument("--zip", action="store_true", help="generate without over-dispersion")
    s.add_argument("--p", type=_float_list, default=None, help="zero-inflation per vaccine")
    s.add_argument("--mu", type=_float_list, default=None, help="count mean per vaccine")
    s.add_argument("--r", type=float, default=1.2, help="dispersion")
    s.add_argument("--name", default=None, help="scenario label")
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {err.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"config line {n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, value in cfg.items():
            if key not in known or key in ("config", "help"):
                raise CliError(EXIT_CONFIG, f"unknown config key {key!r}")
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(action, argparse._AppendAction):
                value = [value]
            sub.set_defaults(**{key: value})
        args = parser.parse_args(argv)
    return args


def _fit_config(args) -> FitConfig:
    kw = {"grad_tol": args.grad_tol, "max_iter": args.max_iters}
    clamp = args.param_clamp
    if clamp:
        if len(clamp) not in (1, 2, 4):
            raise CliError(EXIT_CONFIG, "--param-clamp takes 1, 2 or 4 values")
        kw["alpha_clamp"] = clamp[0]
        if len(clamp) >= 2:
            kw["phi_clamp"] = clamp[1]
        if len(clamp) == 4:
            kw["log_r_bounds"] = (clamp[2], clamp[3])
    try:
        return FitConfig(**kw)
    except ValueError as err:
        raise CliError(EXIT_CONFIG, str(err)) from None


def _check_data_args(args):
    for name in ("reports", "ontology"):
        path = getattr(args, name)
        if not path:
            raise CliError(EXIT_CONFIG, f"--{name} is required")
        if not Path(path).is_file():
            raise CliError(EXIT_CONFIG, f"--{name} path does not exist: {path}")
    if args.min_ae_count < 0 or args.min_group_size < 0:
        raise CliError(EXIT_CONFIG, "filter thresholds must be nonnegative")
    try:
        filters = [ColumnFilter.parse(w) for w in args.where]
    except ValueError as err:
        raise CliError(EXIT_CONFIG, str(err)) from None
    policy = FilterPolicy(
        args.min_ae_count,
        args.min_group_size,
        None if args.vaccine_whitelist is None else frozenset(args.vaccine_whitelist),
    )
    return filters, policy


def _check_common(args):
    if args.seed < 0 or args.seed >= 2**64:
        raise CliError(EXIT_CONFIG, "--seed must be a 64-bit unsigned integer")
    if args.threads is not None and args.threads < 1:
        raise CliError(EXIT_CONFIG, "--threads must be >= 1")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load(args, filters, policy):
    try:
        reports = parse_reports(args.reports, args.delimiter, args.list_delimiter, filters)
        ontology = parse_ontology(args.ontology, args.delimiter)
        if not reports:
            raise EmptyDataError("reports file has no records")
        return prepare(reports, ontology, policy)
    except (IngestError, EmptyDataError, ValueError) as err:
        raise CliError(EXIT_DATA, str(err)) from None


def _snapshot(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def _out_dir(args) -> Path:
    if not args.out:
        raise CliError(EXIT_CONFIG, "--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(EXIT_CONFIG, f"cannot create output directory: {err.strerror}") from None
    return out


def cmd_mine(args) -> int:
    _check_common(args)
    filters, policy = _check_data_args(args)
    fit_config = _fit_config(args)
    if args.permutations < 1:
        raise CliError(EXIT_CONFIG, "--permutations must be >= 1")
    if not 0 < args.alpha <= 1:
        raise CliError(EXIT_CONFIG, "--alpha must lie in (0, 1]")
    if args.s_min < 0:
        raise CliError(EXIT_CONFIG, "--s-min must be nonnegative")
    plan = PermutationPlan(args.permutations, args.seed)
    if args.dry_run:
        resolved = {
            "command": "mine",
            "config": _snapshot(args),
            "filter_policy": {
                "min_ae_frequency": policy.min_ae_frequency,
                "min_group_size": policy.min_group_size,
                "vaccine_whitelist": None if policy.vaccine_whitelist is None else sorted(policy.vaccine_whitelist),
            },
            "fit_config": {
                "grad_tol": fit_config.grad_tol, "max_iter": fit_config.max_iter,
                "alpha_clamp": fit_config.alpha_clamp, "phi_clamp": fit_config.phi_clamp,
                "log_r_bounds": list(fit_config.log_r_bounds),
            },
            "permutation_plan": {"n_permutations": plan.n_permutations, "seed": plan.seed},
        }
        print(json.dumps(resolved, indent=2, sort_keys=True))
        return 0
    out = _out_dir(args)

    timings = {}
    t0 = time.perf_counter()
    data = _load(args, filters, policy)
    timings["ingest"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        result = mine(data, plan, fit_config, args.alpha, args.s_min, args.threads)
    except Exception as err:  # noqa: BLE001 - reported as a pipeline failure
        raise CliError(EXIT_PIPELINE, f"{type(err).__name__}: {err}") from None
    timings["fit_and_permute"] = time.perf_counter() - t0

    write_group_csv(result.table, out / "groups.csv")
    write_ae_csv(result.table, out / "aes.csv")
    write_heatmap_csv(result, out / "heatmap.csv")
    if args.dump_table:
        dump_table_csv(data.table, out / "table.csv")
    if args.dump_null:
        write_null(result.null_group, out / "null_group.txt")
        write_null(result.null_ae, out / "null_ae.txt")

    fits = [f for f in result.observed.fits if f is not None]
    manifest = {
        "version": __version__,
        "command": "mine",
        "config": _snapshot(args),
        "inputs": {"reports": _sha256(args.reports), "ontology": _sha256(args.ontology)},
        "seed": args.seed,
        "timings_seconds": timings,
        "data": {
            "reports": data.matrix.n_reports,
            "vaccines": len(data.vaccines),
            "aes": len(data.aes),
            "groups": len(data.groups),
            "total_weight": data.table.total,
            "unmapped_terms": dict(sorted(data.unmapped.items())),
        },
        "diagnostics": {
            "observed_nonconverged": sum(not f.converged for f in fits),
            "observed_boundary_vaccines": sum(bool(flags) for f in fits for flags in f.boundary_flags),
            "observed_r_at_bound": sum(f.r_at_bound for f in fits),
            "permutation_nonconverged": result.null_group.n_nonconverged,
            "observed_max_s": result.null_group.observed,
            "observed_max_lambda": result.null_ae.observed,
            "group_fits": {g: f.to_dict() for g, f in zip(data.groups, result.observed.fits) if f is not None},
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"flagged_groups={len(result.table.flagged_groups)} flagged_aes={len(result.table.flagged_aes)}")
    return 0


def cmd_validate(args) -> int:
    _check_common(args)
    filters, policy = _check_data_args(args)
    data = _load(args, filters, policy)
    print(f"reports={data.matrix.n_reports}")
    print(f"vaccines={len(data.vaccines)}")
    print(f"aes={len(data.aes)}")
    print(f"groups={len(data.groups)}")
    print(f"total_weight={data.table.total:.6g}")
    print(f"unmapped_terms={len(data.unmapped)}")
    print(f"unmapped_mentions={sum(data.unmapped.values())}")
    return 0


def cmd_simulate(args) -> int:
    _check_common(args)
    fit_config = _fit_config(args)
    out = _out_dir(args)
    defaults = SimScenario()
    I = args.vaccines
    p = args.p if args.p is not None else (list(defaults.p) if I == 3 else None)
    mu = args.mu if args.mu is not None else (list(defaults.mu) if I == 3 else None)
    if p is None or mu is None:
        raise CliError(EXIT_CONFIG, "--p and --mu are required unless --vaccines is 3")
    name = args.name or ("zip" if args.zip else f"mult{args.offset_mult:g}")
    try:
        scenario = SimScenario(
            name=name, group_sizes=tuple(args.group_sizes), n_vaccines=I, n_replications=args.reps,
            offset_multiplier=args.offset_mult, zip_mode=args.zip, p=tuple(p), mu=tuple(mu),
            r=args.r, seed=args.seed, fit_config=fit_config,
        )
        scenario.true_params()
    except ValueError as err:
        raise CliError(EXIT_CONFIG, str(err)) from None
    t0 = time.perf_counter()
    try:
        report = run_study(scenario)
    except Exception as err:  # noqa: BLE001
        raise CliError(EXIT_PIPELINE, f"{type(err).__name__}: {err}") from None
    elapsed = time.perf_counter() - t0
    g_path, a_path = emit_sim_plots(report, out)
    summary = {
        str(K): {
            "mse_s": report.mse_s(K).tolist(),
            "mse_lambda": report.mse_lambda(K).tolist(),
            "mean_bias_s": report.mean_bias_s(K)[0].tolist(),
            "nonconverged": report.n_nonconverged[K],
        }
        for K in scenario.group_sizes
    }
    manifest = {
        "version": __version__,
        "command": "simulate",
        "config": _snapshot(args),
        "seed": args.seed,
        "timings_seconds": {"study": elapsed},
        "summary": summary,
        "outputs": [g_path.name, a_path.name],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


COMMANDS = {"mine": cmd_mine, "validate": cmd_validate, "simulate": cmd_simulate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as err:
        reason = " ".join(str(err).split())
        print(f"vaxsignal: error code={err.code} kind={_KINDS[err.code]} reason={json.dumps(reason)}",
              file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
