"""Command-line surface: simulate, analyze, randomize, expand.

Exit codes: 0 success, 2 usage or configuration error, 3 estimation or
runtime failure. Reports and results go to stdout (or ``--out``);
diagnostics, including the fully resolved configuration and any
auto-drawn seed, go to stderr. Every subcommand is deterministic under
``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import streams
from .data import CsvSchema, load_csv
from .errors import CarAdjustError, EstimationError, InputError, ValidationError
from .estimators import ALL_ESTIMATORS, DIM, estimate
from .expansion import ExpansionSpec, expand_covariates
from .inference import confidence_interval, df_adjust, variance_components
from .randomization import (
    BIASED_COIN,
    POCOCK_SIMON,
    SIMPLE,
    STRATIFIED_BLOCK,
    WEI,
    RandomizationScheme,
    assign_all,
)
from .simulate import ModelSpec, emit_report, merge_reports, run_replications

_SCHEME_ALIASES = {
    "sr": SIMPLE,
    "simple": SIMPLE,
    "sbr": STRATIFIED_BLOCK,
    "stratified_block": STRATIFIED_BLOCK,
    "sbc": BIASED_COIN,
    "biased_coin": BIASED_COIN,
    "wei": WEI,
    "ps": POCOCK_SIMON,
    "pocock_simon": POCOCK_SIMON,
    "minimization": POCOCK_SIMON,
}

_MODEL_ALIASES = {"1": "model1", "2": "model2", "3": "model3",
                  "model1": "model1", "model2": "model2", "model3": "model3"}

# keys accepted in a --config file, with their parsers
_CONFIG_KEYS = {
    "model": str, "n": int, "reps": int, "scheme": str, "block_size": int,
    "pi": float, "pbc": float, "p": int, "estimators": str, "lambda_mode": str,
    "folds": int, "rate_constant": float, "seed": int, "format": str,
    "out": str, "threads": int, "mu0": float, "mu1": float, "level": float,
    "small_stratum": str,
}


def _read_config_file(path: str) -> dict:
    resolved = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{line_no}: expected key=value, got {raw.strip()!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in _CONFIG_KEYS:
                    raise InputError(f"{path}:{line_no}: unknown config key {key!r}")
                try:
                    resolved[key] = _CONFIG_KEYS[key](value)
                except ValueError:
                    raise InputError(f"{path}:{line_no}: cannot parse {value!r} for {key!r}") from None
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc
    return resolved


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        resolved.update(_read_config_file(args.config))
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
    return resolved


def _scheme_from(cfg: dict) -> RandomizationScheme:
    name = cfg["scheme"].lower()
    if name not in _SCHEME_ALIASES:
        raise InputError(f"unknown scheme {cfg['scheme']!r}; choose from {sorted(_SCHEME_ALIASES)}")
    try:
        return RandomizationScheme(
            variant=_SCHEME_ALIASES[name],
            pi=cfg["pi"],
            block_size=cfg["block_size"],
            bias_prob=cfg["pbc"],
        )
    except ValidationError as exc:
        raise InputError(str(exc)) from exc


def _seed_from(cfg: dict) -> int:
    if cfg.get("seed") is None:
        seed = streams.fresh_seed()
        print(f"seed={seed} (drawn from OS entropy; pass --seed to reproduce)", file=sys.stderr)
        return seed
    return int(cfg["seed"])


def _write_output(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _echo_config(cfg: dict) -> None:
    print("config: " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def cmd_simulate(args: argparse.Namespace) -> int:
    defaults = {
        "model": "1", "n": 200, "reps": 100, "scheme": "sr", "block_size": 6,
        "pi": 0.5, "pbc": 0.75, "p": 100, "estimators": "all",
        "lambda_mode": "cv", "folds": 5, "rate_constant": 1.0, "seed": None,
        "format": "markdown", "out": None, "threads": 1, "mu0": 0.0,
        "mu1": 0.0, "level": 0.95, "small_stratum": "reduce",
    }
    cfg = _resolve(args, defaults)
    seed = _seed_from(cfg)
    cfg["seed"] = seed
    scheme = _scheme_from(cfg)
    names = cfg["estimators"]
    estimators = ALL_ESTIMATORS if names == "all" else tuple(
        s.strip() for s in names.split(",") if s.strip()
    )
    for est_name in estimators:
        if est_name not in ALL_ESTIMATORS:
            raise InputError(f"unknown estimator {est_name!r}; choose from {ALL_ESTIMATORS}")
    models = [m.strip() for m in str(cfg["model"]).split(",") if m.strip()]
    unknown = [m for m in models if m not in _MODEL_ALIASES]
    if unknown:
        raise InputError(f"unknown model(s) {unknown}; choose from 1, 2, 3")
    _echo_config(cfg)
    reports = []
    for m in models:
        model = ModelSpec(
            name=_MODEL_ALIASES[m], mu0=cfg["mu0"], mu1=cfg["mu1"], total_covariates=cfg["p"]
        )
        reports.append(
            run_replications(
                model,
                scheme,
                n=cfg["n"],
                reps=cfg["reps"],
                estimators=estimators,
                seed=seed,
                level=cfg["level"],
                lambda_mode=cfg["lambda_mode"],
                folds=cfg["folds"],
                rate_constant=cfg["rate_constant"],
                small_stratum=cfg["small_stratum"],
                threads=cfg["threads"],
            )
        )
    report = reports[0] if len(reports) == 1 else merge_reports(reports)
    _write_output(emit_report(report, cfg["format"]), cfg["out"])
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    schema = CsvSchema(
        outcome=args.outcome,
        assignment=args.assignment,
        stratum=args.stratum,
        covariates=_analyze_covariates(args),
    )
    ds = load_csv(args.data, schema)
    options = {}
    if args.estimator in ("lasso_common", "lasso_specific"):
        lam = args.lambda_mode
        if lam not in ("cv", "rate"):
            lam = float(lam)
        seed = args.seed if args.seed is not None else streams.fresh_seed()
        if args.seed is None:
            print(f"seed={seed}", file=sys.stderr)
        options = {"lam": lam, "folds": args.folds,
                   "rate_constant": args.rate_constant, "seed": seed}
    elif args.estimator == "ols_specific":
        options = {"small_stratum": args.small_stratum}

    est = estimate(ds, args.estimator, **options)
    ve = variance_components(est, pi=args.pi)
    ci = confidence_interval(est, ve, args.level)
    result = {
        "estimator": est.kind,
        "estimate": est.estimate,
        "n": ds.n,
        "p": ds.p,
        "strata": ds.n_strata,
        "se_unadj": ve.se,
        "ci_unadj": [ci.lower, ci.upper],
        "level": args.level,
    }
    if est.adjustment is not None:
        ve_adj = df_adjust(ve, est)
        ci_adj = confidence_interval(est, ve_adj, args.level)
        result["se_adj"] = ve_adj.se
        result["ci_adj"] = [ci_adj.lower, ci_adj.upper]
        result["selected_treated"] = np.asarray(est.adjustment.selected1).tolist()
        result["selected_control"] = np.asarray(est.adjustment.selected0).tolist()
        baseline = estimate(ds, DIM)
        ve_base = variance_components(baseline, pi=args.pi)
        result["baseline_estimate"] = baseline.estimate
        result["variance_reduction"] = 1.0 - ve_adj.total / ve_base.total
    if args.json:
        result["schema_version"] = "1"
        print(json.dumps(result, sort_keys=True, indent=2))
        return 0
    print(f"estimator          {result['estimator']}")
    print(f"estimate           {result['estimate']:.6g}")
    print(f"se (unadjusted)    {result['se_unadj']:.6g}")
    print(f"ci (unadjusted)    ({ci.lower:.6g}, {ci.upper:.6g})  level {args.level}")
    if "se_adj" in result:
        print(f"se (df-adjusted)   {result['se_adj']:.6g}")
        print(f"ci (df-adjusted)   ({result['ci_adj'][0]:.6g}, {result['ci_adj'][1]:.6g})")
        print(f"selected (treated) {result['selected_treated']}")
        print(f"selected (control) {result['selected_control']}")
        print(f"variance reduction {100.0 * result['variance_reduction']:.2f}% vs unadjusted")
    return 0


def _analyze_covariates(args) -> tuple[str, ...]:
    if args.covariates is not None:
        return tuple(c.strip() for c in args.covariates.split(",") if c.strip())
    # default: every column not holding a role
    with open(args.data, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh))
    roles = {args.outcome, args.assignment, args.stratum}
    return tuple(c.strip() for c in header if c.strip() not in roles)


def cmd_randomize(args: argparse.Namespace) -> int:
    cfg = {
        "scheme": args.scheme or "sr", "pi": args.pi, "block_size": args.block_size,
        "pbc": args.pbc,
    }
    scheme = _scheme_from(cfg)
    seed = args.seed if args.seed is not None else streams.fresh_seed()
    if args.seed is None:
        print(f"seed={seed}", file=sys.stderr)
    with open(args.data, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{args.data}: file is empty")
    header, body = rows[0], rows[1:]
    strata = margins = None
    if args.stratum is not None:
        if args.stratum not in header:
            raise InputError(f"stratum column {args.stratum!r} not in header {header}")
        j = header.index(args.stratum)
        strata = np.array([row[j] for row in body], dtype=object)
    if args.margins is not None:
        cols = [c.strip() for c in args.margins.split(",") if c.strip()]
        missing = [c for c in cols if c not in header]
        if missing:
            raise InputError(f"margin column(s) {missing} not in header {header}")
        idx = [header.index(c) for c in cols]
        margins = np.array([[row[j] for j in idx] for row in body], dtype=object)
    if scheme.variant != SIMPLE and strata is None and margins is None:
        raise InputError(f"scheme {scheme.variant!r} needs --stratum (or --margins)")
    assignment = assign_all(
        scheme, n=len(body), strata=strata, margins=margins, rng=streams.substream(seed)
    )
    writer = csv.writer(sys.stdout if not args.out else open(args.out, "w", newline="", encoding="utf-8"))
    writer.writerow([*header, "assignment"])
    for row, a in zip(body, assignment):
        writer.writerow([*row, int(a)])
    return 0


def cmd_expand(args: argparse.Namespace) -> int:
    with open(args.data, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{args.data}: file is empty")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    cont = [c.strip() for c in (args.continuous or "").split(",") if c.strip()]
    binr = [c.strip() for c in (args.binary or "").split(",") if c.strip()]
    missing = [c for c in (*cont, *binr) if c not in header]
    if missing:
        raise InputError(f"column(s) {missing} not in header {header}")
    declared = [*cont, *binr]
    matrix = np.empty((len(body), len(declared)))
    for i, row in enumerate(body):
        for j, name in enumerate(declared):
            try:
                matrix[i, j] = float(row[header.index(name)])
            except ValueError:
                raise InputError(
                    f"line {i + 2}: non-numeric value {row[header.index(name)]!r} "
                    f"in column {name!r}"
                ) from None
    spec = ExpansionSpec(
        continuous=tuple(range(len(cont))),
        binary=tuple(range(len(cont), len(declared))),
        cross=not args.no_cross,
    )
    expanded, names = expand_covariates(matrix, spec, return_names=True, base_names=declared)
    passthrough = [j for j, name in enumerate(header) if name not in declared]
    writer = csv.writer(sys.stdout if not args.out else open(args.out, "w", newline="", encoding="utf-8"))
    writer.writerow([header[j] for j in passthrough] + names)
    for i, row in enumerate(body):
        writer.writerow([row[j] for j in passthrough] + [repr(float(v)) for v in expanded[i]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caradjust",
        description="Covariate-adjusted treatment effect estimation for stratified trials",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte Carlo study of the estimator family")
    sim.add_argument("--config", help="key=value config file; flags override it")
    sim.add_argument("--model", help="comma list from {1,2,3} (default 1)")
    sim.add_argument("--n", type=int, help="units per replication")
    sim.add_argument("--reps", type=int, help="number of replications")
    sim.add_argument("--scheme", help="sr | sbr | sbc | wei | ps")
    sim.add_argument("--block-size", dest="block_size", type=int)
    sim.add_argument("--pbc", type=float, help="biased-coin probability")
    sim.add_argument("--pi", type=float, help="target allocation")
    sim.add_argument("--p", type=int, help="total covariate dimension for the lasso")
    sim.add_argument("--estimators", help=f"comma list from {ALL_ESTIMATORS} or 'all'")
    sim.add_argument("--lambda-mode", dest="lambda_mode", help="cv | rate | <number>")
    sim.add_argument("--folds", type=int)
    sim.add_argument("--rate-constant", dest="rate_constant", type=float)
    sim.add_argument("--mu0", type=float)
    sim.add_argument("--mu1", type=float)
    sim.add_argument("--level", type=float)
    sim.add_argument("--small-stratum", dest="small_stratum",
                     choices=["reduce", "error", "share_common"])
    sim.add_argument("--seed", type=int)
    sim.add_argument("--format", choices=["csv", "markdown", "json"])
    sim.add_argument("--threads", type=int)
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="estimate a treatment effect from a CSV dataset")
    ana.add_argument("--data", required=True)
    ana.add_argument("--outcome", default="outcome")
    ana.add_argument("--assignment", default="assignment")
    ana.add_argument("--stratum", default="stratum")
    ana.add_argument("--covariates", help="comma list; default: every other column")
    ana.add_argument("--estimator", default="lasso_common", choices=list(ALL_ESTIMATORS))
    ana.add_argument("--lambda-mode", dest="lambda_mode", default="cv")
    ana.add_argument("--folds", type=int, default=5)
    ana.add_argument("--rate-constant", dest="rate_constant", type=float, default=1.0)
    ana.add_argument("--small-stratum", dest="small_stratum", default="reduce",
                     choices=["reduce", "error", "share_common"])
    ana.add_argument("--pi", type=float, help="design allocation; default: realized fraction")
    ana.add_argument("--level", type=float, default=0.95)
    ana.add_argument("--seed", type=int)
    ana.add_argument("--json", action="store_true")
    ana.set_defaults(func=cmd_analyze)

    rnd = sub.add_parser("randomize", help="append an assignment column to a covariate CSV")
    rnd.add_argument("--data", required=True)
    rnd.add_argument("--scheme", default="sr")
    rnd.add_argument("--stratum", help="stratum column for stratified schemes")
    rnd.add_argument("--margins", help="comma list of margin columns for minimization")
    rnd.add_argument("--pi", type=float, default=0.5)
    rnd.add_argument("--block-size", dest="block_size", type=int, default=6)
    rnd.add_argument("--pbc", type=float, default=0.75)
    rnd.add_argument("--seed", type=int)
    rnd.add_argument("--out")
    rnd.set_defaults(func=cmd_randomize)

    exp = sub.add_parser("expand", help="polynomial/interaction expansion of covariates")
    exp.add_argument("--data", required=True)
    exp.add_argument("--continuous", help="comma list of continuous columns")
    exp.add_argument("--binary", help="comma list of 0/1 columns")
    exp.add_argument("--no-cross", action="store_true", help="skip continuous-by-binary terms")
    exp.add_argument("--out")
    exp.set_defaults(func=cmd_expand)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    except CarAdjustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
