"""Command-line interface: simulate, fit, study, and summarize workflows.

Exit codes: 0 success, 2 usage error, 3 data/config error, 4 numerical
failure.  Expected small-sample pathologies (boundary estimates, high R-hat,
multimodal slip posteriors, perfect response patterns) are warnings on
stderr, never nonzero exits.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._version import __version__
from .core import (
    ConfigError,
    Dataset,
    DcmError,
    DomainError,
    NumericalError,
    QMatrix,
    Truth,
)
from .datagen import GenConfig, build_q, detect_perfect_patterns, generate
from .em import EmSettings, classify_map, fit_em
from .harness import NP_RULES, StudyDesign, expand_design, run_study
from .mcmc import McmcSettings, PriorSpec, fit_mcmc
from .nonparametric import NpSettings, classify_np

MODELS = ("dina", "dino", "rrum", "crum", "lcdm")


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--model", required=True, choices=MODELS)
    p.add_argument("--n", required=True, type=int, help="number of respondents")
    p.add_argument("--j", required=True, type=int, help="number of items")
    p.add_argument("--k", required=True, type=int, help="number of attributes")
    p.add_argument("--disc", required=True, choices=("high", "low"),
                   help="item discrimination level")
    p.add_argument("--rho", type=float, default=0.5, help="attribute correlation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".", help="directory for output files")


def _add_fit(sub):
    p = sub.add_parser("fit", help="fit a model to a dataset")
    p.add_argument("--method", required=True, choices=("em", "mcmc", "np"))
    p.add_argument("--data", required=True, help="responses CSV (headerless 0/1)")
    p.add_argument("--q", required=True, help="Q-matrix CSV")
    p.add_argument("--model", required=True, choices=MODELS)
    p.add_argument("--truth", help="truth JSON sidecar; prints EACR/PACR when given")
    p.add_argument("--out", help="output JSON path (default <method>_fit.json)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4, help="EM stopping tolerance")
    p.add_argument("--max-iter", type=int, default=2000, help="EM iteration cap")
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--iters", type=int, default=5000, help="MCMC iterations per chain")
    p.add_argument("--burnin", type=int, default=2000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--dump-draws", help="also write per-draw slip/guess values to this CSV")
    p.add_argument("--rule", choices=("conjunctive", "disjunctive"),
                   help="nonparametric rule (default: by model)")


def _add_study(sub):
    p = sub.add_parser("study", help="run a factorial simulation study")
    p.add_argument("--config", required=True, help="study config JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p.add_argument("--dry-run", action="store_true", help="print cells, write nothing")
    p.add_argument("--details", action="store_true",
                   help="also write per-replication details.csv")
    p.add_argument("--quiet", action="store_true")


def _add_summarize(sub):
    p = sub.add_parser("summarize", help="marginal tables from study results")
    p.add_argument("--results", required=True, help="results.csv from a study run")
    p.add_argument("--by", default="qmis_rate",
                   help="comma-separated column factors, e.g. qmis_rate or N,J")
    p.add_argument("--filter", action="append", default=[], metavar="FACTOR=VALUE",
                   help="restrict to rows where FACTOR equals VALUE (repeatable)")
    p.add_argument("--measure", choices=("acr", "bias"), default="acr",
                   help="acr: EACR/PACR; bias: slip/guess bias and RMSE")
    p.add_argument("--out", help="also write the table to this CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcmkit",
        description="Diagnostic classification models: simulation and estimation",
    )
    parser.add_argument("--version", action="version", version=f"dcmkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_fit(sub)
    _add_study(sub)
    _add_summarize(sub)
    return parser


def cmd_simulate(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    q = build_q(args.k, args.j, args.seed)
    dataset = generate(GenConfig(n_respondents=args.n, model=args.model, q=q,
                                 discrimination=args.disc, rho=args.rho,
                                 seed=args.seed))
    np.savetxt(out_dir / "responses.csv", dataset.responses, fmt="%d", delimiter=",")
    q.to_csv(out_dir / "q.csv")
    truth = dataset.truth
    with open(out_dir / "truth.json", "w") as fh:
        json.dump({
            "model": truth.model,
            "seed": truth.seed,
            "rho": args.rho,
            "discrimination": args.disc,
            "profiles": truth.profiles.tolist(),
            "slip": truth.slip.tolist(),
            "guess": truth.guess.tolist(),
            "item_params": [p.to_json() for p in truth.item_params],
        }, fh, indent=2)
    print(f"wrote responses.csv, q.csv, truth.json to {out_dir}")
    return 0


def _load_responses(path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DomainError(f"cannot read responses from {path}: {exc}") from exc
    return Dataset(responses=arr).responses


def _print_accuracy(est_profiles: np.ndarray, truth_path: str) -> None:
    with open(truth_path) as fh:
        truth = json.load(fh)
    true_profiles = np.asarray(truth["profiles"])
    if true_profiles.shape != est_profiles.shape:
        raise DomainError("truth sidecar profiles do not match the dataset shape")
    elem = float((est_profiles == true_profiles).mean())
    pattern = float((est_profiles == true_profiles).all(axis=1).mean())
    print(f"EACR {elem:.4f}  PACR {pattern:.4f}")


def cmd_fit(args) -> int:
    responses = _load_responses(args.data)
    q = QMatrix.from_csv(args.q)
    out_path = Path(args.out) if args.out else Path(f"{args.method}_fit.json")
    perfect = detect_perfect_patterns(responses)
    if args.method == "em":
        if perfect.flagged:
            print(f"warning: perfect response pattern on items "
                  f"{sorted(perfect.all_correct + perfect.all_incorrect)}; "
                  f"estimates will sit at the boundary", file=sys.stderr)
        fit = fit_em(responses, q, args.model,
                     EmSettings(tol=args.tol, max_iter=args.max_iter), seed=args.seed)
        if fit.boundary_items:
            print(f"warning: boundary estimates for items {list(fit.boundary_items)}",
                  file=sys.stderr)
        fit.save(out_path)
        est = classify_map(fit)
    elif args.method == "mcmc":
        settings = McmcSettings(chains=args.chains, iterations=args.iters,
                                burn_in=args.burnin, thin=args.thin)
        summary = fit_mcmc(responses, q, args.model, settings, PriorSpec(),
                           seed=args.seed)
        if summary.single_chain:
            print("warning: single chain; R-hat not available", file=sys.stderr)
        elif summary.convergence_warning:
            print(f"warning: max R-hat {summary.max_rhat:.3f} exceeds 1.1",
                  file=sys.stderr)
        if summary.multimodality_items:
            print(f"warning: multimodal slip posterior for items "
                  f"{list(summary.multimodality_items)}", file=sys.stderr)
        summary.save(out_path)
        if args.dump_draws:
            summary.dump_draws_csv(args.dump_draws)
        est = summary.map_profiles
    else:
        if args.model == "lcdm":
            raise UsageError("nonparametric classification is unsupported for lcdm")
        rule = args.rule or NP_RULES[args.model]
        result = classify_np(responses, q, NpSettings(rule=rule, seed=args.seed))
        result.save(out_path)
        est = result.profiles
    print(f"wrote {out_path}")
    if args.truth:
        _print_accuracy(est, args.truth)
    return 0


def cmd_study(args) -> int:
    try:
        with open(args.config) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    design = StudyDesign.from_dict(config)
    cells, warnings = expand_design(design)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.dry_run:
        for cell in cells:
            print(cell.label())
        print(f"{len(cells)} cells x {design.replications} replications")
        return 0
    progress = None
    if not args.quiet:
        def progress(result):
            print(f"done {result.cell.label()} ({result.wall_time:.1f}s)", flush=True)
    run_study(design, args.out_dir, parallelism=args.parallel,
              collect_details=args.details, progress=progress)
    print(f"wrote results.csv and manifest.json to {args.out_dir}")
    return 0


_MEASURES = {"acr": ["eacr", "pacr"],
             "bias": ["bias_slip", "rmse_slip", "bias_guess", "rmse_guess"]}


def cmd_summarize(args) -> int:
    import pandas as pd

    try:
        table = pd.read_csv(args.results)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read results: {exc}") from exc
    by = [c.strip() for c in args.by.split(",") if c.strip()]
    for col in by:
        if col not in table.columns:
            raise UsageError(f"unknown factor {col!r}; columns: {', '.join(table.columns)}")
    for clause in args.filter:
        if "=" not in clause:
            raise UsageError(f"filter must look like FACTOR=VALUE, got {clause!r}")
        col, value = clause.split("=", 1)
        if col not in table.columns:
            raise UsageError(f"unknown factor {col!r}")
        series = table[col]
        try:
            typed = series.dtype.type(value)
        except (TypeError, ValueError):
            typed = value
        table = table[series == typed]
    if table.empty:
        raise ConfigError("no rows remain after filtering")
    values = _MEASURES[args.measure]
    pivot = table.pivot_table(index=["method", "model"], columns=by,
                              values=values, aggfunc="mean")
    pivot = pivot.reorder_levels(list(range(1, pivot.columns.nlevels)) + [0], axis=1)
    pivot = pivot.sort_index(axis=1)
    print(pivot.round(4).to_string())
    if args.out:
        pivot.to_csv(args.out, float_format="%.6f")
        print(f"wrote {args.out}")
    return 0


class UsageError(DcmError):
    """Bad flag combination detected after argparse."""


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"simulate": cmd_simulate, "fit": cmd_fit,
                "study": cmd_study, "summarize": cmd_summarize}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except DcmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
