"""Factorial Monte Carlo study runner.

A design cell fixes (model, N, J, K, discrimination, misspecification rate).
Within a cell, replication m draws fresh truth and responses from the true
Q-matrix; estimation uses misspecified variant ceil(m/10) when the rate is
positive.  Datasets are keyed by seeds that exclude both the method and the
misspecification rate, so every method and every rate level sees identical
data: cross-method and cross-rate comparisons are paired.

Replications with a perfect response pattern (an item all-correct or
all-incorrect) are omitted from every method's aggregate.  Estimator
failures are recorded and excluded from that method's aggregate only.
"""
from __future__ import annotations

import concurrent.futures
import json
import time
from dataclasses import dataclass, field

import numpy as np

from ._version import __version__ as _pkg_version
from .core import ConfigError, EmptyCellError, QMatrix
from .datagen import (
    DISCRIMINATION_RANGES,
    GenConfig,
    build_q,
    detect_perfect_patterns,
    generate,
    misspecify_q,
)
from .em import EmSettings, classify_map, fit_em
from .mcmc import McmcSettings, PriorSpec, fit_mcmc
from .metrics import ReplicationOutcome, bias_rmse, eacr, pacr, slip_guess_from_fit
from .nonparametric import NpSettings, classify_np
from .rng import derive_seed

METHODS = ("ml", "bayes", "np")
NP_RULES = {"dina": "conjunctive", "dino": "disjunctive",
            "rrum": "conjunctive", "crum": "disjunctive"}
NP_REFERENCE_ONLY = ("rrum", "crum")

CSV_COLUMNS = ("model", "method", "N", "J", "K", "discrimination", "qmis_rate",
               "eacr", "pacr", "bias_slip", "rmse_slip", "bias_guess", "rmse_guess",
               "n_replications_used", "n_omitted")

_PAPER_DEFAULTS = {
    "models": ["dina", "dino", "rrum", "crum", "lcdm"],
    "methods": ["ml", "bayes", "np"],
    "sample_sizes": [20, 40, 160],
    "n_items": [20, 40],
    "n_attributes": [4, 5],
    "discrimination": ["high", "low"],
    "qmis_rates": [0.0, 0.10, 0.20],
}


@dataclass(frozen=True)
class StudyDesign:
    """Factor levels, replication count, and estimator budgets."""

    models: tuple[str, ...] = tuple(_PAPER_DEFAULTS["models"])
    methods: tuple[str, ...] = tuple(_PAPER_DEFAULTS["methods"])
    sample_sizes: tuple[int, ...] = tuple(_PAPER_DEFAULTS["sample_sizes"])
    n_items: tuple[int, ...] = tuple(_PAPER_DEFAULTS["n_items"])
    n_attributes: tuple[int, ...] = tuple(_PAPER_DEFAULTS["n_attributes"])
    discrimination: tuple[str, ...] = tuple(_PAPER_DEFAULTS["discrimination"])
    qmis_rates: tuple[float, ...] = tuple(_PAPER_DEFAULTS["qmis_rates"])
    replications: int = 100
    master_seed: int = 20240501
    rho: float = 0.5
    em: EmSettings = EmSettings()
    mcmc: McmcSettings = McmcSettings()
    priors: PriorSpec = PriorSpec()

    def __post_init__(self):
        problems = []
        if not self.models:
            problems.append("models: empty selection")
        for m in self.models:
            if m not in ("dina", "dino", "rrum", "crum", "lcdm"):
                problems.append(f"models: unknown model {m!r}")
        if not self.methods:
            problems.append("methods: empty selection")
        for m in self.methods:
            if m not in METHODS:
                problems.append(f"methods: unknown method {m!r}")
        for n in self.sample_sizes:
            if n < 1:
                problems.append(f"sample_sizes: invalid size {n}")
        for d in self.discrimination:
            if d not in DISCRIMINATION_RANGES:
                problems.append(f"discrimination: unknown level {d!r}")
        for r in self.qmis_rates:
            if not 0.0 <= r < 1.0:
                problems.append(f"qmis_rates: rate {r} outside [0, 1)")
        if self.replications < 1:
            problems.append("replications: must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "models": list(self.models),
            "methods": list(self.methods),
            "sample_sizes": list(self.sample_sizes),
            "n_items": list(self.n_items),
            "n_attributes": list(self.n_attributes),
            "discrimination": list(self.discrimination),
            "qmis_rates": list(self.qmis_rates),
            "replications": self.replications,
            "master_seed": self.master_seed,
            "rho": self.rho,
            "em": {"tol": self.em.tol, "max_iter": self.em.max_iter,
                   "floor": self.em.floor, "ceiling": self.em.ceiling},
            "mcmc": {"chains": self.mcmc.chains, "iterations": self.mcmc.iterations,
                     "burn_in": self.mcmc.burn_in, "thin": self.mcmc.thin},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StudyDesign":
        if not isinstance(obj, dict):
            raise ConfigError("study config must be a JSON object")
        problems = []
        kwargs = {}
        plain = {"models": str, "methods": str, "sample_sizes": int, "n_items": int,
                 "n_attributes": int, "discrimination": str, "qmis_rates": float}
        for key, kind in plain.items():
            if key not in obj:
                continue
            value = obj[key]
            if not isinstance(value, (list, tuple)):
                problems.append(f"{key}: expected a list")
                continue
            try:
                kwargs[key] = tuple(kind(v) for v in value)
            except (TypeError, ValueError):
                problems.append(f"{key}: entries must be {kind.__name__}")
        for key in ("replications", "master_seed"):
            if key in obj:
                try:
                    kwargs[key] = int(obj[key])
                except (TypeError, ValueError):
                    problems.append(f"{key}: must be an integer")
        if "rho" in obj:
            try:
                kwargs["rho"] = float(obj["rho"])
            except (TypeError, ValueError):
                problems.append("rho: must be a number")
        for key, factory in (("em", EmSettings), ("mcmc", McmcSettings)):
            if key in obj:
                if not isinstance(obj[key], dict):
                    problems.append(f"{key}: expected an object")
                    continue
                try:
                    kwargs[key] = factory(**obj[key])
                except Exception as exc:
                    problems.append(f"{key}: {exc}")
        unknown = set(obj) - set(plain) - {"replications", "master_seed", "rho", "em", "mcmc"}
        for key in sorted(unknown):
            problems.append(f"{key}: unknown field")
        if problems:
            raise ConfigError("\n".join(problems))
        return cls(**kwargs)


@dataclass(frozen=True)
class Cell:
    """One design cell plus the methods applicable to its model."""

    model: str
    n: int
    j: int
    k: int
    discrimination: str
    qmis_rate: float
    methods: tuple[str, ...]

    def label(self) -> str:
        return (f"{self.model}/N{self.n}/J{self.j}/K{self.k}/"
                f"{self.discrimination}/qmis{self.qmis_rate:g}")


@dataclass
class MethodMetrics:
    """Aggregates for one method within one cell."""

    eacr: float
    pacr: float
    bias_slip: float | None
    rmse_slip: float | None
    bias_guess: float | None
    rmse_guess: float | None
    n_used: int
    n_failed: int


@dataclass
class CellResult:
    cell: Cell
    metrics: dict[str, MethodMetrics]
    n_omitted: int
    wall_time: float
    detail_rows: list[dict] = field(default_factory=list)


def expand_design(design: StudyDesign) -> tuple[list[Cell], list[str]]:
    """Cartesian product of the factor levels, with exclusions applied.

    Nonparametric classification has no rule for the saturated LCDM and is
    dropped for it; the returned warnings name any such exclusion.
    """
    cells = []
    warnings = []
    for model in design.models:
        methods = tuple(m for m in design.methods if m != "np" or model in NP_RULES)
        if "np" in design.methods and model not in NP_RULES:
            warnings.append(f"np excluded for model {model}")
        if not methods:
            warnings.append(f"no applicable methods for model {model}; skipped")
            continue
        for n in design.sample_sizes:
            for j in design.n_items:
                for k in design.n_attributes:
                    for disc in design.discrimination:
                        for rate in design.qmis_rates:
                            cells.append(Cell(model=model, n=n, j=j, k=k,
                                              discrimination=disc, qmis_rate=rate,
                                              methods=methods))
    if not cells:
        raise ConfigError("design expands to no cells")
    return cells, warnings


def _rate_label(rate: float) -> str:
    return f"{rate:g}"


def study_q_matrix(design: StudyDesign, k: int, j: int) -> QMatrix:
    """The cell-shared true Q-matrix for one (K, J) pair."""
    return build_q(k, j, derive_seed(design.master_seed, "qmatrix", k, j))


def _fit_q_for(design: StudyDesign, true_q: QMatrix, cell: Cell, rep: int) -> QMatrix:
    if cell.qmis_rate == 0:
        return true_q
    plan = misspecify_q(true_q, cell.qmis_rate,
                        derive_seed(design.master_seed, "qmis", cell.k, cell.j,
                                    _rate_label(cell.qmis_rate)))
    variant = ((rep - 1) // 10) % len(plan.variants)
    return plan.variants[variant]


def run_cell(cell: Cell, design: StudyDesign, collect_details: bool = False) -> CellResult:
    """Run every replication of one cell and aggregate its metrics."""
    t0 = time.perf_counter()
    true_q = study_q_matrix(design, cell.k, cell.j)
    plan = None
    if cell.qmis_rate > 0:
        plan = misspecify_q(true_q, cell.qmis_rate,
                            derive_seed(design.master_seed, "qmis", cell.k, cell.j,
                                        _rate_label(cell.qmis_rate)))
    outcomes: dict[str, list[ReplicationOutcome]] = {m: [] for m in cell.methods}
    failures: dict[str, int] = {m: 0 for m in cell.methods}
    n_omitted = 0
    details: list[dict] = []
    for rep in range(1, design.replications + 1):
        data_seed = derive_seed(design.master_seed, "data", cell.model, cell.n,
                                cell.j, cell.k, cell.discrimination, rep)
        dataset = generate(GenConfig(n_respondents=cell.n, model=cell.model, q=true_q,
                                     discrimination=cell.discrimination, rho=design.rho,
                                     seed=data_seed))
        if detect_perfect_patterns(dataset).flagged:
            n_omitted += 1
            if collect_details:
                details.append({"replication": rep, "omitted": True})
            continue
        if plan is None:
            fit_q = true_q
        else:
            fit_q = plan.variants[((rep - 1) // 10) % len(plan.variants)]
        for method in cell.methods:
            fit_seed = derive_seed(design.master_seed, f"fit-{method}", cell.model,
                                   cell.n, cell.j, cell.k, cell.discrimination,
                                   _rate_label(cell.qmis_rate), rep)
            try:
                outcome = _run_method(method, dataset, fit_q, cell, design, fit_seed)
            except Exception:
                failures[method] += 1
                continue
            outcomes[method].append(outcome)
            if collect_details:
                details.append({
                    "replication": rep, "method": method, "omitted": False,
                    "eacr": float((outcome.est_profiles == outcome.true_profiles).mean()),
                    "pacr": float((outcome.est_profiles
                                   == outcome.true_profiles).all(axis=1).mean()),
                })
    metrics: dict[str, MethodMetrics] = {}
    for method in cell.methods:
        rows = outcomes[method]
        try:
            acr = eacr(rows)
            pat = pacr(rows)
        except EmptyCellError:
            metrics[method] = MethodMetrics(eacr=float("nan"), pacr=float("nan"),
                                            bias_slip=None, rmse_slip=None,
                                            bias_guess=None, rmse_guess=None,
                                            n_used=0, n_failed=failures[method])
            continue
        slip_stats = bias_rmse(rows, "slip")
        guess_stats = bias_rmse(rows, "guess")
        metrics[method] = MethodMetrics(
            eacr=acr.overall, pacr=pat,
            bias_slip=None if slip_stats is None else slip_stats.mean_bias,
            rmse_slip=None if slip_stats is None else slip_stats.mean_rmse,
            bias_guess=None if guess_stats is None else guess_stats.mean_bias,
            rmse_guess=None if guess_stats is None else guess_stats.mean_rmse,
            n_used=len(rows), n_failed=failures[method],
        )
    return CellResult(cell=cell, metrics=metrics, n_omitted=n_omitted,
                      wall_time=time.perf_counter() - t0, detail_rows=details)


def _run_method(method: str, dataset, fit_q: QMatrix, cell: Cell,
                design: StudyDesign, fit_seed: int) -> ReplicationOutcome:
    truth = dataset.truth
    common = dict(true_profiles=truth.profiles, true_slip=truth.slip,
                  true_guess=truth.guess, model=cell.model, method=method)
    if method == "ml":
        fit = fit_em(dataset, fit_q, cell.model, design.em, seed=fit_seed)
        slips, guesses = slip_guess_from_fit(fit.item_params, cell.model, fit_q)
        return ReplicationOutcome(est_profiles=classify_map(fit),
                                  est_slip=slips, est_guess=guesses, **common)
    if method == "bayes":
        summary = fit_mcmc(dataset, fit_q, cell.model, design.mcmc, design.priors,
                           seed=fit_seed)
        return ReplicationOutcome(est_profiles=summary.map_profiles,
                                  est_slip=summary.slip_eap,
                                  est_guess=summary.guess_eap, **common)
    if method == "np":
        result = classify_np(dataset, fit_q,
                             NpSettings(rule=NP_RULES[cell.model], seed=fit_seed))
        return ReplicationOutcome(est_profiles=result.profiles, **common)
    raise ConfigError(f"unknown method {method!r}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


def result_rows(result: CellResult) -> list[dict]:
    """Flatten one cell result into CSV rows, one per method."""
    rows = []
    cell = result.cell
    for method in cell.methods:
        mm = result.metrics[method]
        rows.append({
            "model": cell.model, "method": method, "N": cell.n, "J": cell.j,
            "K": cell.k, "discrimination": cell.discrimination,
            "qmis_rate": f"{cell.qmis_rate:g}",
            "eacr": mm.eacr, "pacr": mm.pacr,
            "bias_slip": mm.bias_slip, "rmse_slip": mm.rmse_slip,
            "bias_guess": mm.bias_guess, "rmse_guess": mm.rmse_guess,
            "n_replications_used": mm.n_used, "n_omitted": result.n_omitted,
        })
    return rows


def _run_cell_worker(args) -> tuple[int, CellResult]:
    index, cell, design, collect_details = args
    return index, run_cell(cell, design, collect_details)


def run_study(design: StudyDesign, out_dir, parallelism: int = 1,
              collect_details: bool = False, progress=None) -> dict:
    """Execute a study and write results.csv plus a JSON manifest.

    The CSV is written in deterministic cell order, so output is identical
    for a fixed master seed regardless of the worker count.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells, warnings = expand_design(design)
    csv_path = out_dir / "results.csv"
    details_path = out_dir / "details.csv"
    manifest: dict = {
        "design": design.to_dict(),
        "package_version": _pkg_version,
        "n_cells": len(cells),
        "warnings": warnings,
        "np_reference_only_models": [m for m in design.models if m in NP_REFERENCE_ONLY],
        "cells": [],
    }
    jobs = [(i, cell, design, collect_details) for i, cell in enumerate(cells)]
    started = time.perf_counter()
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        detail_fh = None
        if collect_details:
            detail_fh = open(details_path, "w", newline="")
            detail_fh.write("cell,replication,method,omitted,eacr,pacr\n")
        pending: dict[int, CellResult] = {}
        next_index = 0

        def drain():
            nonlocal next_index
            while next_index in pending:
                result = pending.pop(next_index)
                for row in result_rows(result):
                    fh.write(",".join(_format_value(row[c]) for c in CSV_COLUMNS) + "\n")
                if detail_fh is not None:
                    for d in result.detail_rows:
                        detail_fh.write(
                            f"{result.cell.label()},{d['replication']},"
                            f"{d.get('method', '')},{d['omitted']},"
                            f"{_format_value(d.get('eacr'))},{_format_value(d.get('pacr'))}\n")
                manifest["cells"].append({
                    "cell": result.cell.label(),
                    "n_omitted": result.n_omitted,
                    "n_failed": {m: mm.n_failed for m, mm in result.metrics.items()},
                    "wall_time_s": round(result.wall_time, 3),
                })
                if progress is not None:
                    progress(result)
                next_index += 1

        if parallelism <= 1:
            for job in jobs:
                index, result = _run_cell_worker(job)
                pending[index] = result
                drain()
        else:
            with concurrent.futures.ProcessPoolExecutor(max_workers=parallelism) as pool:
                for index, result in pool.map(_run_cell_worker, jobs):
                    pending[index] = result
                    drain()
        if detail_fh is not None:
            detail_fh.close()
    manifest["wall_time_s"] = round(time.perf_counter() - started, 3)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
