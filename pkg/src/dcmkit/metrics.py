"""Accuracy measures aggregated over replications.

Classification accuracy follows the per-replication-mean-first convention:
average the indicator over respondents within each replication, then over
replications, then (for the element-wise rate) over attributes.  Bias and
RMSE compare estimated slip/guessing values to their generating truths item
by item.  Replications flagged as omitted (perfect response patterns) are
excluded from every method's aggregate and counted separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DomainError, EmptyCellError, QMatrix
from .models import ItemParams, slip_guess_of


@dataclass(frozen=True)
class ReplicationOutcome:
    """One replication's estimates and truths for one method."""

    est_profiles: np.ndarray = field(repr=False)
    true_profiles: np.ndarray = field(repr=False)
    true_slip: np.ndarray | None = field(default=None, repr=False)
    true_guess: np.ndarray | None = field(default=None, repr=False)
    est_slip: np.ndarray | None = field(default=None, repr=False)
    est_guess: np.ndarray | None = field(default=None, repr=False)
    model: str = ""
    method: str = ""
    omitted: bool = False

    def __post_init__(self):
        if self.est_profiles.shape != self.true_profiles.shape:
            raise DomainError("estimated and true profiles must have equal shape")


@dataclass(frozen=True)
class AcrResult:
    """Element-wise rates per attribute plus their mean."""

    per_attribute: np.ndarray
    overall: float


@dataclass(frozen=True)
class BiasRmse:
    """Per-item bias and RMSE plus their means across items."""

    per_item_bias: np.ndarray
    per_item_rmse: np.ndarray
    mean_bias: float
    mean_rmse: float


def _usable(outcomes) -> list[ReplicationOutcome]:
    kept = [o for o in outcomes if not o.omitted]
    if not kept:
        raise EmptyCellError("every replication in this cell was omitted")
    return kept


def eacr(outcomes) -> AcrResult:
    """Element-wise attribute classification rate."""
    kept = _usable(outcomes)
    per_rep = np.stack([
        (o.est_profiles == o.true_profiles).mean(axis=0) for o in kept
    ])
    per_attribute = per_rep.mean(axis=0)
    return AcrResult(per_attribute=per_attribute, overall=float(per_attribute.mean()))


def pacr(outcomes) -> float:
    """Pattern-wise attribute classification rate (whole-profile matches)."""
    kept = _usable(outcomes)
    rates = [
        float((o.est_profiles == o.true_profiles).all(axis=1).mean()) for o in kept
    ]
    return float(np.mean(rates))


def bias_rmse(outcomes, which: str) -> BiasRmse | None:
    """Bias and RMSE of slip or guessing estimates; None when a method
    (nonparametric classification) produces no item-parameter estimates."""
    if which not in ("slip", "guess"):
        raise DomainError("which must be 'slip' or 'guess'")
    kept = _usable(outcomes)
    est_attr = "est_slip" if which == "slip" else "est_guess"
    true_attr = "true_slip" if which == "slip" else "true_guess"
    if any(getattr(o, est_attr) is None for o in kept):
        return None
    errors = np.stack([
        np.asarray(getattr(o, est_attr)) - np.asarray(getattr(o, true_attr))
        for o in kept
    ])  # replications x items
    per_item_bias = errors.mean(axis=0)
    per_item_rmse = np.sqrt((errors**2).mean(axis=0))
    return BiasRmse(
        per_item_bias=per_item_bias,
        per_item_rmse=per_item_rmse,
        mean_bias=float(per_item_bias.mean()),
        mean_rmse=float(per_item_rmse.mean()),
    )


def slip_guess_from_fit(item_params: list[ItemParams], model: str,
                        q: QMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Implied slip/guessing values of fitted item parameters.

    For Bayesian fits use the summary's ``slip_eap``/``guess_eap`` instead:
    those average per-draw transformed values, which this conversion of
    point estimates cannot recover.
    """
    if len(item_params) != q.n_items:
        raise DomainError("one parameter set per item required")
    slips = np.empty(q.n_items)
    guesses = np.empty(q.n_items)
    for j, params in enumerate(item_params):
        if params.model != model:
            raise DomainError(f"item {j} is parameterized as {params.model}, not {model}")
        slips[j], guesses[j] = slip_guess_of(params, q.entries[j])
    return slips, guesses
