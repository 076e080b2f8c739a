"""Synthetic data generation for the simulation study.

Attribute profiles come from a multivariate normal threshold model with
equicorrelated latent traits; attribute k (1-based) is mastered when its
trait exceeds the standard normal quantile at k/(K+1), so later attributes
are harder.  Item parameters are drawn so that every model's implied slip
and guessing values reproduce uniform draws from the chosen discrimination
range exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logit
from scipy.stats import norm

from .core import (
    Dataset,
    DomainError,
    GenerationError,
    LatentStructure,
    QMatrix,
    Truth,
    validate_q,
)
from .models import ItemParams, cell_probs, slip_guess_of
from .rng import derive_seed

DISCRIMINATION_RANGES = {"high": (0.0, 0.15), "low": (0.25, 0.4)}
SUPPORTED_DESIGNS = {(4, 20), (4, 40), (5, 20), (5, 40)}
_MAX_RETRIES = 1000


@dataclass(frozen=True)
class GenConfig:
    """One dataset's generating configuration."""

    n_respondents: int
    model: str
    q: QMatrix
    discrimination: str
    rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_respondents < 1:
            raise DomainError("need at least one respondent")
        if self.discrimination not in DISCRIMINATION_RANGES:
            raise DomainError(f"discrimination must be one of {sorted(DISCRIMINATION_RANGES)}")
        if not 0.0 <= self.rho < 1.0:
            raise DomainError("attribute correlation must lie in [0, 1)")


@dataclass(frozen=True)
class MisspecPlan:
    """Ten misspecified Q-matrix variants plus flip bookkeeping."""

    rate: float
    n_under: int
    n_over: int
    protected_rows: tuple[int, ...]
    variants: tuple[QMatrix, ...]


@dataclass(frozen=True)
class PerfectPatternReport:
    """Items every respondent answered identically."""

    all_correct: tuple[int, ...]
    all_incorrect: tuple[int, ...]

    @property
    def flagged(self) -> bool:
        return bool(self.all_correct or self.all_incorrect)


def attribute_thresholds(n_attributes: int) -> np.ndarray:
    """Latent-trait mastery cutoffs; attribute k uses quantile k/(K+1)."""
    k = np.arange(1, n_attributes + 1)
    return norm.ppf(k / (n_attributes + 1))


def gen_attributes(n_respondents: int, n_attributes: int, rho: float, seed: int,
                   return_theta: bool = False):
    """Draw N x K binary mastery profiles from the threshold model."""
    if n_attributes < 1:
        raise DomainError("need at least one attribute")
    if not 0.0 <= rho < 1.0:
        raise DomainError("attribute correlation must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_respondents, n_attributes))
    cov = np.full((n_attributes, n_attributes), rho)
    np.fill_diagonal(cov, 1.0)
    theta = z @ np.linalg.cholesky(cov).T
    alpha = (theta >= attribute_thresholds(n_attributes)).astype(np.int8)
    if return_theta:
        return alpha, theta
    return alpha


def _combo_rows(n_attributes: int, sizes) -> list[np.ndarray]:
    """All Q-matrix rows whose attribute count is in ``sizes``, ascending mask order."""
    rows = []
    for mask in range(1, 1 << n_attributes):
        if bin(mask).count("1") in sizes:
            rows.append((mask >> np.arange(n_attributes)) & 1)
    return [r.astype(np.int8) for r in rows]


def _draw_in_sets(pool: list[np.ndarray], count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Draw without replacement within each full pass over the pool."""
    drawn: list[np.ndarray] = []
    while len(drawn) < count:
        order = rng.permutation(len(pool))
        take = min(count - len(drawn), len(pool))
        drawn.extend(pool[i] for i in order[:take])
    return drawn


def build_q(n_attributes: int, n_items: int, seed: int) -> QMatrix:
    """Construct a study Q-matrix for one of the four supported designs.

    K=4 designs stack every nonzero attribute combination (one or two such
    stacks) plus random draws from the two- and three-attribute items; K=5
    designs stack the single-attribute items plus such draws.  Draws are
    resampled until the result is complete and passes the identifiability
    proxy.
    """
    if (n_attributes, n_items) not in SUPPORTED_DESIGNS:
        raise DomainError(
            f"unsupported design (K={n_attributes}, J={n_items}); "
            f"supported: {sorted(SUPPORTED_DESIGNS)}"
        )
    rng = np.random.default_rng(seed)
    pool = _combo_rows(n_attributes, {2, 3})
    if n_attributes == 4:
        base = _combo_rows(4, {1, 2, 3, 4})
        fixed = base if n_items == 20 else base + base
        n_draws = 5 if n_items == 20 else 10
    else:
        singles = _combo_rows(5, {1})
        fixed = singles if n_items == 20 else singles + singles
        n_draws = 15 if n_items == 20 else 30
    for _ in range(_MAX_RETRIES):
        rows = fixed + _draw_in_sets(pool, n_draws, rng)
        q = QMatrix(np.vstack(rows))
        report = validate_q(q)
        if report.complete and report.identifiable_proxy:
            return q
    raise GenerationError("could not build a valid Q-matrix within the retry budget")


def misspecify_q(q: QMatrix, rate: float, seed: int, n_variants: int = 10) -> MisspecPlan:
    """Generate randomly misspecified Q-matrix variants.

    Each variant flips round(rate*J*K) entries (reduced by one if odd so
    underspecified 1->0 and overspecified 0->1 flips balance), never touching
    single-attribute items, and is resampled until it keeps the original
    matrix's completeness and identifiability-proxy flags.
    """
    if rate == 0:
        return MisspecPlan(rate=0.0, n_under=0, n_over=0, protected_rows=(),
                           variants=(q,))
    if not 0.0 < rate < 1.0:
        raise DomainError("misspecification rate must lie in [0, 1)")
    entries = q.entries
    total = int(round(rate * q.n_items * q.n_attributes))
    if total % 2:
        total -= 1
    half = total // 2
    if half == 0:
        raise DomainError(f"rate {rate} yields no flips for this Q-matrix")
    protected = np.nonzero(entries.sum(axis=1) == 1)[0]
    eligible = np.ones(q.n_items, dtype=bool)
    eligible[protected] = False
    ones = np.argwhere((entries == 1) & eligible[:, None])
    zeros = np.argwhere((entries == 0) & eligible[:, None])
    if len(ones) < half or len(zeros) < half:
        raise GenerationError(
            f"cannot place {half} under- and {half} over-flips outside single-attribute items"
        )
    target = validate_q(q)
    rng = np.random.default_rng(seed)
    variants = []
    for _ in range(n_variants):
        for _ in range(_MAX_RETRIES):
            flipped = entries.copy()
            under = ones[rng.choice(len(ones), size=half, replace=False)]
            over = zeros[rng.choice(len(zeros), size=half, replace=False)]
            flipped[under[:, 0], under[:, 1]] = 0
            flipped[over[:, 0], over[:, 1]] = 1
            if (flipped.sum(axis=1) == 0).any():
                continue
            candidate = QMatrix(flipped)
            report = validate_q(candidate)
            if (report.complete == target.complete
                    and report.identifiable_proxy == target.identifiable_proxy):
                variants.append(candidate)
                break
        else:
            raise GenerationError("misspecified Q-matrix retry budget exhausted")
    return MisspecPlan(rate=rate, n_under=half, n_over=half,
                       protected_rows=tuple(int(r) for r in protected),
                       variants=tuple(variants))


def gen_item_params(model: str, q: QMatrix, discrimination: str,
                    seed: int) -> tuple[list[ItemParams], np.ndarray, np.ndarray]:
    """Draw true item parameters matching uniform slip/guess targets.

    Slip and guess are drawn per item from the discrimination range; RRUM,
    CRUM, and LCDM parameters are then built so their implied slip/guess
    values equal the draws exactly, spreading the effect mass over required
    attributes (and, for LCDM, interaction subsets) with flat Dirichlet
    weights.
    """
    if discrimination not in DISCRIMINATION_RANGES:
        raise DomainError(f"discrimination must be one of {sorted(DISCRIMINATION_RANGES)}")
    lo, hi = DISCRIMINATION_RANGES[discrimination]
    rng = np.random.default_rng(seed)
    slips = rng.uniform(lo, hi, size=q.n_items)
    guesses = rng.uniform(lo, hi, size=q.n_items)
    params = []
    for j in range(q.n_items):
        s, g = float(slips[j]), float(guesses[j])
        req = np.nonzero(q.entries[j])[0]
        m = len(req)
        if model in ("dina", "dino"):
            params.append(ItemParams(model, slip=s, guess=g))
            continue
        if model == "rrum":
            weights = rng.dirichlet(np.ones(m))
            log_total = np.log(g / (1.0 - s))
            penalties = {int(k): float(np.exp(w * log_total)) for k, w in zip(req, weights)}
            params.append(ItemParams("rrum", pi=1.0 - s, penalties=penalties))
            continue
        gap = float(logit(1.0 - s) - logit(g))
        if model == "crum":
            weights = rng.dirichlet(np.ones(m))
            coefs = {0: float(logit(g))}
            for t, w in enumerate(weights):
                coefs[1 << t] = float(w * gap)
        elif model == "lcdm":
            n_effects = (1 << m) - 1
            weights = rng.dirichlet(np.ones(n_effects))
            coefs = {0: float(logit(g))}
            for mask, w in zip(range(1, 1 << m), weights):
                coefs[mask] = float(w * gap)
        else:
            raise DomainError(f"unknown model {model!r}")
        params.append(ItemParams(model, coefs=coefs))
    return params, slips, guesses


def simulate_responses(profiles, item_params: list[ItemParams], q: QMatrix,
                       seed: int) -> np.ndarray:
    """Bernoulli responses given profiles and item parameters."""
    profiles = np.asarray(profiles)
    if profiles.shape[1] != q.n_attributes:
        raise DomainError("profile width must match the Q-matrix attribute count")
    structure = LatentStructure(q)
    idx = structure.profile_indices(profiles)
    probs = np.empty((profiles.shape[0], q.n_items))
    for j, params in enumerate(item_params):
        probs[:, j] = cell_probs(params, q.entries[j])[structure.masks[idx, j]]
    rng = np.random.default_rng(seed)
    return (rng.random(probs.shape) < probs).astype(np.int8)


def generate(config: GenConfig) -> Dataset:
    """Generate one dataset (profiles, item parameters, responses) with truth."""
    profiles = gen_attributes(config.n_respondents, config.q.n_attributes, config.rho,
                              derive_seed(config.seed, "profiles"))
    params, slips, guesses = gen_item_params(config.model, config.q, config.discrimination,
                                             derive_seed(config.seed, "params"))
    responses = simulate_responses(profiles, params, config.q,
                                   derive_seed(config.seed, "responses"))
    truth = Truth(profiles=profiles, item_params=params, slip=slips, guess=guesses,
                  model=config.model, seed=config.seed)
    return Dataset(responses=responses, q=config.q, truth=truth)


def detect_perfect_patterns(data) -> PerfectPatternReport:
    """Find items answered all-correct or all-incorrect by every respondent."""
    responses = data.responses if isinstance(data, Dataset) else np.asarray(data)
    col_sums = responses.sum(axis=0)
    n = responses.shape[0]
    return PerfectPatternReport(
        all_correct=tuple(int(j) for j in np.nonzero(col_sums == n)[0]),
        all_incorrect=tuple(int(j) for j in np.nonzero(col_sums == 0)[0]),
    )
