"""Bayesian estimation by Metropolis-within-Gibbs sampling.

Each sweep draws every respondent's profile from its exact full conditional
(a categorical over the 2**K classes), then class proportions and slip/guess
parameters from their Beta/Dirichlet conjugate conditionals, then RRUM and
CRUM/LCDM item parameters by per-scalar Gaussian random-walk Metropolis on an
unconstrained scale.  Proposal scales adapt toward a 0.234 acceptance rate
during burn-in only, so post-burn-in draws keep detailed balance.

Slip and guessing summaries transform every retained draw and then average;
averaging coefficients first and transforming once would hide the posterior
multimodality that the per-draw transform exposes for logistic-link models
in small samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, logsumexp

from .core import Dataset, DomainError, LatentStructure, QMatrix
from .models import GATE_MODELS, MODELS, ItemParams, prob_table
from .rng import derive_seed

_PROB_CLIP = 1e-12
_ADAPT_TARGET = 0.234


@dataclass(frozen=True)
class McmcSettings:
    """Chain layout; defaults follow common practice for these models."""

    chains: int = 3
    iterations: int = 5000
    burn_in: int = 2000
    thin: int = 1

    def __post_init__(self):
        if self.chains < 1:
            raise DomainError("need at least one chain")
        if not 0 <= self.burn_in < self.iterations:
            raise DomainError("burn-in must be shorter than the chain")
        if self.thin < 1:
            raise DomainError("thinning interval must be >= 1")


@dataclass(frozen=True)
class PriorSpec:
    """Uniform/weakly-informative priors.

    Class proportions get Dirichlet(1); probability-scale item parameters get
    Beta(1, 1); CRUM/LCDM main effects get a positive-truncated normal and
    intercepts/interactions a normal, both centered at zero with
    ``coef_scale`` interpreted as a variance (set ``scale_is_precision`` for
    the precision reading used by some BUGS-family tools).
    """

    dirichlet: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0
    coef_scale: float = 10.0
    scale_is_precision: bool = False

    @property
    def coef_var(self) -> float:
        return 1.0 / self.coef_scale if self.scale_is_precision else self.coef_scale


@dataclass
class MhState:
    """Random-walk Metropolis state for one item-parameter block."""

    values: np.ndarray  # J x S natural-scale parameters, NaN-free on valid slots
    valid: np.ndarray  # J x S slot validity
    log_scales: np.ndarray  # J x S proposal log standard deviations
    accept_count: np.ndarray
    proposal_count: np.ndarray

    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.proposal_count > 0,
                            self.accept_count / self.proposal_count, np.nan)


@dataclass
class PosteriorSummary:
    """Pooled posterior summaries and convergence diagnostics."""

    model: str
    item_params: list[ItemParams]
    slip_eap: np.ndarray = field(repr=False)
    guess_eap: np.ndarray = field(repr=False)
    slip_draws: np.ndarray = field(repr=False)
    guess_draws: np.ndarray = field(repr=False)
    class_probs_eap: np.ndarray = field(repr=False)
    profile_posterior: np.ndarray = field(repr=False)
    map_profiles: np.ndarray = field(repr=False)
    marginal_map_profiles: np.ndarray = field(repr=False)
    rhat: dict[str, float]
    max_rhat: float
    convergence_warning: bool
    single_chain: bool
    acceptance_rates: dict[str, float]
    multimodality_items: tuple[int, ...]
    n_attributes: int
    seed: int

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "item_params": [p.to_json() for p in self.item_params],
            "slip_eap": self.slip_eap.tolist(),
            "guess_eap": self.guess_eap.tolist(),
            "class_probs_eap": self.class_probs_eap.tolist(),
            "map_profiles": self.map_profiles.tolist(),
            "max_rhat": None if np.isnan(self.max_rhat) else self.max_rhat,
            "convergence_warning": self.convergence_warning,
            "single_chain": self.single_chain,
            "acceptance_rates": self.acceptance_rates,
            "multimodality_items": list(self.multimodality_items),
            "seed": self.seed,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def dump_draws_csv(self, path) -> None:
        """Columnar dump of per-draw slip/guess values, one row per sweep."""
        J = self.slip_draws.shape[1]
        header = [f"slip_{j}" for j in range(J)] + [f"guess_{j}" for j in range(J)]
        table = np.hstack([self.slip_draws, self.guess_draws])
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            np.savetxt(fh, table, delimiter=",", fmt="%.10g")


def _as_responses(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.responses
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DomainError("responses must be an N x J matrix")
    return arr


def sample_profile_conditional(row, q: QMatrix, item_params: list[ItemParams],
                               class_probs, rng: np.random.Generator) -> int:
    """Draw one respondent's profile index from its exact full conditional."""
    row = np.asarray(row, dtype=float)
    tab = np.clip(prob_table(item_params, q), _PROB_CLIP, 1.0 - _PROB_CLIP)
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(class_probs, dtype=float)) \
            + np.log(tab) @ row + np.log1p(-tab) @ (1.0 - row)
    w = np.exp(logw - logsumexp(logw))
    w /= w.sum()
    return int(np.searchsorted(np.cumsum(w), rng.random(), side="right").clip(0, len(w) - 1))


def _truncated_beta(rng: np.random.Generator, a, b, upper) -> np.ndarray:
    """Beta(a, b) draws truncated to (0, upper).

    Rejection from the untruncated Beta covers the common case where little
    mass sits above the bound; stubborn entries fall back to inverse-CDF.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), a.shape).copy()
    draw = rng.beta(a, b)
    for _ in range(3):
        bad = draw >= upper
        if not bad.any():
            return draw
        draw[bad] = rng.beta(a[bad], b[bad])
    bad = draw >= upper
    if bad.any():
        from scipy.stats import beta as beta_dist

        hi = beta_dist.cdf(upper[bad], a[bad], b[bad])
        u = rng.random(bad.sum()) * hi
        draw[bad] = beta_dist.ppf(np.maximum(u, 1e-300), a[bad], b[bad])
    return np.clip(draw, 1e-12, upper - 1e-12)


def update_conjugate(data, profiles, q: QMatrix, model: str, rng: np.random.Generator,
                     priors: PriorSpec | None = None,
                     structure: LatentStructure | None = None,
                     current_s=None, current_g=None, truncate: bool = True) -> dict:
    """Gibbs draws for the conjugate blocks given fixed profiles.

    Slip and guess (gate models only) come from Beta conditionals over the
    ideal-response groups; class proportions from a Dirichlet count update.
    With ``truncate`` the gate conditionals impose the orientation anchor
    1 - s_j > g_j (slip truncated below 1 - g, guess below 1 - s), which
    pins the latent classes to the Q-matrix reading; without it the
    unconstrained gates admit inverted-orientation modes.
    """
    priors = priors or PriorSpec()
    responses = _as_responses(data)
    structure = structure or LatentStructure(q)
    idx = structure.profile_indices(np.asarray(profiles))
    counts = np.bincount(idx, minlength=structure.n_profiles)
    out = {"class_probs": rng.dirichlet(priors.dirichlet + counts)}
    if model in GATE_MODELS:
        gate_table = structure.eta if model == "dina" else structure.omega
        gate = gate_table[idx].astype(float)  # N x J
        x = responses.astype(float)
        n1 = gate.sum(axis=0)
        right1 = (x * gate).sum(axis=0)
        right0 = x.sum(axis=0) - right1
        wrong1 = n1 - right1
        wrong0 = (responses.shape[0] - n1) - right0
        s_a, s_b = priors.beta_a + wrong1, priors.beta_b + right1
        g_a, g_b = priors.beta_a + right0, priors.beta_b + wrong0
        if truncate:
            g_old = current_g if current_g is not None else np.full(q.n_items, 0.5)
            s_new = _truncated_beta(rng, s_a, s_b, 1.0 - np.asarray(g_old))
            out["s"] = s_new
            out["g"] = _truncated_beta(rng, g_a, g_b, 1.0 - s_new)
        else:
            out["s"] = rng.beta(s_a, s_b)
            out["g"] = rng.beta(g_a, g_b)
    return out


class _ItemGeometry:
    """Padded per-item cell layout shared by the Metropolis blocks."""

    def __init__(self, q: QMatrix, model: str, structure: LatentStructure):
        self.model = model
        self.m = structure.n_required
        self.mmax = int(self.m.max())
        self.cmax = 1 << self.mmax
        cells = np.arange(self.cmax)
        self.bits = ((cells[:, None] >> np.arange(self.mmax)) & 1).astype(float)
        # subset[c, b] = 1 when b is a subset of c; zero-padded coefficients
        # make the full matmul valid for items with fewer required attributes
        self.subset = ((cells[:, None] & cells[None, :]) == cells[None, :]).astype(float)
        if model == "rrum":
            self.n_slots = self.mmax + 1
            self.valid = np.arange(self.n_slots)[None, :] <= self.m[:, None]
        elif model == "crum":
            self.n_slots = self.mmax + 1
            self.valid = np.arange(self.n_slots)[None, :] <= self.m[:, None]
        else:  # lcdm: one slot per subset mask
            self.n_slots = self.cmax
            self.valid = np.arange(self.cmax)[None, :] < (1 << self.m)[:, None]
        self.cell_valid = np.arange(self.cmax)[None, :] < (1 << self.m)[:, None]

    def linear_predictor(self, values: np.ndarray) -> np.ndarray:
        """J x Cmax log cell probability (rrum) or cell logit (crum/lcdm)."""
        if self.model == "rrum":
            logs = np.where(self.valid, np.log(values, where=self.valid,
                                                out=np.zeros_like(values)), 0.0)
            return (logs[:, :1].T + (1.0 - self.bits) @ logs[:, 1:].T).T
        vals = np.where(self.valid, values, 0.0)
        if self.model == "crum":
            return (vals[:, :1].T + self.bits @ vals[:, 1:].T).T
        return vals @ self.subset.T

    def slot_column(self, slot: int) -> np.ndarray:
        """Cells whose linear predictor the given slot enters (as 0/1)."""
        if self.model == "rrum":
            return np.ones(self.cmax) if slot == 0 else 1.0 - self.bits[:, slot - 1]
        if self.model == "crum":
            return np.ones(self.cmax) if slot == 0 else self.bits[:, slot - 1]
        return self.subset[:, slot]

    def cell_probs(self, values: np.ndarray) -> np.ndarray:
        """J x Cmax correct-response probabilities from slot values."""
        lin = self.linear_predictor(values)
        if self.model == "rrum":
            return np.exp(lin)
        return expit(np.clip(lin, -35.0, 35.0))

    def slip_guess(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-item slip/guess implied by one draw of slot values."""
        if self.model == "rrum":
            pi = values[:, 0]
            logr = np.where(self.valid[:, 1:], np.log(values[:, 1:],
                                                      where=self.valid[:, 1:],
                                                      out=np.zeros_like(values[:, 1:])), 0.0)
            return 1.0 - pi, pi * np.exp(logr.sum(axis=1))
        vals = np.where(self.valid, values, 0.0)
        guess = expit(vals[:, 0])
        slip = 1.0 - expit(vals.sum(axis=1))
        return slip, guess


def _cell_loglik(cellp, w, y) -> np.ndarray:
    """Per-item log-likelihood from per-cell correct/total counts."""
    p = np.clip(cellp, _PROB_CLIP, 1.0 - _PROB_CLIP)
    return (y * np.log(p) + (w - y) * np.log1p(-p)).sum(axis=1)


def update_metropolis(data, profiles, q: QMatrix, model: str, state: MhState,
                      rng: np.random.Generator, priors: PriorSpec | None = None,
                      structure: LatentStructure | None = None,
                      geometry: _ItemGeometry | None = None,
                      adapt_step: float | None = None) -> MhState:
    """One sweep of per-scalar random-walk updates for RRUM/CRUM/LCDM items.

    Proposals are Gaussian on the unconstrained scale: logit for RRUM's
    baseline and penalties, log for positive-truncated main effects, identity
    for intercepts and interactions.  The state is updated in place and
    returned; when ``adapt_step`` is given, proposal scales are nudged toward
    the target acceptance rate.
    """
    if model not in ("rrum", "crum", "lcdm"):
        raise DomainError("Metropolis blocks apply to rrum, crum, and lcdm only")
    priors = priors or PriorSpec()
    responses = _as_responses(data)
    structure = structure or LatentStructure(q)
    geometry = geometry or _ItemGeometry(q, model, structure)
    idx = structure.profile_indices(np.asarray(profiles))
    cmax = geometry.cmax
    J = q.n_items
    flat = structure.masks[idx] + np.arange(J)[None, :] * cmax
    w = np.bincount(flat.ravel(), minlength=J * cmax).reshape(J, cmax).astype(float)
    y = np.bincount(flat.ravel(), weights=responses.ravel().astype(float),
                    minlength=J * cmax).reshape(J, cmax)
    _mh_sweep(state, w, y, geometry, priors, rng, adapt_step)
    return state


def _slot_kind(geometry: _ItemGeometry, slot: int) -> str:
    if geometry.model == "rrum":
        return "logit"
    if geometry.model == "crum":
        return "intercept" if slot == 0 else "positive"
    count = bin(slot).count("1")
    if count == 1:
        return "positive"
    return "intercept"  # mask 0 and interaction masks share the normal prior


def _mh_sweep(state: MhState, w, y, geometry: _ItemGeometry, priors: PriorSpec,
              rng: np.random.Generator, adapt_step: float | None) -> None:
    """Per-scalar random-walk pass over all items at once.

    The per-cell linear predictor (log-probability for RRUM, logit for
    CRUM/LCDM) is linear in each transformed scalar, so proposals update it
    by a rank-one increment instead of a full recompute.
    """
    var = priors.coef_var
    rrum = geometry.model == "rrum"
    lin = geometry.linear_predictor(state.values)  # J x Cmax
    cellp = np.exp(lin) if rrum else expit(lin)
    ll_old = _cell_loglik(cellp, w, y)
    for slot in range(geometry.n_slots):
        valid = state.valid[:, slot]
        if not valid.any():
            continue
        kind = _slot_kind(geometry, slot)
        eps = rng.standard_normal(len(valid)) * np.exp(state.log_scales[:, slot])
        old = state.values[:, slot]
        with np.errstate(divide="ignore", invalid="ignore"):
            if kind == "logit":
                new = expit(logit(old) + eps)
                lin_delta = np.log(new) - np.log(old)
                log_prior_delta = (np.log(new) + np.log1p(-new)
                                   - np.log(old) - np.log1p(-old))
            elif kind == "positive":
                new = old * np.exp(eps)
                lin_delta = new - old
                log_prior_delta = (new**2 - old**2) / (-2.0 * var) \
                    + np.log(new) - np.log(old)
            else:
                new = old + eps
                lin_delta = eps
                log_prior_delta = (new**2 - old**2) / (-2.0 * var)
        lin_cand = lin + np.outer(np.where(valid, lin_delta, 0.0),
                                  geometry.slot_column(slot))
        cellp_cand = np.exp(lin_cand) if rrum else expit(np.clip(lin_cand, -35.0, 35.0))
        ll_new = _cell_loglik(cellp_cand, w, y)
        log_ratio = ll_new - ll_old + log_prior_delta
        accept = valid & (np.log(rng.random(len(valid))) < log_ratio)
        state.values[accept, slot] = new[accept]
        lin[accept] = lin_cand[accept]
        ll_old = np.where(accept, ll_new, ll_old)
        state.proposal_count[valid, slot] += 1
        state.accept_count[accept, slot] += 1
        if adapt_step is not None:
            move = np.where(accept, 1.0 - _ADAPT_TARGET, -_ADAPT_TARGET)
            state.log_scales[valid, slot] += adapt_step * move[valid]
            np.clip(state.log_scales, -8.0, 4.0, out=state.log_scales)


def _init_mh_state(geometry: _ItemGeometry) -> MhState:
    """Start every chain at prior typical values.

    Chains separate through their independent streams immediately; typical
    values keep gateless logistic items flat at first so the profile draws
    organize the orientation collectively rather than freezing an item into
    an inverted basin.
    """
    J, S = geometry.valid.shape
    if geometry.model == "rrum":
        values = np.full((J, S), 0.5)
    else:
        values = np.zeros((J, S))
        for slot in range(S):
            if _slot_kind(geometry, slot) == "positive":
                values[:, slot] = 1.0
    values = np.where(geometry.valid, values, 0.0 if geometry.model != "rrum" else 0.5)
    return MhState(
        values=values,
        valid=geometry.valid.copy(),
        log_scales=np.zeros((J, S)),
        accept_count=np.zeros((J, S)),
        proposal_count=np.zeros((J, S)),
    )


def _rhat(chains: np.ndarray) -> float:
    """Potential scale reduction factor over (chains, draws)."""
    c, t = chains.shape
    if c < 2 or t < 4:
        return float("nan")
    means = chains.mean(axis=1)
    variances = chains.var(axis=1, ddof=1)
    w = variances.mean()
    b = t * means.var(ddof=1)
    if w <= 1e-300:
        return 1.0 if b <= 1e-300 else float("inf")
    var_plus = (t - 1) / t * w + b / t
    return float(np.sqrt(var_plus / w))


class _ChainRun:
    """Retained draws from one chain."""

    def __init__(self):
        self.s = []
        self.g = []
        self.values = []
        self.class_probs = []
        self.slip = []
        self.guess = []
        self.profile_counts = None
        self.mh_state = None


def fit_mcmc(data, q: QMatrix, model: str, settings: McmcSettings | None = None,
             priors: PriorSpec | None = None, seed: int = 0,
             fix_profiles=None) -> PosteriorSummary:
    """Posterior sampling for one model; pools chains into EAP/MAP summaries.

    ``fix_profiles`` clamps every respondent's profile (diagnostic use: the
    remaining blocks then sample their exact conditional posteriors).
    Chains use independent derived streams, so results are reproducible for
    a fixed seed regardless of scheduling.
    """
    settings = settings or McmcSettings()
    priors = priors or PriorSpec()
    if model not in MODELS:
        raise DomainError(f"unknown model {model!r}")
    responses = _as_responses(data)
    if responses.shape[1] != q.n_items:
        raise DomainError("responses and Q-matrix disagree on the item count")
    structure = LatentStructure(q)
    N, J = responses.shape
    L = structure.n_profiles
    X = responses.astype(np.float64)
    Xc = 1.0 - X
    gate_model = model in GATE_MODELS
    geometry = None if gate_model else _ItemGeometry(q, model, structure)
    fixed_idx = None
    if fix_profiles is not None:
        fixed_idx = structure.profile_indices(np.asarray(fix_profiles))

    runs = []
    for chain in range(settings.chains):
        rng = np.random.default_rng(derive_seed(seed, "chain", chain))
        run = _ChainRun()
        run.profile_counts = np.zeros((N, L))
        class_probs = np.full(L, 1.0 / L)
        if gate_model:
            s = np.full(J, 0.5)
            g = np.full(J, 0.5)
        else:
            mh = _init_mh_state(geometry)
        idx = fixed_idx
        for sweep in range(settings.iterations):
            in_burn = sweep < settings.burn_in
            # profile full conditional (exact categorical over L classes)
            if gate_model:
                gate = structure.eta if model == "dina" else structure.omega
                tab = gate * (1.0 - s)[None, :] + (1 - gate) * g[None, :]
            else:
                cellp = geometry.cell_probs(mh.values)
                tab = cellp[np.arange(J)[None, :], structure.masks]
            tab = np.clip(tab, _PROB_CLIP, 1.0 - _PROB_CLIP)
            if fixed_idx is None:
                logw = (np.log(class_probs)[None, :]
                        + X @ np.log(tab).T + Xc @ np.log1p(-tab).T)
                logw -= logw.max(axis=1, keepdims=True)
                wmat = np.exp(logw)
                cum = np.cumsum(wmat, axis=1)
                u = rng.random(N) * cum[:, -1]
                idx = np.minimum((cum < u[:, None]).sum(axis=1), L - 1)
            # conjugate blocks
            counts = np.bincount(idx, minlength=L)
            class_probs = rng.dirichlet(priors.dirichlet + counts)
            if gate_model:
                gate_rows = (structure.eta if model == "dina" else structure.omega)[idx]
                gate_rows = gate_rows.astype(float)
                n1 = gate_rows.sum(axis=0)
                right1 = (X * gate_rows).sum(axis=0)
                right0 = X.sum(axis=0) - right1
                s = _truncated_beta(rng, priors.beta_a + (n1 - right1),
                                    priors.beta_b + right1, 1.0 - g)
                g = _truncated_beta(rng, priors.beta_a + right0,
                                    priors.beta_b + (N - n1) - right0, 1.0 - s)
            else:
                flat = structure.masks[idx] + np.arange(J)[None, :] * geometry.cmax
                w = np.bincount(flat.ravel(), minlength=J * geometry.cmax)
                w = w.reshape(J, geometry.cmax).astype(float)
                y = np.bincount(flat.ravel(), weights=X.ravel(),
                                minlength=J * geometry.cmax).reshape(J, geometry.cmax)
                step = 2.0 / (sweep + 1.0) ** 0.6 if in_burn else None
                _mh_sweep(mh, w, y, geometry, priors, rng, step)
            if in_burn or (sweep - settings.burn_in) % settings.thin:
                continue
            # retained draw
            run.class_probs.append(class_probs)
            np.add.at(run.profile_counts, (np.arange(N), idx), 1.0)
            if gate_model:
                run.s.append(s.copy())
                run.g.append(g.copy())
                run.slip.append(s.copy())
                run.guess.append(g.copy())
            else:
                run.values.append(mh.values.copy())
                slip, guess = geometry.slip_guess(mh.values)
                run.slip.append(slip)
                run.guess.append(guess)
        if not gate_model:
            run.mh_state = mh
        runs.append(run)

    return _summarize(model, q, structure, geometry, runs, settings, priors, seed)


def _summarize(model, q, structure, geometry, runs, settings, priors, seed):
    J = q.n_items
    gate_model = model in GATE_MODELS
    slip_chains = np.stack([np.array(r.slip) for r in runs])  # C x T x J
    guess_chains = np.stack([np.array(r.guess) for r in runs])
    cp_chains = np.stack([np.array(r.class_probs) for r in runs])
    slip_draws = slip_chains.reshape(-1, J)
    guess_draws = guess_chains.reshape(-1, J)
    # transform-then-average: the EAP of slip/guess is the mean of per-draw
    # transformed values, never the transform of averaged coefficients
    slip_eap = slip_chains.mean(axis=(0, 1))
    guess_eap = guess_chains.mean(axis=(0, 1))
    class_probs_eap = cp_chains.mean(axis=(0, 1))

    rhat: dict[str, float] = {}
    scalars: dict[str, np.ndarray] = {}
    if gate_model:
        s_chains = np.stack([np.array(r.s) for r in runs])
        g_chains = np.stack([np.array(r.g) for r in runs])
        eap_s = s_chains.mean(axis=(0, 1))
        eap_g = g_chains.mean(axis=(0, 1))
        item_params = [ItemParams(model, slip=float(eap_s[j]), guess=float(eap_g[j]))
                       for j in range(J)]
        for j in range(J):
            scalars[f"item{j}.s"] = s_chains[:, :, j]
            scalars[f"item{j}.g"] = g_chains[:, :, j]
    else:
        value_chains = np.stack([np.array(r.values) for r in runs])  # C x T x J x S
        eap_values = value_chains.mean(axis=(0, 1))
        item_params = _params_from_values(model, structure, geometry, eap_values)
        for j in range(J):
            for slot in range(geometry.n_slots):
                if not geometry.valid[j, slot]:
                    continue
                scalars[f"item{j}.{_slot_name(model, structure, j, slot)}"] = \
                    value_chains[:, :, j, slot]
    for ell in range(cp_chains.shape[2]):
        scalars[f"class_probs{ell}"] = cp_chains[:, :, ell]
    for name, chains in scalars.items():
        rhat[name] = _rhat(chains)
    finite = [v for v in rhat.values() if np.isfinite(v)]
    max_rhat = float(max(finite)) if finite else float("nan")
    single_chain = settings.chains == 1

    counts = sum(r.profile_counts for r in runs)
    profile_posterior = counts / counts.sum(axis=1, keepdims=True)
    map_idx = np.argmax(counts, axis=1)
    K = structure.space.n_attributes
    map_profiles = ((map_idx[:, None] >> np.arange(K)) & 1).astype(np.int8)
    marg = profile_posterior @ structure.space.bits.astype(float)
    marginal_map = (marg >= 0.5).astype(np.int8)

    near0 = (slip_draws <= 0.02).mean(axis=0)
    near1 = (slip_draws >= 0.98).mean(axis=0)
    multimodal = tuple(int(j) for j in np.nonzero((near0 > 0.05) & (near1 > 0.05))[0])

    acceptance: dict[str, float] = {}
    if not gate_model:
        per_item = []
        for j in range(J):
            rates = []
            for r in runs:
                rr = r.mh_state.acceptance_rates()[j]
                rates.extend(rr[r.mh_state.valid[j]].tolist())
            per_item.append(float(np.nanmean(rates)))
        acceptance = {"overall": float(np.nanmean(per_item)),
                      **{f"item{j}": v for j, v in enumerate(per_item)}}

    return PosteriorSummary(
        model=model,
        item_params=item_params,
        slip_eap=slip_eap,
        guess_eap=guess_eap,
        slip_draws=slip_draws,
        guess_draws=guess_draws,
        class_probs_eap=class_probs_eap,
        profile_posterior=profile_posterior,
        map_profiles=map_profiles,
        marginal_map_profiles=marginal_map,
        rhat=rhat,
        max_rhat=max_rhat,
        convergence_warning=bool(np.isfinite(max_rhat) and max_rhat > 1.1),
        single_chain=single_chain,
        acceptance_rates=acceptance,
        multimodality_items=multimodal,
        n_attributes=K,
        seed=seed,
    )


def _slot_name(model: str, structure: LatentStructure, j: int, slot: int) -> str:
    if model == "rrum":
        if slot == 0:
            return "pi"
        return f"r{int(structure.required[j][slot - 1])}"
    return f"coef{slot}"


def _params_from_values(model, structure, geometry, values) -> list[ItemParams]:
    out = []
    for j in range(values.shape[0]):
        m = structure.n_required[j]
        if model == "rrum":
            req = structure.required[j]
            penalties = {int(k): float(np.clip(values[j, t + 1], 1e-12, 1 - 1e-12))
                         for t, k in enumerate(req)}
            out.append(ItemParams("rrum", pi=float(np.clip(values[j, 0], 1e-12, 1.0)),
                                  penalties=penalties))
        elif model == "crum":
            coefs = {0: float(values[j, 0])}
            coefs.update({1 << t: float(values[j, t + 1]) for t in range(m)})
            out.append(ItemParams("crum", coefs=coefs))
        else:
            coefs = {mask: float(values[j, mask]) for mask in range(1 << m)}
            out.append(ItemParams("lcdm", coefs=coefs))
    return out
