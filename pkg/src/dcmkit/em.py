"""Marginal maximum likelihood estimation via expectation-maximization.

The latent classes are the 2**K attribute profiles.  The E-step computes
responsibilities over classes; the M-step updates class proportions by
expected counts, slip/guess parameters by closed-form expected-count ratios,
and RRUM/CRUM coefficients by damped Newton ascent of the expected
complete-data log-likelihood over the collapsed profile-design cells.
Saturated items (LCDM, where coefficients and cells are in bijection) use
the exact cell-wise maximizer instead of Newton.

Probability-scale parameters are clamped to a floor/ceiling; the likelihood
is evaluated with the same clamp everywhere so the EM ascent property holds
exactly even when estimates collapse onto the boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, logsumexp

from .core import Dataset, DomainError, LatentStructure, NumericalError, QMatrix
from .datagen import detect_perfect_patterns
from .models import (
    GATE_MODELS,
    MODELS,
    ItemParams,
    prob_table,
    slip_guess_of,
    subset_mobius,
    subset_zeta,
)

_NEWTON_CAP = 50
_BACKTRACK_CAP = 30


@dataclass(frozen=True)
class EmSettings:
    """Stopping rule and numerical guards for the EM iteration."""

    tol: float = 1e-4
    max_iter: int = 2000
    floor: float = 1e-4
    ceiling: float = 1.0 - 1e-4
    init_jitter: float = 0.05

    def __post_init__(self):
        if self.tol <= 0:
            raise DomainError("tolerance must be positive")
        if not 0.0 < self.floor < self.ceiling < 1.0:
            raise DomainError("need 0 < floor < ceiling < 1")


@dataclass
class EmFit:
    """Fitted model: item parameters, class proportions, and diagnostics.

    ``boundary_items`` lists items whose probability-scale estimates sit at
    the floor or ceiling, the small-sample degeneracy where maximum
    likelihood collapses onto the edge of the parameter space.
    """

    model: str
    item_params: list[ItemParams]
    class_probs: np.ndarray = field(repr=False)
    posterior: np.ndarray = field(repr=False)
    loglik_trace: np.ndarray = field(repr=False)
    converged: bool
    n_iter: int
    boundary_items: tuple[int, ...]
    newton_flagged_items: tuple[int, ...]
    perfect_pattern_items: tuple[int, ...]
    n_attributes: int

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "item_params": [p.to_json() for p in self.item_params],
            "class_probs": self.class_probs.tolist(),
            "loglik_trace": self.loglik_trace.tolist(),
            "converged": self.converged,
            "n_iter": self.n_iter,
            "boundary_items": list(self.boundary_items),
            "newton_flagged_items": list(self.newton_flagged_items),
            "perfect_pattern_items": list(self.perfect_pattern_items),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def _as_responses(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.responses
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DomainError("responses must be an N x J matrix")
    return arr


class _EmProblem:
    """Precomputed tables and model-specific update rules for one fit."""

    def __init__(self, responses: np.ndarray, q: QMatrix, model: str, settings: EmSettings):
        if model not in MODELS:
            raise DomainError(f"unknown model {model!r}")
        if responses.shape[1] != q.n_items:
            raise DomainError("responses and Q-matrix disagree on the item count")
        self.model = model
        self.settings = settings
        self.q = q
        self.structure = LatentStructure(q)
        self.X = responses.astype(np.float64)
        self.Xc = 1.0 - self.X
        self.n, self.J = responses.shape
        self.L = self.structure.n_profiles
        self.gate = self.structure.eta if model == "dina" else self.structure.omega
        self.m = self.structure.n_required
        self.n_cells = 1 << self.m
        self.cmax = int(self.n_cells.max())
        self.flat_masks = (self.structure.masks
                           + np.arange(self.J)[None, :] * self.cmax).ravel()
        self.m_groups = {}
        for j in range(self.J):
            self.m_groups.setdefault(int(self.m[j]), []).append(j)
        self.m_groups = {m: np.array(js) for m, js in self.m_groups.items()}
        # Cell design matrices: rows are mastered-subset cells, columns the
        # intercept plus per-slot mains (crum) or every subset mask (lcdm).
        self.design = []
        for j in range(self.J):
            m = self.m[j]
            cells = np.arange(1 << m)
            bits = ((cells[:, None] >> np.arange(m)) & 1).astype(float)
            if model == "crum":
                self.design.append(np.hstack([np.ones((1 << m, 1)), bits]))
            elif model == "rrum":
                self.design.append(bits)
            else:
                self.design.append(None)

    # -- state <-> parameter objects ------------------------------------

    def initial_state(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        st = self.settings
        jit = lambda size: rng.uniform(-st.init_jitter, st.init_jitter, size=size)
        state: dict = {"class_probs": np.full(self.L, 1.0 / self.L)}
        if self.model in GATE_MODELS:
            state["s"] = np.clip(0.2 + jit(self.J), st.floor, st.ceiling)
            state["g"] = np.clip(0.2 + jit(self.J), st.floor, st.ceiling)
        elif self.model == "rrum":
            items = []
            for j in range(self.J):
                v = np.concatenate([[0.8], np.full(self.m[j], 0.6)]) + jit(self.m[j] + 1)
                items.append(np.clip(v, st.floor, st.ceiling))
            state["items"] = items
        else:
            items = []
            for j in range(self.J):
                m = self.m[j]
                if self.model == "crum":
                    v = np.concatenate([[logit(0.2)], np.full(m, 0.1)])
                else:
                    v = np.zeros(1 << m)
                    v[0] = logit(0.2)
                    v[(1 << np.arange(m))] = 0.1
                items.append(v + jit(len(v)))
            state["items"] = items
        return state

    def state_from_params(self, item_params: list[ItemParams], class_probs) -> dict:
        state: dict = {"class_probs": np.asarray(class_probs, dtype=float)}
        if self.model in GATE_MODELS:
            state["s"] = np.array([p.slip for p in item_params], dtype=float)
            state["g"] = np.array([p.guess for p in item_params], dtype=float)
        elif self.model == "rrum":
            items = []
            for j, p in enumerate(item_params):
                req = self.structure.required[j]
                items.append(np.concatenate([[p.pi], [p.penalties[int(k)] for k in req]]))
            state["items"] = items
        else:
            items = []
            for j, p in enumerate(item_params):
                v = np.zeros(1 << self.m[j]) if self.model == "lcdm" else np.zeros(self.m[j] + 1)
                if self.model == "lcdm":
                    for mask, value in p.coefs.items():
                        v[mask] = value
                else:
                    v[0] = p.coefs[0]
                    for t in range(self.m[j]):
                        v[t + 1] = p.coefs.get(1 << t, 0.0)
                items.append(v)
            state["items"] = items
        return state

    def params_from_state(self, state: dict) -> list[ItemParams]:
        out = []
        for j in range(self.J):
            if self.model in GATE_MODELS:
                out.append(ItemParams(self.model, slip=float(state["s"][j]),
                                      guess=float(state["g"][j])))
            elif self.model == "rrum":
                v = state["items"][j]
                req = self.structure.required[j]
                out.append(ItemParams("rrum", pi=float(v[0]),
                                      penalties={int(k): float(r) for k, r in zip(req, v[1:])}))
            elif self.model == "crum":
                v = state["items"][j]
                coefs = {0: float(v[0])}
                coefs.update({1 << t: float(v[t + 1]) for t in range(self.m[j])})
                out.append(ItemParams("crum", coefs=coefs))
            else:
                v = state["items"][j]
                out.append(ItemParams("lcdm", coefs={m: float(c) for m, c in enumerate(v)}))
        return out

    def param_vector(self, state: dict) -> np.ndarray:
        if self.model in GATE_MODELS:
            parts = [state["s"], state["g"]]
        else:
            parts = list(state["items"])
        return np.concatenate(parts + [state["class_probs"]])

    # -- likelihood machinery -------------------------------------------

    def item_cells(self, state: dict, j: int) -> np.ndarray:
        """Correct-response probability per mastered-subset cell of item j."""
        if self.model in GATE_MODELS:
            n_cells = self.n_cells[j]
            if self.model == "dina":
                p = np.full(n_cells, state["g"][j])
                p[-1] = 1.0 - state["s"][j]
            else:
                p = np.full(n_cells, 1.0 - state["s"][j])
                p[0] = state["g"][j]
            return p
        v = state["items"][j]
        if self.model == "rrum":
            return np.exp(np.log(v[0]) + (1.0 - self.design[j]) @ np.log(v[1:]))
        if self.model == "crum":
            return expit(self.design[j] @ v)
        return expit(subset_zeta(v))

    def table(self, state: dict) -> np.ndarray:
        """Clamped L x J probability table implied by the state."""
        st = self.settings
        tab = np.empty((self.L, self.J))
        for j in range(self.J):
            tab[:, j] = self.item_cells(state, j)[self.structure.masks[:, j]]
        return np.clip(tab, st.floor, st.ceiling)

    def loglik_and_resp(self, state: dict) -> tuple[float, np.ndarray]:
        tab = self.table(state)
        with np.errstate(divide="ignore"):
            logw = (np.log(state["class_probs"])[None, :]
                    + self.X @ np.log(tab).T + self.Xc @ np.log1p(-tab).T)
        row_ll = logsumexp(logw, axis=1)
        if not np.isfinite(row_ll).all():
            raise NumericalError("non-finite row likelihood in the E-step")
        resp = np.exp(logw - row_ll[:, None])
        return float(row_ll.sum()), resp

    # -- M-step -----------------------------------------------------------

    def m_step(self, resp: np.ndarray, prev: dict) -> tuple[dict, list[int]]:
        """Maximize the expected complete-data log-likelihood.

        Returns the new state and the items where Newton hit its cap and the
        previous iterate was kept.
        """
        st = self.settings
        state = {"class_probs": resp.mean(axis=0)}
        n_l = resp.sum(axis=0)
        expected_correct = resp.T @ self.X  # L x J
        flagged: list[int] = []
        if self.model in GATE_MODELS:
            gate = self.gate.astype(float)
            n1 = n_l @ gate
            c1 = (expected_correct * gate).sum(axis=0)
            c0 = expected_correct.sum(axis=0) - c1
            n0 = n_l.sum() - n1
            with np.errstate(invalid="ignore", divide="ignore"):
                s_hat = np.where(n1 > 1e-12, (n1 - c1) / n1, prev["s"])
                g_hat = np.where(n0 > 1e-12, c0 / n0, prev["g"])
            state["s"] = np.clip(s_hat, st.floor, st.ceiling)
            state["g"] = np.clip(g_hat, st.floor, st.ceiling)
            return state, flagged

        w_all = np.bincount(self.flat_masks, weights=np.repeat(n_l, self.J),
                            minlength=self.J * self.cmax).reshape(self.J, self.cmax)
        y_all = np.bincount(self.flat_masks, weights=expected_correct.ravel(),
                            minlength=self.J * self.cmax).reshape(self.J, self.cmax)
        items: list = [None] * self.J
        if self.model == "lcdm":
            for j in range(self.J):
                c = self.n_cells[j]
                items[j] = self._saturated_update(w_all[j, :c], y_all[j, :c],
                                                  prev["items"][j])
        else:
            needs = self._warm_gradient_check(w_all, y_all, prev["items"])
            for j in range(self.J):
                if not needs[j]:
                    items[j] = prev["items"][j].copy()
                    continue
                c = self.n_cells[j]
                new_v, ok = self._newton_update(w_all[j, :c], y_all[j, :c],
                                                prev["items"][j], j)
                if not ok:
                    flagged.append(j)
                items[j] = new_v
        state["items"] = items
        return state, flagged

    def _warm_gradient_check(self, w_all, y_all, prev_items) -> np.ndarray:
        """Batched projected-gradient test at the warm start.

        Items already within the Newton entry tolerance keep their previous
        parameters; only the rest run the per-item Newton loop.
        """
        st = self.settings
        needs = np.zeros(self.J, dtype=bool)
        for m, js in self.m_groups.items():
            cells = 1 << m
            w = w_all[js][:, :cells]
            y = y_all[js][:, :cells]
            v = np.stack([prev_items[j] for j in js])
            bits = ((np.arange(cells)[:, None] >> np.arange(m)) & 1).astype(float)
            if self.model == "crum":
                z = np.hstack([np.ones((cells, 1)), bits])
                p = expit(np.clip(v @ z.T, -30.0, 30.0))
                grad = (y - w * p) @ z
            else:
                miss = np.hstack([np.ones((cells, 1)), 1.0 - bits])
                p = np.exp(np.log(v) @ miss.T)
                resid = (y - w * p) / np.maximum(1.0 - p, 1e-12)
                grad = (resid @ miss) * (1.0 - v)
                at_hi = (v >= st.ceiling - 1e-12) & (grad > 0)
                at_lo = (v <= st.floor + 1e-12) & (grad < 0)
                grad = np.where(at_hi | at_lo, 0.0, grad)
            tol = 1e-7 * np.maximum(1.0, w.sum(axis=1))
            needs[js] = np.abs(grad).max(axis=1) >= tol
        return needs

    def _saturated_update(self, w, y, prev_v) -> np.ndarray:
        """Exact cell-wise maximizer for items whose design is saturated."""
        st = self.settings
        prev_cells = np.clip(expit(subset_zeta(prev_v)), st.floor, st.ceiling)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(w > 1e-12, y / np.maximum(w, 1e-300), prev_cells)
        cells = np.clip(ratio, st.floor, st.ceiling)
        return subset_mobius(logit(cells))

    def _expected_loglik(self, cells, w, y) -> float:
        p = np.clip(cells, self.settings.floor, self.settings.ceiling)
        return float(y @ np.log(p) + (w - y) @ np.log1p(-p))

    def _newton_update(self, w, y, prev_v, j) -> tuple[np.ndarray, bool]:
        """Damped Newton ascent with ridge fallback, on the item's own scale.

        RRUM works on the logit of (pi, penalties); CRUM on its coefficients.
        Steps are accepted only when the clamped expected log-likelihood does
        not decrease, so EM ascent is preserved under the floor/ceiling.
        """
        st = self.settings
        rrum = self.model == "rrum"
        lo, hi = logit(st.floor), logit(st.ceiling)
        theta = np.clip(logit(prev_v), lo, hi) if rrum else prev_v.copy()

        def cells_of(th):
            if rrum:
                v = expit(th)
                return np.exp(np.log(v[0]) + (1.0 - self.design[j]) @ np.log(v[1:]))
            return expit(np.clip(self.design[j] @ th, -30.0, 30.0))

        def projected(th, grad):
            # gradient components pushing outside the box do not count
            # against convergence once the parameter sits on the box face
            if not rrum:
                return grad
            out = grad.copy()
            out[(th >= hi - 1e-12) & (out > 0)] = 0.0
            out[(th <= lo + 1e-12) & (out < 0)] = 0.0
            return out

        scale = max(1.0, w.sum())
        f_old = self._expected_loglik(cells_of(theta), w, y)
        converged = False
        for _ in range(_NEWTON_CAP):
            grad, hess_neg = self._grad_hess(theta, w, y, j)
            if np.max(np.abs(projected(theta, grad))) < 1e-7 * scale:
                converged = True
                break
            if rrum:
                # active-set reduction: coordinates pinned to a box face with
                # an outward gradient stay fixed this iteration
                free = ~(((theta >= hi - 1e-12) & (grad > 0))
                         | ((theta <= lo + 1e-12) & (grad < 0)))
            else:
                free = np.ones(len(theta), dtype=bool)
            g_f = grad[free]
            h_f = hess_neg[np.ix_(free, free)]
            ridge = 0.0
            step_f = None
            for _ in range(8):
                try:
                    step_f = np.linalg.solve(h_f + ridge * np.eye(len(g_f)), g_f)
                except np.linalg.LinAlgError:
                    step_f = None
                if step_f is not None and np.isfinite(step_f).all() and g_f @ step_f > 0:
                    break
                ridge = max(ridge * 10.0, 1e-6 * max(1.0, abs(np.trace(h_f))))
            else:
                break
            step = np.zeros_like(theta)
            step[free] = step_f
            moved = False
            for _ in range(_BACKTRACK_CAP):
                cand = theta + step if not rrum else np.clip(theta + step, lo, hi)
                f_new = self._expected_loglik(cells_of(cand), w, y)
                if f_new >= f_old and np.max(np.abs(cand - theta)) > 0:
                    theta, f_old = cand, f_new
                    moved = True
                    break
                step *= 0.5
            if not moved:
                break
        if not converged:
            grad, _ = self._grad_hess(theta, w, y, j)
            converged = np.max(np.abs(projected(theta, grad))) < 1e-5 * scale
        if not converged:
            return prev_v.copy(), False
        return (expit(theta) if rrum else theta), True

    def _grad_hess(self, theta, w, y, j):
        """Gradient and negated Hessian of the expected log-likelihood."""
        if self.model == "crum":
            z = self.design[j]
            p = expit(np.clip(z @ theta, -30.0, 30.0))
            grad = z.T @ (y - w * p)
            hess_neg = z.T @ (z * (w * p * (1.0 - p))[:, None])
            return grad, hess_neg
        # rrum: cells p_M = pi * prod_{t not in M} r_t with (pi, r) = expit(theta)
        v = expit(theta)
        miss = np.hstack([np.ones((len(w), 1)), 1.0 - self.design[j]])  # cell x (1+m)
        logp = miss @ np.log(v)
        p = np.exp(logp)
        one_m_p = np.maximum(1.0 - p, 1e-12)
        resid = (y - w * p) / one_m_p
        grad = miss.T @ resid * (1.0 - v)
        curv = p * (y - w) / one_m_p**2
        hess = (miss * curv[:, None]).T @ miss * np.outer(1.0 - v, 1.0 - v)
        diag_extra = miss.T @ resid * (-v * (1.0 - v))
        hess[np.diag_indices_from(hess)] += diag_extra
        return grad, -hess


def marginal_loglik(responses, q: QMatrix, item_params: list[ItemParams],
                    class_probs, floor: float = 1e-4) -> float:
    """Marginal log-likelihood of the responses under a latent class mixture."""
    responses = _as_responses(responses)
    tab = np.clip(prob_table(item_params, q), floor, 1.0 - floor)
    probs = np.asarray(class_probs, dtype=float)
    if probs.shape[0] != tab.shape[0]:
        raise DomainError("class probability vector length must be 2**K")
    x = responses.astype(float)
    with np.errstate(divide="ignore"):
        logw = np.log(probs)[None, :] + x @ np.log(tab).T + (1 - x) @ np.log1p(-tab).T
    row_ll = logsumexp(logw, axis=1)
    if not np.isfinite(row_ll).all():
        raise NumericalError("non-finite marginal likelihood")
    return float(row_ll.sum())


def e_step(responses, q: QMatrix, item_params: list[ItemParams], class_probs,
           floor: float = 1e-4) -> np.ndarray:
    """Responsibilities: posterior class membership per respondent."""
    responses = _as_responses(responses)
    tab = np.clip(prob_table(item_params, q), floor, 1.0 - floor)
    probs = np.asarray(class_probs, dtype=float)
    x = responses.astype(float)
    with np.errstate(divide="ignore"):
        logw = np.log(probs)[None, :] + x @ np.log(tab).T + (1 - x) @ np.log1p(-tab).T
    row_ll = logsumexp(logw, axis=1)
    if not np.isfinite(row_ll).all():
        raise NumericalError("a respondent has zero likelihood under every class")
    return np.exp(logw - row_ll[:, None])


def m_step(responses, q: QMatrix, responsibilities, model: str,
           prev: list[ItemParams] | None = None, prev_class_probs=None,
           settings: EmSettings | None = None) -> tuple[list[ItemParams], np.ndarray]:
    """One M-step: updated item parameters and class proportions."""
    settings = settings or EmSettings()
    responses = _as_responses(responses)
    resp = np.asarray(responsibilities, dtype=float)
    if not np.allclose(resp.sum(axis=1), 1.0, atol=1e-8):
        raise DomainError("responsibilities must be row-stochastic")
    problem = _EmProblem(responses, q, model, settings)
    if prev is None:
        prev_state = problem.initial_state(seed=0)
    else:
        probs = prev_class_probs if prev_class_probs is not None \
            else np.full(problem.L, 1.0 / problem.L)
        prev_state = problem.state_from_params(prev, probs)
    new_state, _ = problem.m_step(resp, prev_state)
    return problem.params_from_state(new_state), new_state["class_probs"]


def fit_em(data, q: QMatrix, model: str, settings: EmSettings | None = None,
           seed: int = 0) -> EmFit:
    """Fit one model by EM, stopping on the max-abs parameter change.

    Parameter change is measured on the probability scale for DINA, DINO,
    and RRUM and on the coefficient scale for CRUM and LCDM, with class
    proportions included.  Perfect-pattern items do not abort the fit; they
    are recorded and typically surface in ``boundary_items``.
    """
    settings = settings or EmSettings()
    responses = _as_responses(data)
    problem = _EmProblem(responses, q, model, settings)
    perfect = detect_perfect_patterns(responses)
    state = problem.initial_state(seed)
    prev_vec = problem.param_vector(state)
    trace: list[float] = []
    flagged: set[int] = set()
    converged = False
    n_iter = 0
    for n_iter in range(1, settings.max_iter + 1):
        ll, resp = problem.loglik_and_resp(state)
        trace.append(ll)
        state, newly_flagged = problem.m_step(resp, state)
        flagged.update(newly_flagged)
        vec = problem.param_vector(state)
        delta = float(np.max(np.abs(vec - prev_vec)))
        prev_vec = vec
        if delta < settings.tol:
            converged = True
            break
    final_ll, posterior = problem.loglik_and_resp(state)
    trace.append(final_ll)
    item_params = problem.params_from_state(state)
    boundary = _boundary_items(problem, state)
    return EmFit(
        model=model,
        item_params=item_params,
        class_probs=state["class_probs"],
        posterior=posterior,
        loglik_trace=np.array(trace),
        converged=converged,
        n_iter=n_iter,
        boundary_items=boundary,
        newton_flagged_items=tuple(sorted(flagged)),
        perfect_pattern_items=tuple(perfect.all_correct + perfect.all_incorrect),
        n_attributes=q.n_attributes,
    )


def _boundary_items(problem: _EmProblem, state: dict) -> tuple[int, ...]:
    st = problem.settings
    eps = 1e-12
    hits = []
    for j in range(problem.J):
        if problem.model in GATE_MODELS:
            values = np.array([state["s"][j], state["g"][j]])
        elif problem.model == "rrum":
            values = state["items"][j]
        else:
            cells = problem.item_cells(state, j)
            values = np.array([1.0 - cells[-1], cells[0]])
        if (values <= st.floor + eps).any() or (values >= st.ceiling - eps).any():
            hits.append(j)
    return tuple(hits)


def classify_map(fit: EmFit) -> np.ndarray:
    """MAP profile per respondent: argmax responsibility, lowest index on ties."""
    idx = np.argmax(fit.posterior, axis=1)
    return ((idx[:, None] >> np.arange(fit.n_attributes)) & 1).astype(np.int8)
