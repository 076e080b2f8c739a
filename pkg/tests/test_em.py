import math

import numpy as np
import pytest
from scipy.special import expit, logit

from dcmkit import (
    DomainError,
    EmSettings,
    GenConfig,
    ItemParams,
    QMatrix,
    build_q,
    classify_map,
    e_step,
    enumerate_profiles,
    fit_em,
    generate,
    irf,
    m_step,
    marginal_loglik,
)
from dcmkit.em import EmFit, _EmProblem


def brute_force_loglik(responses, q, item_params, class_probs, floor=1e-4):
    """Independent oracle: direct enumeration over profiles, scalar loops."""
    space = enumerate_profiles(q.n_attributes)
    total = 0.0
    for row in np.asarray(responses):
        acc = 0.0
        for ell, alpha in enumerate(space.bits):
            like = float(class_probs[ell])
            for j in range(q.n_items):
                p = irf(item_params[j], alpha, q.entries[j])
                p = min(max(p, floor), 1.0 - floor)
                like *= p if row[j] == 1 else 1.0 - p
            acc += like
        total += math.log(acc)
    return total


class TestMarginalLoglik:
    def test_uniform_half_probabilities(self):
        # one respondent, four items at p=0.5: log(0.5**4)
        q = QMatrix([[1, 0], [0, 1], [1, 1], [1, 0]])
        params = [ItemParams("dina", slip=0.5, guess=0.5) for _ in range(4)]
        ll = marginal_loglik(np.array([[1, 0, 1, 1]]), q, params, np.full(4, 0.25))
        assert ll == pytest.approx(4 * math.log(0.5), abs=1e-12)

    def test_single_class_reduces_to_bernoulli(self):
        q = QMatrix([[1], [1], [1]])
        params = [ItemParams("dina", slip=0.2, guess=0.2) for _ in range(3)]
        x = np.array([[1, 0, 1]])
        # both classes give p=0.8/0.2 identically, so mixture = Bernoulli
        ll = marginal_loglik(x, q, params, np.array([1.0, 0.0]))
        assert ll == pytest.approx(math.log(0.2 * 0.8 * 0.2) + math.log(4), abs=1.0)
        # exact value: p(correct)=g=0.2 for class 0
        assert ll == pytest.approx(2 * math.log(0.2) + math.log(0.8), abs=1e-12)

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum", "lcdm"])
    def test_matches_brute_force_enumeration(self, model):
        rng = np.random.default_rng(23)
        q = QMatrix([[1, 0], [0, 1], [1, 1], [1, 0]])
        cfg = GenConfig(n_respondents=6, model=model, q=q, discrimination="low", seed=3)
        ds = generate(cfg)
        params = ds.truth.item_params
        probs = rng.dirichlet(np.ones(4))
        got = marginal_loglik(ds.responses, q, params, probs)
        want = brute_force_loglik(ds.responses, q, params, probs)
        assert got == pytest.approx(want, abs=1e-10)


class TestEStep:
    def test_single_effective_class(self):
        q = QMatrix([[1]])
        params = [ItemParams("dina", slip=0.2, guess=0.1)]
        r = e_step(np.array([[1], [0]]), q, params, np.array([1.0, 0.0]))
        assert np.allclose(r[:, 0], 1.0)

    def test_flat_likelihood_returns_class_probs(self):
        q = QMatrix([[1, 1]])
        params = [ItemParams("dina", slip=0.5, guess=0.5)]
        probs = np.array([0.4, 0.3, 0.2, 0.1])
        r = e_step(np.array([[1], [0]]), q, params, probs)
        assert np.allclose(r, probs[None, :], atol=1e-12)

    def test_hand_computed_posterior(self):
        # one item requiring one attribute; K=1 for a 2-class hand case
        q = QMatrix([[1]])
        params = [ItemParams("dina", slip=0.1, guess=0.3)]
        probs = np.array([0.5, 0.5])
        r = e_step(np.array([[1]]), q, params, probs)
        want = 0.5 * 0.9 / (0.5 * 0.9 + 0.5 * 0.3)
        assert r[0, 1] == pytest.approx(want, abs=1e-12)
        assert r[0].sum() == pytest.approx(1.0, abs=1e-12)

    def test_rows_normalize(self):
        q = build_q(4, 20, seed=3)
        ds = generate(GenConfig(n_respondents=30, model="crum", q=q,
                                discrimination="low", seed=5))
        r = e_step(ds.responses, q, ds.truth.item_params, np.full(16, 1 / 16))
        assert np.allclose(r.sum(axis=1), 1.0, atol=1e-10)


class TestMStep:
    def test_noiseless_concentrated_hits_floor(self):
        q = QMatrix([[1, 0], [0, 1], [1, 1]])
        space = enumerate_profiles(2)
        from dcmkit.core import LatentStructure
        eta = LatentStructure(q).eta
        profiles = np.array([0, 1, 2, 3, 3, 1])
        x = eta[profiles]
        resp = np.zeros((6, 4))
        resp[np.arange(6), profiles] = 1.0
        params, probs = m_step(x, q, resp, "dina")
        for p in params:
            assert p.slip == pytest.approx(1e-4, abs=1e-12)
            assert p.guess == pytest.approx(1e-4, abs=1e-12)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_class_probs_are_mean_responsibility(self):
        q = QMatrix([[1]])
        resp = np.array([[0.25, 0.75], [0.5, 0.5]])
        _, probs = m_step(np.array([[1], [0]]), q, resp, "dina")
        assert np.allclose(probs, [0.375, 0.625])

    def test_crum_matches_grid_search(self):
        # single item, one attribute: coarse-to-fine grid over (b0, b1)
        q = QMatrix([[1]])
        rng = np.random.default_rng(31)
        resp = rng.dirichlet(np.ones(2), size=12)
        x = rng.integers(0, 2, size=(12, 1))
        params, _ = m_step(x, q, resp, "crum")
        b = np.array([params[0].coefs[0], params[0].coefs[1]])

        w = resp.sum(axis=0)
        y = resp.T @ x[:, 0]

        def objective(b0, b1):
            p = expit(np.array([b0, b0 + b1]))
            p = np.clip(p, 1e-4, 1 - 1e-4)
            return float(y @ np.log(p) + (w - y) @ np.log1p(-p))

        center = np.zeros(2)
        width = 8.0
        best = -np.inf
        for _ in range(8):
            grid0 = center[0] + np.linspace(-width, width, 41)
            grid1 = center[1] + np.linspace(-width, width, 41)
            vals = np.array([[objective(a, c) for c in grid1] for a in grid0])
            i, k = np.unravel_index(np.argmax(vals), vals.shape)
            best = vals[i, k]
            center = np.array([grid0[i], grid1[k]])
            width /= 5.0
        assert objective(*b) >= best - 1e-3

    def test_rejects_non_stochastic_responsibilities(self):
        q = QMatrix([[1]])
        with pytest.raises(DomainError):
            m_step(np.array([[1]]), q, np.array([[0.5, 0.1]]), "dina")


class TestRrumDerivatives:
    def test_gradient_and_hessian_match_finite_differences(self):
        q = QMatrix([[1, 1, 0]])
        problem = _EmProblem(np.array([[1], [0]]), q, "rrum", EmSettings())
        rng = np.random.default_rng(37)
        w = rng.uniform(0.5, 4.0, size=4)
        y = w * rng.uniform(0.1, 0.9, size=4)
        theta = rng.normal(0.3, 0.8, size=3)

        def f(th):
            v = expit(th)
            cells = np.exp(np.log(v[0]) + (1 - problem.design[0]) @ np.log(v[1:]))
            p = np.clip(cells, 1e-12, 1 - 1e-12)
            return float(y @ np.log(p) + (w - y) @ np.log1p(-p))

        grad, hess_neg = problem._grad_hess(theta, w, y, 0)
        eps = 1e-6
        for a in range(3):
            delta = eps * np.eye(3)[a]
            num = (f(theta + delta) - f(theta - delta)) / (2 * eps)
            assert grad[a] == pytest.approx(num, rel=1e-5, abs=1e-7)
        for a in range(3):
            delta = eps * np.eye(3)[a]
            gp, _ = problem._grad_hess(theta + delta, w, y, 0)
            gm, _ = problem._grad_hess(theta - delta, w, y, 0)
            num_row = (gp - gm) / (2 * eps)
            assert np.allclose(-hess_neg[a], num_row, rtol=1e-4, atol=1e-6)


class TestFitEm:
    def test_noiseless_dina_recovery(self):
        q = QMatrix(np.vstack([np.eye(2, dtype=int), [[1, 1]], np.eye(2, dtype=int)]))
        from dcmkit.core import LatentStructure
        eta = LatentStructure(q).eta
        rng = np.random.default_rng(41)
        profiles_idx = rng.integers(0, 4, size=200)
        x = eta[profiles_idx]
        fit = fit_em(x, q, "dina", seed=0)
        for p in fit.item_params:
            assert p.slip == pytest.approx(1e-4, abs=1e-12)
            assert p.guess == pytest.approx(1e-4, abs=1e-12)
        est = classify_map(fit)
        space = enumerate_profiles(2)
        assert np.array_equal(est, space.bits[profiles_idx])
        assert set(fit.boundary_items) == set(range(5))

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum", "lcdm"])
    def test_ascent_random_instances(self, model):
        q = build_q(4, 20, seed=3)
        for seed in range(8):
            ds = generate(GenConfig(n_respondents=25, model=model, q=q,
                                    discrimination="low", seed=100 + seed))
            fit = fit_em(ds, q, model, EmSettings(max_iter=25), seed=seed)
            assert np.all(np.diff(fit.loglik_trace) >= -1e-10)

    def test_grid_search_certificate(self):
        # K=2, J=4, N=8 toy: a 0.005-spaced (slip, guess) lattice sweep per
        # item, holding everything else at the fitted values, cannot improve
        # the final log-likelihood by more than 1e-3
        q = QMatrix([[1, 0], [0, 1], [1, 1], [1, 0]])
        ds = generate(GenConfig(n_respondents=8, model="dina", q=q,
                                discrimination="low", seed=11))
        fit = fit_em(ds, q, "dina", EmSettings(tol=1e-9, max_iter=20000), seed=2)
        base = marginal_loglik(ds.responses, q, fit.item_params, fit.class_probs)
        assert base == pytest.approx(fit.loglik, abs=1e-9)
        lattice = np.arange(0.005, 1.0, 0.005)
        best = base
        for j in range(q.n_items):
            for s in lattice:
                for g in lattice:
                    trial = list(fit.item_params)
                    trial[j] = ItemParams("dina", slip=float(s), guess=float(g))
                    ll = marginal_loglik(ds.responses, q, trial, fit.class_probs)
                    if ll > best:
                        best = ll
        assert best - base <= 1e-3

    def test_iteration_cap_reported(self):
        q = build_q(4, 20, seed=3)
        ds = generate(GenConfig(n_respondents=30, model="dina", q=q,
                                discrimination="low", seed=70))
        fit = fit_em(ds, q, "dina", EmSettings(max_iter=3), seed=0)
        assert not fit.converged
        assert fit.n_iter == 3

    def test_lcdm_nests_dina_at_large_n(self):
        q = QMatrix([[1, 0], [0, 1], [1, 1], [1, 0], [0, 1], [1, 1]])
        ds = generate(GenConfig(n_respondents=2000, model="dina", q=q,
                                discrimination="high", seed=55))
        fit_d = fit_em(ds, q, "dina", seed=0)
        fit_l = fit_em(ds, q, "lcdm", seed=0)
        from dcmkit import slip_guess_from_fit
        s_d, g_d = slip_guess_from_fit(fit_d.item_params, "dina", q)
        s_l, g_l = slip_guess_from_fit(fit_l.item_params, "lcdm", q)
        assert np.abs(s_d - s_l).mean() < 0.02
        assert np.abs(g_d - g_l).mean() < 0.02

    def test_perfect_pattern_flagged_not_fatal(self):
        q = QMatrix([[1, 0], [0, 1], [1, 1]])
        x = np.array([[1, 0, 1], [1, 1, 0], [1, 0, 0], [1, 1, 1]])
        fit = fit_em(x, q, "dina", seed=0)
        assert 0 in fit.perfect_pattern_items
        assert 0 in fit.boundary_items

    def test_seed_determinism(self):
        q = build_q(4, 20, seed=3)
        ds = generate(GenConfig(n_respondents=40, model="crum", q=q,
                                discrimination="high", seed=88))
        a = fit_em(ds, q, "crum", seed=5)
        b = fit_em(ds, q, "crum", seed=5)
        assert a.loglik == b.loglik
        assert np.array_equal(a.posterior, b.posterior)

    def test_json_serialization(self, tmp_path):
        q = QMatrix([[1, 0], [0, 1], [1, 1]])
        ds = generate(GenConfig(n_respondents=20, model="dina", q=q,
                                discrimination="high", seed=6))
        fit = fit_em(ds, q, "dina", seed=0)
        path = tmp_path / "fit.json"
        fit.save(path)
        import json
        payload = json.loads(path.read_text())
        assert payload["model"] == "dina"
        assert len(payload["item_params"]) == 3
        assert payload["converged"] in (True, False)


class TestClassifyMap:
    def _fit_with_posterior(self, posterior, k):
        return EmFit(model="dina", item_params=[], class_probs=np.full(4, 0.25),
                     posterior=np.asarray(posterior), loglik_trace=np.array([0.0]),
                     converged=True, n_iter=1, boundary_items=(),
                     newton_flagged_items=(), perfect_pattern_items=(),
                     n_attributes=k)

    def test_argmax(self):
        fit = self._fit_with_posterior([[0.7, 0.1, 0.1, 0.1]], 2)
        assert classify_map(fit).tolist() == [[0, 0]]

    def test_tie_breaks_to_lowest_index(self):
        fit = self._fit_with_posterior([[0.5, 0.5, 0.0, 0.0]], 2)
        assert classify_map(fit).tolist() == [[0, 0]]
        fit = self._fit_with_posterior([[0.0, 0.5, 0.5, 0.0]], 2)
        assert classify_map(fit).tolist() == [[1, 0]]
