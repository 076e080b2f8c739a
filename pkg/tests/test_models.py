import numpy as np
import pytest
from scipy.special import expit, logit

from dcmkit import (
    DomainError,
    ItemParams,
    embed_as_lcdm,
    enumerate_profiles,
    ideal_conjunctive,
    ideal_disjunctive,
    irf,
    slip_guess_of,
)
from dcmkit.models import StructuralParams, cell_probs, subset_mobius, subset_zeta


def random_item(model, q_row, rng):
    """Valid random parameters for one item; mirrors the generator's logic."""
    req = np.nonzero(q_row)[0]
    m = len(req)
    s, g = rng.uniform(0.02, 0.4, size=2)
    if model in ("dina", "dino"):
        return ItemParams(model, slip=float(s), guess=float(g))
    if model == "rrum":
        w = rng.dirichlet(np.ones(m))
        total = np.log(g / (1 - s))
        return ItemParams("rrum", pi=float(1 - s),
                          penalties={int(k): float(np.exp(wk * total))
                                     for k, wk in zip(req, w)})
    gap = float(logit(1 - s) - logit(g))
    if model == "crum":
        w = rng.dirichlet(np.ones(m))
        coefs = {0: float(logit(g))}
        coefs.update({1 << t: float(wk * gap) for t, wk in enumerate(w)})
        return ItemParams("crum", coefs=coefs)
    w = rng.dirichlet(np.ones((1 << m) - 1))
    coefs = {0: float(logit(g))}
    coefs.update({mask: float(wk * gap) for mask, wk in zip(range(1, 1 << m), w)})
    return ItemParams("lcdm", coefs=coefs)


class TestIdealResponses:
    def test_conjunctive_examples(self):
        assert ideal_conjunctive([1, 0, 1], [1, 0, 0]) == 1
        assert ideal_conjunctive([1, 0, 1], [1, 1, 0]) == 0
        assert ideal_conjunctive([0, 0, 0], [0, 0, 0]) == 1  # empty product

    def test_disjunctive_examples(self):
        assert ideal_disjunctive([0, 1], [1, 1]) == 1
        assert ideal_disjunctive([0, 0], [1, 1]) == 0
        assert ideal_disjunctive([1, 1], [0, 0]) == 0

    def test_dimension_mismatch(self):
        with pytest.raises(DomainError):
            ideal_conjunctive([1, 0], [1, 0, 1])


class TestIrf:
    def test_dina(self):
        p = ItemParams("dina", slip=0.1, guess=0.2)
        assert irf(p, [1, 1], [1, 1]) == pytest.approx(0.9, abs=1e-15)
        assert irf(p, [1, 0], [1, 1]) == pytest.approx(0.2, abs=1e-15)

    def test_dino(self):
        p = ItemParams("dino", slip=0.1, guess=0.2)
        assert irf(p, [1, 0], [1, 1]) == pytest.approx(0.9, abs=1e-15)
        assert irf(p, [0, 0], [1, 1]) == pytest.approx(0.2, abs=1e-15)

    def test_rrum_penalty(self):
        p = ItemParams("rrum", pi=0.9, penalties={0: 0.5})
        assert irf(p, [0], [1]) == pytest.approx(0.45, abs=1e-12)
        assert irf(p, [1], [1]) == pytest.approx(0.9, abs=1e-12)

    def test_crum_logistic_zero(self):
        p = ItemParams("crum", coefs={0: 0.0, 1: 1.3})
        assert irf(p, [0], [1]) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum", "lcdm"])
    def test_probability_bounds(self, model):
        rng = np.random.default_rng(7)
        q_row = np.array([1, 1, 0, 1])
        space = enumerate_profiles(4)
        for _ in range(200):
            p = random_item(model, q_row, rng)
            for alpha in space.bits:
                assert 0.0 <= irf(p, alpha, q_row) <= 1.0

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum"])
    def test_monotone_in_mastery(self, model):
        rng = np.random.default_rng(11)
        q_row = np.array([1, 1, 1])
        space = enumerate_profiles(3)
        for _ in range(100):
            p = random_item(model, q_row, rng)
            for a in space.bits:
                for b in space.bits:
                    if (a >= b).all():
                        assert irf(p, a, q_row) >= irf(p, b, q_row) - 1e-12

    def test_generated_lcdm_monotone(self):
        rng = np.random.default_rng(13)
        q_row = np.array([1, 1, 1])
        space = enumerate_profiles(3)
        for _ in range(100):
            p = random_item("lcdm", q_row, rng)
            for a in space.bits:
                for b in space.bits:
                    if (a >= b).all():
                        assert irf(p, a, q_row) >= irf(p, b, q_row) - 1e-12


class TestSlipGuess:
    def test_rrum_example(self):
        p = ItemParams("rrum", pi=0.9, penalties={0: 0.5, 2: 0.8})
        slip, guess = slip_guess_of(p, [1, 0, 1])
        assert slip == pytest.approx(0.1, abs=1e-12)
        assert guess == pytest.approx(0.36, abs=1e-12)

    def test_dina_identity(self):
        p = ItemParams("dina", slip=0.07, guess=0.31)
        assert slip_guess_of(p, [1, 1, 0]) == (0.07, 0.31)

    def test_crum_inversion(self):
        p = ItemParams("crum", coefs={0: float(logit(0.2)),
                                      1: float(logit(0.85) - logit(0.2))})
        slip, guess = slip_guess_of(p, [1])
        assert slip == pytest.approx(0.15, abs=1e-10)
        assert guess == pytest.approx(0.2, abs=1e-10)

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum", "lcdm"])
    def test_matches_irf_at_extreme_profiles(self, model):
        rng = np.random.default_rng(5)
        q_row = np.array([1, 0, 1, 1])
        none = np.zeros(4, dtype=int)
        full = np.array([1, 0, 1, 1])
        for _ in range(300):
            p = random_item(model, q_row, rng)
            slip, guess = slip_guess_of(p, q_row)
            assert guess == pytest.approx(irf(p, none, q_row), abs=1e-12)
            assert slip == pytest.approx(1.0 - irf(p, full, q_row), abs=1e-12)


class TestSubsetTransforms:
    @pytest.mark.parametrize("m", [1, 2, 3, 5])
    def test_zeta_mobius_roundtrip(self, m):
        rng = np.random.default_rng(m)
        coefs = rng.normal(size=1 << m)
        assert np.allclose(subset_mobius(subset_zeta(coefs)), coefs, atol=1e-12)

    def test_zeta_is_subset_sum(self):
        coefs = np.array([1.0, 2.0, 4.0, 8.0])
        out = subset_zeta(coefs)
        assert out.tolist() == [1.0, 3.0, 5.0, 15.0]


class TestEmbedAsLcdm:
    def test_crum_embeds_with_zero_interactions(self):
        p = ItemParams("crum", coefs={0: -1.0, 1: 0.8, 2: 1.1})
        q_row = [1, 1]
        emb = embed_as_lcdm(p, q_row)
        assert emb.coefs[3] == pytest.approx(0.0, abs=1e-12)
        for alpha in enumerate_profiles(2).bits:
            assert irf(emb, alpha, q_row) == pytest.approx(irf(p, alpha, q_row), abs=1e-12)

    def test_dina_two_attribute_coefficients(self):
        p = ItemParams("dina", slip=0.1, guess=0.2)
        emb = embed_as_lcdm(p, [1, 1])
        assert emb.coefs[0] == pytest.approx(logit(0.2), abs=1e-12)
        assert emb.coefs[1] == pytest.approx(0.0, abs=1e-12)
        assert emb.coefs[2] == pytest.approx(0.0, abs=1e-12)
        assert emb.coefs[3] == pytest.approx(logit(0.9) - logit(0.2), abs=1e-12)

    def test_dino_exhaustive_agreement(self):
        p = ItemParams("dino", slip=0.1, guess=0.2)
        q_row = [1, 1]
        emb = embed_as_lcdm(p, q_row)
        for alpha in enumerate_profiles(2).bits:
            assert irf(emb, alpha, q_row) == pytest.approx(irf(p, alpha, q_row), abs=1e-12)

    @pytest.mark.parametrize("model", ["dina", "dino", "rrum", "crum"])
    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_agreement_over_all_profiles(self, model, k):
        rng = np.random.default_rng(17 + k)
        q_row = np.ones(k, dtype=int)
        space = enumerate_profiles(k)
        for _ in range(30):
            p = random_item(model, q_row, rng)
            emb = embed_as_lcdm(p, q_row)
            for alpha in space.bits:
                assert irf(emb, alpha, q_row) == pytest.approx(
                    irf(p, alpha, q_row), abs=1e-12)

    def test_degenerate_gate_rejected(self):
        with pytest.raises(DomainError):
            embed_as_lcdm(ItemParams("dina", slip=0.0, guess=0.2), [1, 1])

    def test_lcdm_input_rejected(self):
        p = ItemParams("lcdm", coefs={0: 0.0, 1: 1.0})
        with pytest.raises(DomainError):
            embed_as_lcdm(p, [1])


class TestContainers:
    def test_structural_params_simplex(self):
        StructuralParams(np.full(4, 0.25))
        with pytest.raises(DomainError):
            StructuralParams(np.array([0.5, 0.6]))
        with pytest.raises(DomainError):
            StructuralParams(np.array([-0.1, 1.1]))

    def test_item_params_validation(self):
        with pytest.raises(DomainError):
            ItemParams("dina", slip=1.2, guess=0.1)
        with pytest.raises(DomainError):
            ItemParams("rrum", pi=0.9, penalties={0: 1.5})
        with pytest.raises(DomainError):
            ItemParams("crum", coefs={1: 0.5})  # missing intercept
        with pytest.raises(DomainError):
            ItemParams("unknown", slip=0.1, guess=0.1)

    def test_validate_for_q_row(self):
        p = ItemParams("rrum", pi=0.9, penalties={0: 0.5})
        with pytest.raises(DomainError):
            p.validate_for([0, 1])  # penalty keyed on the wrong attribute

    def test_json_roundtrip(self):
        items = [
            ItemParams("dina", slip=0.1, guess=0.2),
            ItemParams("rrum", pi=0.8, penalties={1: 0.4, 3: 0.6}),
            ItemParams("lcdm", coefs={0: -1.0, 1: 0.5, 2: 0.25, 3: 0.75}),
        ]
        for p in items:
            q = ItemParams.from_json(p.to_json())
            assert q == p

    def test_cell_probs_rejects_oversized_mask(self):
        p = ItemParams("lcdm", coefs={0: 0.0, 1: 1.0, 2: 1.0, 3: 0.5})
        with pytest.raises(DomainError):
            cell_probs(p, [1])  # one required attribute but masks up to 3
