import numpy as np
import pytest

from dcmkit import DomainError, QMatrix, enumerate_profiles, validate_q
from dcmkit.core import LatentStructure, profile_bits, profile_index


class TestEnumerateProfiles:
    def test_single_attribute(self):
        space = enumerate_profiles(1)
        assert space.bits.tolist() == [[0], [1]]

    def test_two_attributes_canonical_order(self):
        space = enumerate_profiles(2)
        assert space.bits.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]

    def test_four_attributes(self):
        space = enumerate_profiles(4)
        assert space.n_profiles == 16
        assert space.bits[15].tolist() == [1, 1, 1, 1]

    @pytest.mark.parametrize("k", [0, 17, -3])
    def test_out_of_range(self, k):
        with pytest.raises(DomainError):
            enumerate_profiles(k)

    @pytest.mark.parametrize("k", range(1, 9))
    def test_encode_decode_roundtrip_exhaustive(self, k):
        space = enumerate_profiles(k)
        for ell in range(space.n_profiles):
            bits = space.decode(ell)
            assert space.encode(bits) == ell
            assert profile_index(profile_bits(ell, k)) == ell

    def test_bit_convention(self):
        # bit k of index ell is attribute k's mastery
        space = enumerate_profiles(3)
        assert space.bits[5].tolist() == [1, 0, 1]  # 5 = 0b101


class TestQMatrix:
    def test_rejects_non_binary(self):
        with pytest.raises(DomainError):
            QMatrix([[1, 2], [0, 1]])

    def test_rejects_zero_row(self):
        with pytest.raises(DomainError):
            QMatrix([[1, 0], [0, 0]])

    def test_rejects_too_many_attributes(self):
        with pytest.raises(DomainError):
            QMatrix(np.ones((2, 17), dtype=int))

    def test_entries_immutable(self):
        q = QMatrix([[1, 0], [0, 1]])
        with pytest.raises(ValueError):
            q.entries[0, 0] = 0

    def test_csv_roundtrip(self, tmp_path):
        q = QMatrix([[1, 0, 1], [0, 1, 0], [1, 1, 1]])
        path = tmp_path / "q.csv"
        q.to_csv(path)
        assert QMatrix.from_csv(path) == q

    def test_csv_rejects_non_binary_cells(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,0\n0,2\n")
        with pytest.raises(DomainError):
            QMatrix.from_csv(path)


class TestValidateQ:
    def test_identity_stack_is_complete(self):
        rows = np.vstack([np.eye(3, dtype=int), [[1, 1, 0], [0, 1, 1], [1, 0, 1]]])
        report = validate_q(QMatrix(rows))
        assert report.complete
        assert report.identifiable_proxy

    def test_all_combos_design_is_complete(self):
        # every nonzero 4-attribute combination, as in the 20-item design core
        rows = [[(m >> k) & 1 for k in range(4)] for m in range(1, 16)]
        report = validate_q(QMatrix(rows))
        assert report.complete
        assert report.identifiable_proxy

    def test_attribute_without_single_item_incomplete(self):
        rows = [[1, 0], [1, 1], [1, 1]]  # attribute 1 only in two-attribute items
        report = validate_q(QMatrix(rows))
        assert not report.complete
        assert not report.identifiable_proxy

    def test_sparse_attribute_fails_proxy(self):
        rows = [[1, 0], [0, 1], [1, 0], [1, 0]]  # attribute 1 in fewer than 3 items
        report = validate_q(QMatrix(rows))
        assert report.complete
        assert not report.identifiable_proxy

    def test_duplicate_columns_fail_proxy(self):
        rows = [[1, 1], [1, 1], [1, 1], [1, 1]]
        report = validate_q(QMatrix(rows))
        assert not report.identifiable_proxy

    @pytest.mark.parametrize("seed", range(5))
    def test_row_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        rows = np.vstack([np.eye(4, dtype=int),
                          (rng.random((8, 4)) < 0.5).astype(int)])
        rows = rows[rows.sum(axis=1) > 0]
        q = QMatrix(rows)
        shuffled = QMatrix(rows[rng.permutation(len(rows))])
        a, b = validate_q(q), validate_q(shuffled)
        assert (a.complete, a.identifiable_proxy) == (b.complete, b.identifiable_proxy)


class TestLatentStructure:
    def test_gate_tables(self):
        q = QMatrix([[1, 0], [1, 1]])
        ls = LatentStructure(q)
        # profiles: 00, 10, 01, 11
        assert ls.eta[:, 0].tolist() == [0, 1, 0, 1]
        assert ls.eta[:, 1].tolist() == [0, 0, 0, 1]
        assert ls.omega[:, 0].tolist() == [0, 1, 0, 1]
        assert ls.omega[:, 1].tolist() == [0, 1, 1, 1]

    def test_masks_ascending_attribute_order(self):
        q = QMatrix([[0, 1, 1]])
        ls = LatentStructure(q)
        # required attrs = (1, 2); profile 0b110 masters both -> local mask 3
        assert ls.masks[6, 0] == 3
        assert ls.masks[2, 0] == 1  # only attribute 1
        assert ls.masks[4, 0] == 2  # only attribute 2

    def test_profile_indices(self):
        q = QMatrix([[1, 1]])
        ls = LatentStructure(q)
        profiles = np.array([[0, 0], [1, 0], [1, 1]])
        assert ls.profile_indices(profiles).tolist() == [0, 1, 3]
