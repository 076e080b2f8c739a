"""Core data types shared across the toolkit.

Attribute mastery profiles are binary K-vectors; with K attributes there are
L = 2**K latent classes.  The canonical profile index is little-endian: bit k
of index ``l`` is the mastery state of attribute k, so index 0 is the
all-zero profile and index L-1 is full mastery.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


MAX_ATTRIBUTES = 16


class DcmError(Exception):
    """Base class for toolkit errors."""


class DomainError(DcmError):
    """Invalid argument values or inconsistent dimensions."""


class ConfigError(DcmError):
    """Malformed configuration (study designs, CLI configs, file schemas)."""


class GenerationError(DcmError):
    """A randomized constructor exhausted its retry budget."""


class NumericalError(DcmError):
    """A numerical routine left its valid domain (NaN likelihoods etc.)."""


class EmptyCellError(DcmError):
    """No usable replications remain when aggregating a design cell."""


def profile_index(bits) -> int:
    """Encode a binary attribute vector to its canonical profile index."""
    bits = np.asarray(bits)
    return int(bits @ (1 << np.arange(bits.shape[-1], dtype=np.int64)))


def profile_bits(index: int, n_attributes: int) -> np.ndarray:
    """Decode a canonical profile index to its binary attribute vector."""
    return (index >> np.arange(n_attributes)) & 1


@dataclass(frozen=True)
class ProfileSpace:
    """All 2**K attribute profiles in canonical index order.

    ``bits`` has shape (L, K); row ``l`` is the profile with index ``l``.
    """

    n_attributes: int
    bits: np.ndarray = field(repr=False)

    @property
    def n_profiles(self) -> int:
        return self.bits.shape[0]

    def encode(self, bits) -> int:
        return profile_index(bits)

    def decode(self, index: int) -> np.ndarray:
        return self.bits[index].copy()


def enumerate_profiles(n_attributes: int) -> ProfileSpace:
    """Enumerate all attribute mastery profiles for K attributes.

    Index ``l``'s bit ``k`` equals ``(l >> k) & 1``.
    """
    if not 1 <= n_attributes <= MAX_ATTRIBUTES:
        raise DomainError(
            f"attribute count must be in [1, {MAX_ATTRIBUTES}], got {n_attributes}"
        )
    ell = np.arange(1 << n_attributes, dtype=np.int64)
    bits = (ell[:, None] >> np.arange(n_attributes)) & 1
    bits = bits.astype(np.int8)
    bits.flags.writeable = False
    return ProfileSpace(n_attributes=n_attributes, bits=bits)


class QMatrix:
    """J x K binary item-by-attribute specification.

    Well-formedness: entries in {0, 1}, every item measures at least one
    attribute, and 1 <= K <= 16.
    """

    def __init__(self, entries):
        arr = np.asarray(entries)
        if arr.ndim != 2:
            raise DomainError("Q-matrix must be two-dimensional")
        if not np.isin(arr, (0, 1)).all():
            raise DomainError("Q-matrix entries must be 0 or 1")
        arr = arr.astype(np.int8)
        if not 1 <= arr.shape[1] <= MAX_ATTRIBUTES:
            raise DomainError(
                f"attribute count must be in [1, {MAX_ATTRIBUTES}], got {arr.shape[1]}"
            )
        if (arr.sum(axis=1) == 0).any():
            raise DomainError("every item must measure at least one attribute")
        arr.flags.writeable = False
        self.entries = arr

    @property
    def n_items(self) -> int:
        return self.entries.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.entries.shape[1]

    def row(self, j: int) -> np.ndarray:
        return self.entries[j]

    def __eq__(self, other) -> bool:
        return isinstance(other, QMatrix) and np.array_equal(self.entries, other.entries)

    def __repr__(self) -> str:
        return f"QMatrix(J={self.n_items}, K={self.n_attributes})"

    @classmethod
    def from_csv(cls, path) -> "QMatrix":
        """Load a Q-matrix from headerless CSV of 0/1 entries."""
        rows = []
        with open(path, newline="") as fh:
            for lineno, record in enumerate(csv.reader(fh), start=1):
                if not record:
                    continue
                try:
                    row = [int(cell) for cell in record]
                except ValueError as exc:
                    raise DomainError(f"non-integer Q-matrix cell on line {lineno}") from exc
                if any(v not in (0, 1) for v in row):
                    raise DomainError(f"non-binary Q-matrix cell on line {lineno}")
                rows.append(row)
        if not rows:
            raise DomainError(f"empty Q-matrix file: {path}")
        if len({len(r) for r in rows}) != 1:
            raise DomainError("ragged Q-matrix rows")
        return cls(rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.entries:
                writer.writerow([int(v) for v in row])


@dataclass(frozen=True)
class ValidityReport:
    """Report from :func:`validate_q`; informational, never raises."""

    complete: bool
    identifiable_proxy: bool
    notes: tuple[str, ...] = ()


def validate_q(q: QMatrix) -> ValidityReport:
    """Check completeness and a proxy for parameter identifiability.

    Complete means the rows contain a single-attribute item for every
    attribute (an identity submatrix up to row permutation).  The
    identifiability check is a proxy, not the full conditions from the
    identifiability literature: completeness, every attribute measured by
    at least three items, and no two identical Q-matrix columns.
    """
    entries = q.entries
    notes = ["identifiable_proxy = complete AND >=3 items per attribute AND distinct columns"]

    row_sums = entries.sum(axis=1)
    singles = entries[row_sums == 1]
    covered = np.zeros(q.n_attributes, dtype=bool)
    if singles.size:
        covered[np.nonzero(singles)[1]] = True
    complete = bool(covered.all())
    if not complete:
        missing = np.nonzero(~covered)[0]
        notes.append(f"no single-attribute item for attributes {missing.tolist()}")

    col_counts = entries.sum(axis=0)
    enough_items = bool((col_counts >= 3).all())
    if not enough_items:
        sparse = np.nonzero(col_counts < 3)[0]
        notes.append(f"attributes measured by fewer than 3 items: {sparse.tolist()}")

    distinct_cols = True
    for a in range(q.n_attributes):
        for b in range(a + 1, q.n_attributes):
            if np.array_equal(entries[:, a], entries[:, b]):
                distinct_cols = False
                notes.append(f"columns {a} and {b} are identical")
    proxy = complete and enough_items and distinct_cols
    return ValidityReport(complete=complete, identifiable_proxy=proxy, notes=tuple(notes))


@dataclass(frozen=True)
class Truth:
    """Generating truth attached to a synthetic dataset."""

    profiles: np.ndarray = field(repr=False)  # N x K binary
    item_params: list = field(repr=False)
    slip: np.ndarray = field(repr=False)  # target slip values per item
    guess: np.ndarray = field(repr=False)  # target guessing values per item
    model: str = ""
    seed: int = 0


@dataclass(frozen=True)
class Dataset:
    """N x J binary response matrix, optionally with its generating truth."""

    responses: np.ndarray = field(repr=False)
    q: QMatrix | None = None
    truth: Truth | None = None

    def __post_init__(self):
        arr = np.asarray(self.responses)
        if arr.ndim != 2:
            raise DomainError("responses must be an N x J matrix")
        if not np.isin(arr, (0, 1)).all():
            raise DomainError("responses must be 0 or 1")
        arr = arr.astype(np.int8)
        arr.flags.writeable = False
        object.__setattr__(self, "responses", arr)
        if self.q is not None and self.q.n_items != arr.shape[1]:
            raise DomainError(
                f"responses have {arr.shape[1]} items but Q-matrix has {self.q.n_items}"
            )
        if self.truth is not None and self.truth.profiles.shape[0] != arr.shape[0]:
            raise DomainError("truth profiles row count must match responses")

    @property
    def n_respondents(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]


class LatentStructure:
    """Precomputed latent-class tables for one Q-matrix.

    Holds, for each item, the conjunctive/disjunctive ideal responses of all
    L profiles and the per-profile bitmask of mastered required attributes
    (bit t set when the t-th required attribute, in ascending attribute
    order, is mastered).  Estimators index these tables instead of
    recomputing per-respondent quantities.
    """

    def __init__(self, q: QMatrix):
        self.q = q
        self.space = enumerate_profiles(q.n_attributes)
        bits = self.space.bits.astype(np.int64)  # L x K
        entries = q.entries.astype(np.int64)  # J x K
        # eta[l, j] = 1 iff profile l masters every attribute item j requires
        missing = (1 - bits) @ entries.T
        self.eta = (missing == 0).astype(np.int8)
        # omega[l, j] = 1 iff profile l masters at least one required attribute
        self.omega = ((bits @ entries.T) > 0).astype(np.int8)
        self.required = [np.nonzero(entries[j])[0] for j in range(q.n_items)]
        self.n_required = np.array([len(r) for r in self.required])
        masks = np.zeros((self.space.n_profiles, q.n_items), dtype=np.int64)
        for j, req in enumerate(self.required):
            masks[:, j] = bits[:, req] @ (1 << np.arange(len(req), dtype=np.int64))
        self.masks = masks

    @property
    def n_profiles(self) -> int:
        return self.space.n_profiles

    def profile_indices(self, profiles) -> np.ndarray:
        """Row-wise canonical indices of an N x K profile matrix."""
        arr = np.asarray(profiles, dtype=np.int64)
        return arr @ (1 << np.arange(arr.shape[1], dtype=np.int64))
