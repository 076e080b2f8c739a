"""Item response functions for the five diagnostic classification models.

Supported models: DINA, DINO (slip/guess gate models), RRUM (baseline times
multiplicative penalties), CRUM (logistic main effects), and LCDM (logistic
with all interaction orders).  CRUM/LCDM coefficients are keyed by subset
bitmask over the item's required attributes in ascending attribute order:
mask 0 is the intercept, single-bit masks are main effects, multi-bit masks
are interactions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .core import DomainError, LatentStructure, QMatrix

MODELS = ("dina", "dino", "rrum", "crum", "lcdm")
GATE_MODELS = ("dina", "dino")
LOGISTIC_MODELS = ("crum", "lcdm")


@dataclass(frozen=True)
class ItemParams:
    """Parameters for one item under one model.

    Payload by model:
      dina/dino: ``slip``, ``guess``
      rrum:      ``pi`` (baseline), ``penalties`` {attribute index: r}
      crum/lcdm: ``coefs`` {subset bitmask: coefficient}, mask 0 = intercept
    """

    model: str
    slip: float | None = None
    guess: float | None = None
    pi: float | None = None
    penalties: dict[int, float] | None = None
    coefs: dict[int, float] | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise DomainError(f"unknown model {self.model!r}")
        if self.model in GATE_MODELS:
            if self.slip is None or self.guess is None:
                raise DomainError(f"{self.model} requires slip and guess")
            if not (0.0 <= self.slip <= 1.0 and 0.0 <= self.guess <= 1.0):
                raise DomainError("slip and guess must lie in [0, 1]")
        elif self.model == "rrum":
            if self.pi is None or self.penalties is None:
                raise DomainError("rrum requires pi and penalties")
            if not 0.0 < self.pi <= 1.0:
                raise DomainError("rrum baseline pi must lie in (0, 1]")
            for k, r in self.penalties.items():
                if not 0.0 < r < 1.0:
                    raise DomainError(f"rrum penalty r[{k}] must lie in (0, 1)")
        else:
            if self.coefs is None:
                raise DomainError(f"{self.model} requires coefs")
            if 0 not in self.coefs:
                raise DomainError("coefs must include the intercept (mask 0)")

    def validate_for(self, q_row) -> None:
        """Check the payload is structurally consistent with a Q-matrix row."""
        req = required_attributes(q_row)
        m = len(req)
        if self.model == "rrum":
            if set(self.penalties) != set(req.tolist()):
                raise DomainError(
                    f"rrum penalties keyed by {sorted(self.penalties)}, "
                    f"required attributes are {req.tolist()}"
                )
        elif self.model == "crum":
            expected = {0} | {1 << t for t in range(m)}
            if set(self.coefs) != expected:
                raise DomainError("crum coefs must be intercept plus one main per required attribute")
        elif self.model == "lcdm":
            if set(self.coefs) != set(range(1 << m)):
                raise DomainError("lcdm coefs must cover every subset of the required attributes")

    def to_json(self) -> dict:
        if self.model in GATE_MODELS:
            payload = {"slip": self.slip, "guess": self.guess}
        elif self.model == "rrum":
            payload = {"pi": self.pi, "r": {str(k): v for k, v in sorted(self.penalties.items())}}
        else:
            payload = {"coefs": {str(m): v for m, v in sorted(self.coefs.items())}}
        return {"model": self.model, "payload": payload}

    @classmethod
    def from_json(cls, obj: dict) -> "ItemParams":
        model = obj["model"]
        payload = obj["payload"]
        if model in GATE_MODELS:
            return cls(model, slip=payload["slip"], guess=payload["guess"])
        if model == "rrum":
            return cls(model, pi=payload["pi"],
                       penalties={int(k): v for k, v in payload["r"].items()})
        return cls(model, coefs={int(m): v for m, v in payload["coefs"].items()})


@dataclass(frozen=True)
class StructuralParams:
    """Mixing proportions over the L latent classes."""

    class_probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=float)
        if (probs < 0).any():
            raise DomainError("class probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise DomainError("class probabilities must sum to 1")
        probs.flags.writeable = False
        object.__setattr__(self, "class_probs", probs)

    @property
    def n_classes(self) -> int:
        return self.class_probs.shape[0]


def required_attributes(q_row) -> np.ndarray:
    q_row = np.asarray(q_row)
    req = np.nonzero(q_row)[0]
    if req.size == 0:
        raise DomainError("item must require at least one attribute")
    return req


def _check_dims(alpha, q_row) -> tuple[np.ndarray, np.ndarray]:
    alpha = np.asarray(alpha)
    q_row = np.asarray(q_row)
    if alpha.shape != q_row.shape:
        raise DomainError(f"profile has shape {alpha.shape}, Q-row has {q_row.shape}")
    return alpha, q_row


def ideal_conjunctive(alpha, q_row) -> int:
    """1 iff the profile masters every attribute the item requires."""
    alpha, q_row = _check_dims(alpha, q_row)
    return int(((1 - alpha) * q_row).sum() == 0)


def ideal_disjunctive(alpha, q_row) -> int:
    """1 iff the profile masters at least one required attribute."""
    alpha, q_row = _check_dims(alpha, q_row)
    return int((alpha * q_row).sum() > 0)


def mastered_mask(alpha, q_row) -> int:
    """Bitmask of mastered required attributes, ascending attribute order."""
    alpha, q_row = _check_dims(alpha, q_row)
    req = required_attributes(q_row)
    return int(np.asarray(alpha)[req] @ (1 << np.arange(len(req), dtype=np.int64)))


def subset_zeta(coefs: np.ndarray) -> np.ndarray:
    """Sum coefficients over subsets: out[M] = sum of coefs[b] for b subset of M."""
    out = np.array(coefs, dtype=float)
    n = out.shape[-1]
    bit = 1
    while bit < n:
        masks = np.arange(n)
        hi = (masks & bit) != 0
        out[..., hi] += out[..., masks[hi] ^ bit]
        bit <<= 1
    return out


def subset_mobius(values: np.ndarray) -> np.ndarray:
    """Invert :func:`subset_zeta`: recover coefficients from subset sums."""
    out = np.array(values, dtype=float)
    n = out.shape[-1]
    bit = 1
    while bit < n:
        masks = np.arange(n)
        hi = (masks & bit) != 0
        out[..., hi] -= out[..., masks[hi] ^ bit]
        bit <<= 1
    return out


def cell_probs(params: ItemParams, q_row) -> np.ndarray:
    """Correct-response probability for each of the 2**m mastered-subset cells.

    Cell M is the probability for any profile whose mastered required
    attributes form the bitmask M.  Log-scale accumulation keeps RRUM
    penalty products stable for many required attributes.
    """
    req = required_attributes(q_row)
    m = len(req)
    n_cells = 1 << m
    if params.model == "dina":
        p = np.full(n_cells, params.guess)
        p[n_cells - 1] = 1.0 - params.slip
        return p
    if params.model == "dino":
        p = np.full(n_cells, 1.0 - params.slip)
        p[0] = params.guess
        return p
    masks = np.arange(n_cells)
    bits = ((masks[:, None] >> np.arange(m)) & 1).astype(float)
    if params.model == "rrum":
        log_r = np.log([params.penalties[int(k)] for k in req])
        return np.exp(np.log(params.pi) + (1.0 - bits) @ log_r)
    coef_vec = np.zeros(n_cells)
    for mask, value in params.coefs.items():
        if mask >= n_cells:
            raise DomainError(f"coefficient mask {mask} exceeds the item's subsets")
        coef_vec[mask] = value
    return expit(subset_zeta(coef_vec))


def irf(params: ItemParams, alpha, q_row) -> float:
    """P(correct response | attribute profile) for one item."""
    params.validate_for(q_row)
    return float(cell_probs(params, q_row)[mastered_mask(alpha, q_row)])


def slip_guess_of(params: ItemParams, q_row) -> tuple[float, float]:
    """Slip and guessing values implied by the item parameters.

    Guess is the correct-response probability with no required attribute
    mastered; slip is one minus the probability with all of them mastered.
    """
    req = required_attributes(q_row)
    if params.model in GATE_MODELS:
        slip, guess = params.slip, params.guess
    elif params.model == "rrum":
        slip = 1.0 - params.pi
        guess = float(np.exp(np.log(params.pi)
                             + sum(np.log(params.penalties[int(k)]) for k in req)))
    else:
        guess = float(expit(params.coefs[0]))
        slip = 1.0 - float(expit(sum(params.coefs.values())))
    if __debug__:
        cells = cell_probs(params, q_row)
        assert abs(guess - cells[0]) < 1e-12 and abs(slip - (1.0 - cells[-1])) < 1e-12
    return slip, guess


def embed_as_lcdm(params: ItemParams, q_row) -> ItemParams:
    """Exact LCDM reparameterization of a DINA/DINO/RRUM/CRUM item.

    Solves the full 2**m system on the logit scale (subset Mobius inversion
    of the cell logits), so the returned LCDM agrees with the source model
    at every profile.  Requires all cell probabilities strictly inside
    (0, 1); gate models with slip or guess at 0 or 1 have no finite-logit
    representation.
    """
    if params.model == "lcdm":
        raise DomainError("item is already parameterized as lcdm")
    params.validate_for(q_row)
    cells = cell_probs(params, q_row)
    if (cells <= 0.0).any() or (cells >= 1.0).any():
        raise DomainError("cell probabilities at 0 or 1 have infinite logits")
    coef_vec = subset_mobius(logit(cells))
    return ItemParams("lcdm", coefs={int(m): float(v) for m, v in enumerate(coef_vec)})


def prob_table(item_params: list[ItemParams], q: QMatrix,
               structure: LatentStructure | None = None) -> np.ndarray:
    """L x J table of correct-response probabilities over all profiles."""
    if len(item_params) != q.n_items:
        raise DomainError(f"{len(item_params)} item parameter sets for {q.n_items} items")
    structure = structure or LatentStructure(q)
    table = np.empty((structure.n_profiles, q.n_items))
    for j, params in enumerate(item_params):
        params.validate_for(q.entries[j])
        table[:, j] = cell_probs(params, q.entries[j])[structure.masks[:, j]]
    return table
