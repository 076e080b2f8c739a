"""Diagnostic classification modeling toolkit.

Five latent-class models (DINA, DINO, RRUM, CRUM, LCDM), three estimation
methods (EM marginal maximum likelihood, Metropolis-within-Gibbs MCMC,
minimum-Hamming nonparametric classification), synthetic data generation,
and a factorial Monte Carlo study harness.
"""
from ._version import __version__
from .core import (
    ConfigError,
    Dataset,
    DcmError,
    DomainError,
    EmptyCellError,
    GenerationError,
    LatentStructure,
    NumericalError,
    ProfileSpace,
    QMatrix,
    Truth,
    ValidityReport,
    enumerate_profiles,
    validate_q,
)
from .datagen import (
    GenConfig,
    MisspecPlan,
    PerfectPatternReport,
    build_q,
    detect_perfect_patterns,
    gen_attributes,
    gen_item_params,
    generate,
    misspecify_q,
    simulate_responses,
)
from .em import EmFit, EmSettings, classify_map, e_step, fit_em, m_step, marginal_loglik
from .harness import (
    Cell,
    CellResult,
    StudyDesign,
    expand_design,
    run_cell,
    run_study,
    study_q_matrix,
)
from .mcmc import (
    McmcSettings,
    PosteriorSummary,
    PriorSpec,
    fit_mcmc,
    sample_profile_conditional,
    update_conjugate,
    update_metropolis,
)
from .metrics import (
    ReplicationOutcome,
    bias_rmse,
    eacr,
    pacr,
    slip_guess_from_fit,
)
from .models import (
    ItemParams,
    StructuralParams,
    cell_probs,
    embed_as_lcdm,
    ideal_conjunctive,
    ideal_disjunctive,
    irf,
    prob_table,
    slip_guess_of,
)
from .nonparametric import NpResult, NpSettings, classify_np, ideal_matrix
from .rng import derive_seed, substream

__all__ = [
    "__version__",
    "Cell", "CellResult", "ConfigError", "Dataset", "DcmError", "DomainError",
    "EmFit", "EmSettings", "EmptyCellError", "GenConfig", "GenerationError",
    "ItemParams", "LatentStructure", "McmcSettings", "MisspecPlan", "NpResult",
    "NpSettings", "NumericalError", "PerfectPatternReport", "PosteriorSummary",
    "PriorSpec", "ProfileSpace", "QMatrix", "ReplicationOutcome", "StructuralParams",
    "StudyDesign", "Truth", "ValidityReport",
    "bias_rmse", "build_q", "cell_probs", "classify_map", "classify_np",
    "detect_perfect_patterns", "derive_seed", "e_step", "eacr", "embed_as_lcdm",
    "enumerate_profiles", "expand_design", "fit_em", "fit_mcmc", "gen_attributes",
    "gen_item_params", "generate", "ideal_conjunctive", "ideal_disjunctive",
    "ideal_matrix", "irf", "m_step", "marginal_loglik", "misspecify_q", "pacr",
    "prob_table", "run_cell", "run_study", "sample_profile_conditional",
    "simulate_responses", "slip_guess_from_fit", "slip_guess_of", "study_q_matrix",
    "substream", "update_conjugate", "update_metropolis", "validate_q",
]
