"""Discover the ordered steps of a task from narrations and localize them in videos."""

from .errors import (
    CapExceededError,
    ConsistencyError,
    EmptyInputError,
    InfeasibleError,
    JoinError,
    SchemaError,
    ScriptlocError,
)
from .evalkit import (
    CorpusAnnotation,
    CorpusStats,
    Event,
    ItemAnnotation,
    ScoreReport,
    corpus_stats,
    hungarian_match,
    localization_f1,
    script_precision_recall,
)
from .textalign import (
    GlobalAlignment,
    StepAssignment,
    Token,
    TokenCostMatrix,
    TokenSequence,
    build_token_cost,
    extract_main_steps,
    fw_msa,
    msa_linear_oracle,
    progressive_align,
    sum_of_pairs_cost,
    token_pair_cost_matrix,
)
from .vidcluster import (
    ConstraintWindows,
    FeatureStream,
    ResidualKernel,
    StepLocalization,
    build_constraint_windows,
    build_residual_kernel,
    clustering_cost,
    fw_localize,
    ordered_oracle,
    predict_ordered,
    round_solution,
    train_supervised,
    uniform_baseline,
)

__version__ = "0.1.0"
