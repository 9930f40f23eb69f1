"""Valid-instrument selection by agglomerative clustering of just-identified
2SLS estimates, with Sargan downward testing and a Monte Carlo harness."""

__version__ = "0.1.0"

from .clustering import (
    Dendrogram,
    MetricSpec,
    generic_merge_path,
    pairwise_distances,
    partition_at,
    ward_merge_path,
)
from .data import (
    Dataset,
    IVCombination,
    ModelFit,
    RankDeficientError,
    SelectionConfig,
    all_combinations,
    partial_out_controls,
    validate,
)
from .estimation import (
    CombinationCapError,
    JustIdentifiedEstimate,
    SarganOutcome,
    SingularDesignError,
    SingularSystemError,
    first_stage,
    first_stage_strength,
    just_identified_all,
    post_selection_tsls,
    sargan,
)
from .selection import (
    FamilySelection,
    InvalidDatasetError,
    LATEGroup,
    LATEResult,
    SelectionResult,
    downward_test,
    largest_family,
    late_groups,
    plausibly_exogenous_union_ci,
    select_valid,
)
from .simulation import (
    DESIGN_NAMES,
    SimulationDesign,
    SimulationReport,
    design_by_name,
    generate,
    metric_suite,
    run_monte_carlo,
)

__all__ = [
    "__version__",
    "Dataset",
    "IVCombination",
    "ModelFit",
    "SelectionConfig",
    "RankDeficientError",
    "all_combinations",
    "partial_out_controls",
    "validate",
    "JustIdentifiedEstimate",
    "SarganOutcome",
    "SingularDesignError",
    "SingularSystemError",
    "CombinationCapError",
    "first_stage",
    "first_stage_strength",
    "just_identified_all",
    "post_selection_tsls",
    "sargan",
    "Dendrogram",
    "MetricSpec",
    "generic_merge_path",
    "pairwise_distances",
    "partition_at",
    "ward_merge_path",
    "FamilySelection",
    "InvalidDatasetError",
    "LATEGroup",
    "LATEResult",
    "SelectionResult",
    "downward_test",
    "largest_family",
    "late_groups",
    "plausibly_exogenous_union_ci",
    "select_valid",
    "DESIGN_NAMES",
    "SimulationDesign",
    "SimulationReport",
    "design_by_name",
    "generate",
    "metric_suite",
    "run_monte_carlo",
]
