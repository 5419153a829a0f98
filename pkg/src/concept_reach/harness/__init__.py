from .experiments import (
    FAMILIES,
    FAMILY_RUNNERS,
    PLANNERS,
    ExperimentPlan,
    chance_level,
    factor_breakdown,
    mean_by,
    norm_diag_summary,
    run_baseline,
    run_bias,
    run_norm_diag,
    run_plan,
    run_removal,
    run_scarcity,
    run_underspec,
    seed_means,
    specified_accuracy,
    trend_test,
)
from .plotting import plot
from .runner import METHODS, ReachabilityResult, Runner

__all__ = [
    "FAMILIES",
    "FAMILY_RUNNERS",
    "METHODS",
    "PLANNERS",
    "ExperimentPlan",
    "ReachabilityResult",
    "Runner",
    "chance_level",
    "factor_breakdown",
    "mean_by",
    "norm_diag_summary",
    "plot",
    "run_baseline",
    "run_bias",
    "run_norm_diag",
    "run_plan",
    "run_removal",
    "run_scarcity",
    "run_underspec",
    "seed_means",
    "specified_accuracy",
    "trend_test",
]
