"""Cost-optimal sequential diagnostic testing policies learned from
retrospective data with history-dependent missingness."""

__version__ = "0.1.0"

from .data import (
    AcquisitionPath,
    CostSchedule,
    Dataset,
    InformationState,
    Record,
    cost_augmented_loss,
    features_at_state,
    load_dataset_csv,
    prediction_loss,
    save_dataset_csv,
    state_of_path,
)
from .engine import CostqConfig, LearnResult, PolicyRule, learn_policy, load_policy
from .evaluate import EvaluationReport, budget_sweep, evaluate
from .learners import FittedModel, LearnerConfig, fit_classifier, fit_regressor
from .simulate import (
    BehaviorConfig,
    ContrastOracle,
    ScenarioConfig,
    apply_behavior_policy,
    generate_scenario1,
    generate_scenario2_like,
    nuisance_misspec,
    oracle_tables,
    simulate_observed,
)

__all__ = [
    "AcquisitionPath",
    "BehaviorConfig",
    "ContrastOracle",
    "CostSchedule",
    "CostqConfig",
    "Dataset",
    "EvaluationReport",
    "FittedModel",
    "InformationState",
    "LearnResult",
    "LearnerConfig",
    "PolicyRule",
    "Record",
    "ScenarioConfig",
    "apply_behavior_policy",
    "budget_sweep",
    "cost_augmented_loss",
    "evaluate",
    "features_at_state",
    "fit_classifier",
    "fit_regressor",
    "generate_scenario1",
    "generate_scenario2_like",
    "learn_policy",
    "load_dataset_csv",
    "load_policy",
    "nuisance_misspec",
    "oracle_tables",
    "prediction_loss",
    "save_dataset_csv",
    "simulate_observed",
    "state_of_path",
]
