"""Apply policies to fully observed evaluation data and score them: loss
decomposition, terminal-path distribution, discrimination and operating-point
metrics, and the matched-budget cost-multiplier sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .data import (
    AcquisitionPath,
    CostSchedule,
    Dataset,
    InformationState,
    Record,
    features_at_state,
    prediction_loss,
)
from .errors import MissingBlock, NoPositives


@runtime_checkable
class Policy(Protocol):
    """Decision interface every policy object satisfies. Only admissible
    actions may be returned: {0, 1, 2} at baseline, {0, jc} from state j."""

    def decide0(self, x0: np.ndarray) -> int: ...

    def decide_next(self, j: int, xj: np.ndarray) -> int: ...

    def predict(self, state: InformationState, features: np.ndarray) -> float: ...


_PATH_CATEGORY = {
    InformationState.S0: "stop",
    InformationState.S1only: "test1_only",
    InformationState.S2only: "test2_only",
    InformationState.S12: "both",
}
_TESTS_PER_STATE = {"stop": 0, "test1_only": 1, "test2_only": 1, "both": 2}


@dataclass
class EvaluationReport:
    """Scores of one policy on one evaluation set."""

    n: int
    total_loss: float
    prediction_loss: float
    avg_cost: float
    path_props: dict[str, float]
    avg_tests: float
    auc: Optional[float] = None
    spec_at_recall90: Optional[float] = None
    gmean_at_recall90: Optional[float] = None
    spec_at_recall95: Optional[float] = None
    gmean_at_recall95: Optional[float] = None
    value_estimate: Optional[float] = None
    method: str = ""

    CSV_COLUMNS = (
        "method", "n", "total_loss", "prediction_loss", "avg_cost",
        "prop_stop", "prop_test1_only", "prop_test2_only", "prop_both",
        "avg_tests", "auc", "spec_at_recall90", "gmean_at_recall90",
        "spec_at_recall95", "gmean_at_recall95", "value_estimate",
    )

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "n": self.n,
            "total_loss": self.total_loss,
            "prediction_loss": self.prediction_loss,
            "avg_cost": self.avg_cost,
            "path_props": self.path_props,
            "avg_tests": self.avg_tests,
            "auc": self.auc,
            "spec_at_recall90": self.spec_at_recall90,
            "gmean_at_recall90": self.gmean_at_recall90,
            "spec_at_recall95": self.spec_at_recall95,
            "gmean_at_recall95": self.gmean_at_recall95,
            "value_estimate": self.value_estimate,
        }

    def csv_row(self) -> list:
        props = self.path_props
        fmt = lambda v: "" if v is None else repr(v)
        return [
            self.method, self.n, repr(self.total_loss), repr(self.prediction_loss),
            repr(self.avg_cost), repr(props["stop"]), repr(props["test1_only"]),
            repr(props["test2_only"]), repr(props["both"]), repr(self.avg_tests),
            fmt(self.auc), fmt(self.spec_at_recall90), fmt(self.gmean_at_recall90),
            fmt(self.spec_at_recall95), fmt(self.gmean_at_recall95), fmt(self.value_estimate),
        ]


@dataclass(frozen=True)
class AppliedPolicy:
    """Result of running one record through a policy."""

    path: AcquisitionPath
    state: InformationState
    prediction: float
    e_terminal: float


def apply_policy(policy: Policy, record: Record, costs: CostSchedule,
                 outcome_kind: str = "binary") -> AppliedPolicy:
    """Step one fully observed record through the policy's decisions,
    revealing blocks in order and predicting at the terminal state."""
    if record.x1 is None or record.x2 is None:
        raise MissingBlock("policy application requires a fully observed record")
    a0 = policy.decide0(record.x0)
    if a0 == 0:
        path = AcquisitionPath(0, 0)
    else:
        state_j = InformationState.S1only if a0 == 1 else InformationState.S2only
        xj = features_at_state(record, state_j)
        a1 = policy.decide_next(a0, xj)
        path = AcquisitionPath(a0, a1)
    state = path.state
    pred = float(policy.predict(state, features_at_state(record, state)))
    e_term = prediction_loss(record.y, pred, outcome_kind) + state.cost(costs)
    return AppliedPolicy(path, state, pred, e_term)


def _run_policy_batch(policy: Policy, data: Dataset):
    """Vectorized policy rollout; falls back to per-record calls for policies
    without batch methods. Returns (terminal state names, predictions)."""
    n = len(data)
    if hasattr(policy, "decide0_batch"):
        a0 = np.asarray(policy.decide0_batch(data.x0), dtype=int)
        s2 = np.zeros(n, dtype=int)
        for j in (1, 2):
            mask = a0 == j
            if np.any(mask):
                Xj = np.hstack([data.x0[mask], data.test_block(j)[mask]])
                s2[mask] = np.asarray(policy.decide_next_batch(j, Xj), dtype=int)
        states = np.array([AcquisitionPath(int(a), int(b)).state.value for a, b in zip(a0, s2)])
        preds = np.empty(n)
        for state in InformationState:
            mask = states == state.value
            if not np.any(mask):
                continue
            cols = [data.x0[mask]]
            if 1 in state.blocks:
                cols.append(data.x1[mask])
            if 2 in state.blocks:
                cols.append(data.x2[mask])
            preds[mask] = np.asarray(policy.predict_batch(state, np.hstack(cols)), dtype=float)
        return states, preds
    states = np.empty(n, dtype=object)
    preds = np.empty(n)
    dummy_costs = CostSchedule(0.0, 0.0)
    for i, record in enumerate(data.records):
        applied = apply_policy(policy, record, dummy_costs, data.outcome_kind)
        states[i] = applied.state.value
        preds[i] = applied.prediction
    return states.astype(str), preds


def evaluate(
    policy: Policy,
    data: Dataset,
    costs: CostSchedule,
    threshold_scores: Optional[np.ndarray] = None,
    threshold_labels: Optional[np.ndarray] = None,
    value_estimate: Optional[float] = None,
    method: str = "",
) -> EvaluationReport:
    """Score a policy on fully observed data.

    Each record is predicted with the model of its realized terminal state.
    Recall thresholds are chosen on ``threshold_scores``/``threshold_labels``
    (typically training-set scores) and applied unchanged; when omitted they
    are chosen on the evaluation scores themselves.
    """
    if not data.fully_observed:
        raise MissingBlock("evaluation data must be fully observed")
    states, preds = _run_policy_batch(policy, data)

    pred_loss = float(np.mean(prediction_loss(data.y, preds, data.outcome_kind)))
    state_costs = {
        "stop": 0.0, "test1_only": costs.c1, "test2_only": costs.c2,
        "both": costs.c1 + costs.c2,
    }
    cats = np.array([_PATH_CATEGORY[InformationState(s)] for s in states])
    props = {c: float(np.mean(cats == c)) for c in ("stop", "test1_only", "test2_only", "both")}
    avg_cost = float(sum(props[c] * state_costs[c] for c in props))
    avg_tests = float(sum(props[c] * _TESTS_PER_STATE[c] for c in props))

    report = EvaluationReport(
        n=len(data),
        total_loss=pred_loss + avg_cost,
        prediction_loss=pred_loss,
        avg_cost=avg_cost,
        path_props=props,
        avg_tests=avg_tests,
        value_estimate=value_estimate,
        method=method,
    )
    if data.outcome_kind == "binary" and len(np.unique(data.y)) == 2:
        report.auc = mann_whitney_auc(preds, data.y)
        t_scores = preds if threshold_scores is None else np.asarray(threshold_scores)
        t_labels = data.y if threshold_labels is None else np.asarray(threshold_labels)
        for target, s_name, g_name in (
            (0.90, "spec_at_recall90", "gmean_at_recall90"),
            (0.95, "spec_at_recall95", "gmean_at_recall95"),
        ):
            try:
                thr = threshold_at_recall(t_scores, t_labels, target)
            except NoPositives:
                continue
            sens, spec = sensitivity_specificity(preds, data.y, thr)
            setattr(report, s_name, spec)
            setattr(report, g_name, math.sqrt(sens * spec))
    return report


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC; ties contribute one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NoPositives("AUC needs both classes present")
    ranks = _average_ranks(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def threshold_at_recall(scores: np.ndarray, labels: np.ndarray, target: float) -> float:
    """Largest threshold t with recall(score >= t) >= target on these scores."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = np.sort(scores[labels == 1])[::-1]
    if pos.size == 0:
        raise NoPositives("threshold selection needs at least one positive")
    k = max(1, math.ceil(target * pos.size))
    return float(pos[k - 1])


def sensitivity_specificity(scores: np.ndarray, labels: np.ndarray, threshold: float):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    sens = float(np.mean(pos >= threshold)) if pos.size else float("nan")
    spec = float(np.mean(neg < threshold)) if neg.size else float("nan")
    return sens, spec


# ---------------------------------------------------------------------------
# Matched-budget sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    lambda_star: float
    report: EvaluationReport
    realized: list[tuple[float, float]]  # (lambda, realized average cost)


def budget_sweep(
    fit_fn: Callable[[Dataset, CostSchedule], Policy],
    train_data: Dataset,
    eval_data: Dataset,
    costs: CostSchedule,
    lambdas: Sequence[float],
    target_budget: float,
) -> SweepResult:
    """Refit with the cost term scaled by each multiplier and keep the fit
    whose realized average cost (at the ORIGINAL costs) lands closest to the
    target budget; ties go to the smaller multiplier."""
    if not lambdas:
        raise ValueError("lambda grid must be nonempty")
    if target_budget < 0:
        raise ValueError("target budget must be nonnegative")
    best = None
    realized = []
    for lam in sorted(lambdas):
        policy = fit_fn(train_data, costs.scaled(lam))
        report = evaluate(policy, eval_data, costs)
        realized.append((lam, report.avg_cost))
        gap = abs(report.avg_cost - target_budget)
        if best is None or gap < best[0]:
            best = (gap, lam, report)
    return SweepResult(best[1], best[2], realized)
