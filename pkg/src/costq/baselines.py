"""Comparator policies: the same backward recursion on complete cases only,
a one-time baseline-only selection rule, and the two fixed reference
policies (never test / always test everything)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .crossfit import CoreModels, fit_core_models
from .data import CostSchedule, Dataset, InformationState
from .engine import (
    FORMAT_VERSION,
    CostqConfig,
    DrContrastSet,
    PolicyRule,
    rule_stage0_values,
)
from .errors import InsufficientSupport
from .learners import FittedModel, fit_classifier, fit_regressor

_STATE_ORDER = (
    InformationState.S0,
    InformationState.S1only,
    InformationState.S2only,
    InformationState.S12,
)


def fit_only_complete(data: Dataset, costs: CostSchedule,
                      config: CostqConfig = CostqConfig()) -> PolicyRule:
    """Backward Q-learning restricted to complete cases: every regression --
    the per-state prediction models included -- is an unweighted fit on the
    subjects who ended with both tests observed. No inverse weighting, no
    doubly robust correction, so any selection tilt in who got fully tested
    carries straight into the fits.
    """
    cfg = config.resolved()
    s1, s2 = data.s1, data.s2
    complete = np.flatnonzero(data.state_names == "S12")
    if complete.size == 0:
        raise InsufficientSupport("no complete cases (state S12) in the data")
    complete_data = Dataset(
        tuple(data.records[i] for i in complete), data.dims, data.outcome_kind
    )

    core = CoreModels({}, data.outcome_kind, {})
    for state in _STATE_ORDER:
        feats = core.state_features(complete_data, state)
        if data.outcome_kind == "binary":
            core.models[state] = fit_classifier(feats, complete_data.y.astype(int), cfg.core)
        else:
            core.models[state] = fit_regressor(feats, complete_data.y, cfg.core)
        core.train_idx[state] = complete
    evals = core.e_values(data, costs)

    stage2: dict[int, FittedModel] = {}
    stage1: dict[int, FittedModel] = {}
    for j in (1, 2):
        jc = 3 - j
        idx = np.flatnonzero((s1 == j) & (s2 == jc))
        if idx.size == 0:
            raise InsufficientSupport(f"no complete cases on the ordered path ({j}, {jc})")
        labels = evals.e12[idx] - evals.at_state(j)[idx]
        stage2[j] = fit_regressor(data.history(j)[idx], labels, cfg.dr_contrast)
        delta = stage2[j].predict(data.history(j)[idx])
        qtilde = evals.at_state(j)[idx] + np.minimum(0.0, delta)
        stage1[j] = fit_regressor(data.x0[idx], qtilde - evals.e0[idx], cfg.dr1)

    return PolicyRule(
        contrasts=DrContrastSet(stage2=stage2, stage1=stage1),
        costs=costs,
        core=core,
        dims=data.dims,
        outcome_kind=data.outcome_kind,
        method="only_complete",
        metadata={"n": len(data), "seed": cfg.seed, "config_hash": cfg.config_hash()},
    )


@dataclass
class OneTimePolicy:
    """Static baseline-only rule: a regression of each terminal state's
    cost-augmented loss on x0 picks one target state per subject up front;
    ties go to the lowest-cost state (then the lower test index). Reaching
    the full state acquires the cheaper test first."""

    state_loss: dict[InformationState, FittedModel]
    costs: CostSchedule
    core: CoreModels
    dims: tuple[int, int, int]
    outcome_kind: str = "binary"
    method: str = "one_time"
    metadata: dict = field(default_factory=dict)

    def _state_costs(self) -> list[tuple[float, int, InformationState]]:
        c = {
            InformationState.S0: 0.0,
            InformationState.S1only: self.costs.c1,
            InformationState.S2only: self.costs.c2,
            InformationState.S12: self.costs.c1 + self.costs.c2,
        }
        return sorted((c[s], i, s) for i, s in enumerate(_STATE_ORDER))

    def target_states(self, X0: np.ndarray) -> np.ndarray:
        """Argmin target state per row, scanning states in cost order so that
        exact ties resolve to the cheaper state."""
        X0 = np.atleast_2d(X0)
        by_cost = self._state_costs()
        values = np.column_stack([self.state_loss[s].predict(X0) for _, _, s in by_cost])
        pick = np.argmin(values, axis=1)  # first minimum = cheapest on ties
        states = np.array([by_cost[i][2].value for i in pick])
        return states

    @property
    def _first_test_for_both(self) -> int:
        return 1 if self.costs.c1 <= self.costs.c2 else 2

    def decide0_batch(self, X0: np.ndarray) -> np.ndarray:
        states = self.target_states(X0)
        out = np.zeros(states.size, dtype=int)
        out[states == "S1only"] = 1
        out[states == "S2only"] = 2
        out[states == "S12"] = self._first_test_for_both
        return out

    def decide_next_batch(self, j: int, Xj: np.ndarray) -> np.ndarray:
        Xj = np.atleast_2d(Xj)
        states = self.target_states(Xj[:, : self.dims[0]])
        return np.where(states == "S12", 3 - j, 0)

    def predict_batch(self, state: InformationState, F: np.ndarray) -> np.ndarray:
        return self.core.predict_mean(state, np.atleast_2d(F))

    def decide0(self, x0: np.ndarray) -> int:
        return int(self.decide0_batch(np.atleast_2d(x0))[0])

    def decide_next(self, j: int, xj: np.ndarray) -> int:
        return int(self.decide_next_batch(j, np.atleast_2d(xj))[0])

    def predict(self, state: InformationState, features: np.ndarray) -> float:
        return float(self.predict_batch(state, np.atleast_2d(features))[0])

    def to_json_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "method": self.method,
            "dims": list(self.dims),
            "outcome_kind": self.outcome_kind,
            "costs": {"c1": self.costs.c1, "c2": self.costs.c2},
            "metadata": self.metadata,
            "state_loss": {s.value: m.to_json_dict() for s, m in self.state_loss.items()},
            "core": {s.value: m.to_json_dict() for s, m in self.core.models.items()},
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json_dict(d: dict) -> "OneTimePolicy":
        return OneTimePolicy(
            state_loss={InformationState(s): FittedModel.from_json_dict(m)
                        for s, m in d["state_loss"].items()},
            costs=CostSchedule(d["costs"]["c1"], d["costs"]["c2"]),
            core=CoreModels({InformationState(s): FittedModel.from_json_dict(m)
                             for s, m in d["core"].items()}, d.get("outcome_kind", "binary")),
            dims=tuple(d["dims"]),
            outcome_kind=d.get("outcome_kind", "binary"),
            metadata=d.get("metadata", {}),
        )


def fit_one_time(data: Dataset, costs: CostSchedule,
                 config: CostqConfig = CostqConfig(),
                 core_models: Optional[CoreModels] = None) -> OneTimePolicy:
    """Fit the per-state conditional loss regressions on every subsample where
    the state's loss is computable, then freeze the baseline argmin rule."""
    cfg = config.resolved()
    core = core_models if core_models is not None else fit_core_models(data, cfg.core)
    evals = core.e_values(data, costs)
    e_of = {
        InformationState.S0: evals.e0,
        InformationState.S1only: evals.e1,
        InformationState.S2only: evals.e2,
        InformationState.S12: evals.e12,
    }
    state_loss: dict[InformationState, FittedModel] = {}
    for state in _STATE_ORDER:
        mask = ~np.isnan(e_of[state])
        if not np.any(mask):
            raise InsufficientSupport(f"state {state.value} not represented in the data")
        state_loss[state] = fit_regressor(data.x0[mask], e_of[state][mask], cfg.dr1)
    return OneTimePolicy(
        state_loss=state_loss,
        costs=costs,
        core=core,
        dims=data.dims,
        outcome_kind=data.outcome_kind,
        metadata={"n": len(data), "seed": cfg.seed, "config_hash": cfg.config_hash()},
    )


@dataclass
class FixedPolicy:
    """Constant reference rules: stop immediately, or take both tests
    (cheaper first) regardless of observations."""

    kind: str  # "always_stop" | "always_test_all"
    costs: CostSchedule
    core: CoreModels
    dims: tuple[int, int, int]
    outcome_kind: str = "binary"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("always_stop", "always_test_all"):
            raise ValueError(f"unknown fixed policy kind {self.kind!r}")

    @property
    def method(self) -> str:
        return self.kind

    def decide0_batch(self, X0: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(X0).shape[0]
        if self.kind == "always_stop":
            return np.zeros(n, dtype=int)
        first = 1 if self.costs.c1 <= self.costs.c2 else 2
        return np.full(n, first, dtype=int)

    def decide_next_batch(self, j: int, Xj: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(Xj).shape[0]
        if self.kind == "always_stop":
            return np.zeros(n, dtype=int)
        return np.full(n, 3 - j, dtype=int)

    def predict_batch(self, state: InformationState, F: np.ndarray) -> np.ndarray:
        return self.core.predict_mean(state, np.atleast_2d(F))

    def decide0(self, x0: np.ndarray) -> int:
        return int(self.decide0_batch(np.atleast_2d(x0))[0])

    def decide_next(self, j: int, xj: np.ndarray) -> int:
        return int(self.decide_next_batch(j, np.atleast_2d(xj))[0])

    def predict(self, state: InformationState, features: np.ndarray) -> float:
        return float(self.predict_batch(state, np.atleast_2d(features))[0])

    def to_json_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "method": self.kind,
            "dims": list(self.dims),
            "outcome_kind": self.outcome_kind,
            "costs": {"c1": self.costs.c1, "c2": self.costs.c2},
            "metadata": self.metadata,
            "core": {s.value: m.to_json_dict() for s, m in self.core.models.items()},
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json_dict(d: dict) -> "FixedPolicy":
        return FixedPolicy(
            kind=d["method"],
            costs=CostSchedule(d["costs"]["c1"], d["costs"]["c2"]),
            core=CoreModels({InformationState(s): FittedModel.from_json_dict(m)
                             for s, m in d["core"].items()}, d.get("outcome_kind", "binary")),
            dims=tuple(d["dims"]),
            outcome_kind=d.get("outcome_kind", "binary"),
            metadata=d.get("metadata", {}),
        )


def fixed_policy(kind: str, core: CoreModels, costs: CostSchedule,
                 dims: tuple[int, int, int], outcome_kind: str = "binary") -> FixedPolicy:
    return FixedPolicy(kind, costs, core, dims, outcome_kind)


def fit_fixed(kind: str, data: Dataset, costs: CostSchedule,
              config: CostqConfig = CostqConfig()) -> FixedPolicy:
    """Fit the per-state prediction models, then wrap them in a constant rule."""
    core = fit_core_models(data, config.resolved().core)
    return FixedPolicy(kind, costs, core, data.dims, data.outcome_kind,
                       metadata={"n": len(data)})
