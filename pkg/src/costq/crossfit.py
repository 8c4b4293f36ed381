"""K-fold cross-fitting and nuisance estimation: acquisition propensities,
per-state core prediction models, and auxiliary contrast regressions, each
trained on the exact subsample its conditional-mean target requires.

Sample-selection rules, fixed by the sequential-MAR structure:
  * first-stage propensity: trained on the whole training fold;
  * second-stage propensity for state j: trained on {S1 = j};
  * core model for state j: trained on {S1 = j} (both continuations kept);
  * core model for the full state: both ordered terminal paths pooled;
  * stage-2 auxiliary contrast for state j: ONLY the ordered path (j, jc) --
    pooling the reverse path would change the conditional target;
  * stage-1 auxiliary contrast for test j: trained on {S1 = j}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import CostSchedule, Dataset, InformationState, prediction_loss
from .errors import InsufficientSupport, TooFewRecords
from .learners import FittedModel, LearnerConfig, fit_classifier, fit_regressor

STATES = (
    InformationState.S0,
    InformationState.S1only,
    InformationState.S2only,
    InformationState.S12,
)


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced disjoint partition of record indices, deterministic in
    (n, n_folds, seed); optionally stratified on a label vector."""

    n: int
    n_folds: int
    seed: int
    fold_of: np.ndarray

    def __post_init__(self) -> None:
        self.fold_of.flags.writeable = False

    def test_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def train_mask(self, k: int) -> np.ndarray:
        return self.fold_of != k


def make_folds(n: int, n_folds: int, seed: int, stratify: Optional[np.ndarray] = None) -> FoldAssignment:
    """Shuffle, then deal indices round-robin so fold sizes differ by at most
    one. With ``stratify``, indices are dealt stratum by stratum, which keeps
    the global balance exact and each stratum balanced within +-1."""
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if n < n_folds:
        raise TooFewRecords(f"cannot split {n} records into {n_folds} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    if stratify is not None:
        stratify = np.asarray(stratify)
        order = np.concatenate([order[stratify[order] == v] for v in np.unique(stratify)])
    fold_of = np.empty(n, dtype=int)
    fold_of[order] = np.arange(n) % n_folds
    return FoldAssignment(n, n_folds, seed, fold_of)


# ---------------------------------------------------------------------------
# Propensities
# ---------------------------------------------------------------------------


@dataclass
class PropensitySet:
    """Cross-fitted acquisition models with predict-time clipping."""

    clip: float
    first: dict[int, FittedModel]
    second: dict[tuple[int, int], FittedModel]
    train_idx_first: dict[int, np.ndarray]
    train_idx_second: dict[tuple[int, int], np.ndarray]

    def first_stage(self, k: int, X0: np.ndarray) -> np.ndarray:
        """Clipped (stop, test 1, test 2) probabilities from fold k's model."""
        return np.clip(self.first[k].predict_proba(X0), self.clip, 1.0 - self.clip)

    def first_stage_raw(self, k: int, X0: np.ndarray) -> np.ndarray:
        return self.first[k].predict_proba(X0)

    def continuation(self, k: int, j: int, Xj: np.ndarray) -> np.ndarray:
        """Clipped probability of continuing to the remaining test from state j."""
        return np.clip(self.second[(k, j)].predict(Xj), self.clip, 1.0 - self.clip)

    def continuation_raw(self, k: int, j: int, Xj: np.ndarray) -> np.ndarray:
        return self.second[(k, j)].predict(Xj)


def fit_propensities(
    data: Dataset,
    folds: FoldAssignment,
    stage1_config: LearnerConfig,
    stage2_config: LearnerConfig,
    clip: float = 0.01,
) -> PropensitySet:
    """Fit first-stage softmax and second-stage continuation logistics on each
    training fold; raises InsufficientSupport naming any empty action cell."""
    if not 0 < clip < 0.5:
        raise ValueError("clip level must be in (0, 0.5)")
    s1, s2 = data.s1, data.s2
    first, second = {}, {}
    idx_first, idx_second = {}, {}
    for k in range(folds.n_folds):
        train = folds.train_indices(k)
        counts = np.bincount(s1[train], minlength=3)
        for action in range(3):
            if counts[action] == 0:
                raise InsufficientSupport(
                    f"first-stage action {action} absent from training fold {k}"
                )
        first[k] = fit_classifier(data.x0[train], s1[train], stage1_config)
        idx_first[k] = train
        for j in (1, 2):
            sub = train[s1[train] == j]
            labels = (s2[sub] == 3 - j).astype(int)
            if labels.sum() == 0 or labels.sum() == labels.size:
                missing = "continuation" if labels.sum() == 0 else "stop"
                raise InsufficientSupport(
                    f"no {missing} decisions after test {j} in training fold {k}"
                )
            second[(k, j)] = fit_classifier(data.history(j)[sub], labels, stage2_config)
            idx_second[(k, j)] = sub
    return PropensitySet(clip, first, second, idx_first, idx_second)


# ---------------------------------------------------------------------------
# Core prediction models and cost-augmented losses
# ---------------------------------------------------------------------------


class _FnPredictor:
    """Adapter giving plain callables the fitted-model prediction surface."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self._fn = fn

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(np.atleast_2d(X)), dtype=float).reshape(-1)


@dataclass
class CoreModels:
    """One outcome predictor per information state.

    The full-information model is a single fit pooled over both ordered
    terminal paths; conditional-mean invariance makes the pooled sample target
    the same regression function as either path alone.
    """

    models: dict[InformationState, object]
    outcome_kind: str = "binary"
    train_idx: dict[InformationState, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def from_functions(fns: dict[InformationState, Callable], outcome_kind: str = "binary") -> "CoreModels":
        return CoreModels({s: _FnPredictor(f) for s, f in fns.items()}, outcome_kind)

    def predict_mean(self, state: InformationState, F: np.ndarray) -> np.ndarray:
        return self.models[state].predict_mean(F)

    def state_features(self, data: Dataset, state: InformationState) -> np.ndarray:
        cols = [data.x0]
        if 1 in state.blocks:
            cols.append(data.x1)
        if 2 in state.blocks:
            cols.append(data.x2)
        return np.hstack(cols)

    def e_values(self, data: Dataset, costs: CostSchedule) -> "EValues":
        """Cost-augmented losses per record and state (NaN where the state's
        features are unobserved). Pure recomputation; safe to cache."""
        n = len(data)
        out = {}
        for state in STATES:
            feats = self.state_features(data, state)
            ok = ~np.isnan(feats).any(axis=1)
            e = np.full(n, np.nan)
            if np.any(ok):
                pred = self.predict_mean(state, feats[ok])
                e[ok] = prediction_loss(data.y[ok], pred, data.outcome_kind) + state.cost(costs)
            out[state] = e
        return EValues(out[STATES[0]], out[STATES[1]], out[STATES[2]], out[STATES[3]])


@dataclass(frozen=True)
class EValues:
    """Per-record cost-augmented losses at each evaluable state."""

    e0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e12: np.ndarray

    def at_state(self, j: int) -> np.ndarray:
        return self.e1 if j == 1 else self.e2


def fit_core_models(data: Dataset, config: LearnerConfig) -> CoreModels:
    """Unweighted ERM per state on the subsample observing that state's
    features: everyone for the baseline, {S1 = j} for single-test states, and
    both ordered paths pooled for the full state."""
    if data.outcome_kind == "continuous" and config.kind != "linear":
        config = replace(config, kind="linear")
    index_sets = {
        InformationState.S0: np.arange(len(data)),
        InformationState.S1only: np.flatnonzero(data.s1 == 1),
        InformationState.S2only: np.flatnonzero(data.s1 == 2),
        InformationState.S12: np.flatnonzero(data.state_names == "S12"),
    }
    models: dict[InformationState, object] = {}
    core = CoreModels(models, data.outcome_kind, index_sets)
    for state, idx in index_sets.items():
        if idx.size == 0:
            raise InsufficientSupport(f"no records available to fit the {state.value} model")
        feats = core.state_features(data, state)[idx]
        if data.outcome_kind == "binary":
            models[state] = fit_classifier(feats, data.y[idx].astype(int), config)
        else:
            models[state] = fit_regressor(feats, data.y[idx], config)
    return core


# ---------------------------------------------------------------------------
# Auxiliary contrast models
# ---------------------------------------------------------------------------


@dataclass
class AuxContrastSet:
    """Cross-fitted nuisance contrasts: stage-2 models keyed by (fold, j) and
    trained on the ordered path (j, jc); stage-1 models trained on {S1 = j}."""

    stage2: dict[tuple[int, int], FittedModel] = field(default_factory=dict)
    stage1: dict[tuple[int, int], FittedModel] = field(default_factory=dict)
    train_idx_stage2: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    train_idx_stage1: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)


def fit_stage2_aux_contrasts(
    data: Dataset,
    folds: FoldAssignment,
    evals: EValues,
    config: LearnerConfig,
    out: Optional[AuxContrastSet] = None,
) -> AuxContrastSet:
    """Regress the observed loss change (E12 - Ej) on the stage-j history,
    per fold, using only ordered-path training subjects."""
    aux = out if out is not None else AuxContrastSet()
    s1, s2 = data.s1, data.s2
    for k in range(folds.n_folds):
        train_mask = folds.train_mask(k)
        for j in (1, 2):
            jc = 3 - j
            idx = np.flatnonzero(train_mask & (s1 == j) & (s2 == jc))
            if idx.size == 0:
                raise InsufficientSupport(
                    f"ordered path ({j}, {jc}) empty in training fold {k}"
                )
            labels = evals.e12[idx] - evals.at_state(j)[idx]
            aux.stage2[(k, j)] = fit_regressor(data.history(j)[idx], labels, config)
            aux.train_idx_stage2[(k, j)] = idx
    return aux


def fit_stage1_aux_contrasts(
    data: Dataset,
    folds: FoldAssignment,
    evals: EValues,
    qtilde: dict[tuple[int, int], np.ndarray],
    config: LearnerConfig,
    out: Optional[AuxContrastSet] = None,
) -> AuxContrastSet:
    """Regress (Qtilde_j - E0) on the baseline, per fold, over training
    subjects with S1 = j. ``qtilde[(k, j)]`` holds continuation values under
    fold k's second-stage rule (NaN off {S1 = j})."""
    aux = out if out is not None else AuxContrastSet()
    s1 = data.s1
    for k in range(folds.n_folds):
        train_mask = folds.train_mask(k)
        for j in (1, 2):
            idx = np.flatnonzero(train_mask & (s1 == j))
            if idx.size == 0:
                raise InsufficientSupport(f"no subjects with S1={j} in training fold {k}")
            labels = qtilde[(k, j)][idx] - evals.e0[idx]
            aux.stage1[(k, j)] = fit_regressor(data.x0[idx], labels, config)
            aux.train_idx_stage1[(k, j)] = idx
    return aux
