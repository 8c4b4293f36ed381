"""Doubly robust policy learning: pseudo-outcomes, contrast regressions,
stage rules, the backward cross-fitted pipeline, and the internal value
estimator.

The estimation order is backward. Stage 2 first: for each fold, an auxiliary
contrast model and a continuation propensity (both trained out-of-fold) turn
the partially observed loss change (E12 - Ej) into a pseudo-outcome that is
conditionally unbiased whenever either nuisance is right; regressing the
pooled out-of-fold pseudo-outcomes on the stage-j history gives the final
stage-2 contrast, and per-fold repeats give fold-specific rules. Stage 1
then replaces the unobservable optimal continuation value with the estimated
one induced by the fold-specific stage-2 rule, and repeats the same
doubly robust construction on the baseline features, pooling the
pseudo-outcomes of every subject (not just those who took the test).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .crossfit import (
    AuxContrastSet,
    CoreModels,
    EValues,
    FoldAssignment,
    PropensitySet,
    fit_core_models,
    fit_propensities,
    fit_stage1_aux_contrasts,
    fit_stage2_aux_contrasts,
    make_folds,
)
from .data import (
    CostSchedule,
    Dataset,
    InformationState,
    Record,
    features_at_state,
    prediction_loss,
)
from .errors import DimMismatch, EmptyData, InsufficientSupport, MissingBlock, WrongStage
from .learners import FittedModel, LearnerConfig, fit_regressor
from .simulate import MisspecPlan

FORMAT_VERSION = 1


@dataclass(frozen=True)
class CostqConfig:
    """Everything the learning pipeline needs besides the data and costs."""

    n_folds: int = 5
    clip: float = 0.01
    seed: int = 0
    propensity1: LearnerConfig = LearnerConfig(
        kind="softmax", n_classes=3, feature_map="poly2", ridge=1e-3, grad_tol=1e-8
    )
    propensity2: LearnerConfig = LearnerConfig(
        kind="logistic", feature_map="poly2", ridge=1e-3, grad_tol=1e-8
    )
    core: LearnerConfig = LearnerConfig(
        kind="logistic", feature_map="poly2", ridge=1e-3, grad_tol=1e-8
    )
    aux_contrast: LearnerConfig = LearnerConfig(kind="linear", feature_map="poly5", ridge=1e-2)
    dr_contrast: LearnerConfig = LearnerConfig(kind="linear", feature_map="poly5", ridge=1e-2)
    # optional stage-1 overrides; None means "same class as stage 2"
    aux_contrast_stage1: Optional[LearnerConfig] = LearnerConfig(
        kind="linear", feature_map="poly2", ridge=1e-4
    )
    dr_contrast_stage1: Optional[LearnerConfig] = LearnerConfig(
        kind="linear", feature_map="poly2", ridge=1e-4
    )
    nested_stage2: bool = False
    misspec: Optional[MisspecPlan] = None

    @property
    def aux1(self) -> LearnerConfig:
        return self.aux_contrast_stage1 if self.aux_contrast_stage1 is not None else self.aux_contrast

    @property
    def dr1(self) -> LearnerConfig:
        return self.dr_contrast_stage1 if self.dr_contrast_stage1 is not None else self.dr_contrast

    def resolved(self) -> "CostqConfig":
        """Apply the misspecification plan to the targeted nuisance learners."""
        cfg = self
        if cfg.misspec is not None:
            if cfg.misspec.propensity_feature_map:
                fm = cfg.misspec.propensity_feature_map
                cfg = replace(
                    cfg,
                    propensity1=replace(cfg.propensity1, feature_map=fm),
                    propensity2=replace(cfg.propensity2, feature_map=fm),
                )
            if cfg.misspec.aux_contrast_feature_map:
                wrong = LearnerConfig(kind="linear", feature_map=cfg.misspec.aux_contrast_feature_map)
                cfg = replace(cfg, aux_contrast=wrong, aux_contrast_stage1=wrong)
        return cfg

    def config_hash(self) -> str:
        def enc(c: LearnerConfig) -> dict:
            d = {k: getattr(c, k) for k in ("kind", "n_classes", "ridge", "step_size",
                                            "max_iters", "grad_tol", "bandwidth", "seed")}
            d["feature_map"] = c.feature_map if isinstance(c.feature_map, str) else "<custom>"
            return d

        payload = {
            "n_folds": self.n_folds,
            "clip": self.clip,
            "seed": self.seed,
            "nested_stage2": self.nested_stage2,
            "misspec": self.misspec.setting if self.misspec else "A",
            "learners": {
                name: enc(getattr(self, name))
                for name in ("propensity1", "propensity2", "core", "aux_contrast", "dr_contrast")
            },
            "stage1_learners": {"aux": enc(self.aux1), "dr": enc(self.dr1)},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PseudoOutcomeTable:
    """Out-of-fold pseudo-outcomes and the inverse-probability weights used.

    Stage-2 entries are NaN off {S1 = j}; stage-1 entries exist for every
    record. A zero weight means the pseudo-outcome is exactly the auxiliary
    model prediction.
    """

    phi_stage2: dict[int, np.ndarray]
    w_stage2: dict[int, np.ndarray]
    phi_stage1: dict[int, np.ndarray]
    w_stage1: dict[int, np.ndarray]


@dataclass
class DrContrastSet:
    """Final doubly robust contrast functions; with the tie-break rules and
    costs, this is the learned policy."""

    stage2: dict[int, FittedModel]
    stage1: dict[int, FittedModel]
    tie_break: str = "cheaper-then-test1"


@dataclass
class Diagnostics:
    folds: FoldAssignment
    pseudo_outcomes: PseudoOutcomeTable
    value_estimate: float
    clip_rates: dict[str, float]
    per_fold_losses: dict[str, dict]
    nuisance_train_indices: dict[str, dict]
    fold_stage2_dr: dict[tuple[int, int], FittedModel]
    fold_stage1_dr: dict[tuple[int, int], FittedModel]
    aux: Optional[AuxContrastSet] = None
    propensities: Optional[PropensitySet] = None
    propensity_histograms: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "value_estimate": self.value_estimate,
            "clip_rates": self.clip_rates,
            "per_fold_losses": {k: {str(kk): vv for kk, vv in v.items()}
                                for k, v in self.per_fold_losses.items()},
            "n_folds": self.folds.n_folds,
            "propensity_histograms": self.propensity_histograms,
        }


_HIST_EDGES = np.linspace(0.0, 1.0, 11)


def _propensity_histograms(data: Dataset, folds: FoldAssignment, prop) -> dict:
    """Per-fold counts of out-of-fold propensity evaluations in ten equal
    probability bins, for positivity inspection."""
    out: dict = {"bin_edges": _HIST_EDGES.tolist(), "first_stage": {}, "continuation": {}}
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        probs = prop.first_stage_raw(k, data.x0[held])
        out["first_stage"][str(k)] = {
            f"action_{a}": np.histogram(probs[:, a], bins=_HIST_EDGES)[0].tolist()
            for a in range(3)
        }
        cont: dict = {}
        for j in (1, 2):
            idx = held[data.s1[held] == j]
            if idx.size:
                vals = prop.continuation_raw(k, j, data.history(j)[idx])
                cont[f"from_state_{j}"] = np.histogram(vals, bins=_HIST_EDGES)[0].tolist()
        out["continuation"][str(k)] = cont
    return out


# ---------------------------------------------------------------------------
# Stage rules
# ---------------------------------------------------------------------------


def rule_stage2_values(delta_values: np.ndarray, j: int) -> np.ndarray:
    """Continue to the remaining test iff the contrast is strictly negative."""
    return np.where(np.asarray(delta_values) < 0, 3 - j, 0)


def rule_stage2(model: FittedModel, x: np.ndarray, j: int) -> int:
    """Second-stage action at one history point: 0 (stop) or jc."""
    val = float(model.predict(np.atleast_2d(x))[0])
    return int(3 - j) if val < 0 else 0


def rule_stage0_values(d1: np.ndarray, d2: np.ndarray, costs: CostSchedule) -> np.ndarray:
    """First-stage action from the two contrast values: take test j when its
    contrast beats both zero and the other test; exact ties go to the cheaper
    test, then to test 1."""
    d1 = np.atleast_1d(np.asarray(d1, dtype=float))
    d2 = np.atleast_1d(np.asarray(d2, dtype=float))
    out = np.zeros(d1.shape, dtype=int)
    out[(d1 < 0) & (d1 < d2)] = 1
    out[(d2 < 0) & (d2 < d1)] = 2
    tie = (d1 < 0) & (d1 == d2)
    out[tie] = 1 if costs.c1 <= costs.c2 else 2
    return out


def rule_stage0(model1: FittedModel, model2: FittedModel, x0: np.ndarray,
                costs: CostSchedule) -> int:
    x0 = np.atleast_2d(x0)
    d1 = float(model1.predict(x0)[0])
    d2 = float(model2.predict(x0)[0])
    return int(rule_stage0_values(d1, d2, costs)[0])


# ---------------------------------------------------------------------------
# Record-level pseudo-outcome operations
# ---------------------------------------------------------------------------


@dataclass
class FoldNuisances:
    """The nuisance functions attached to one outer fold, as used when
    computing pseudo-outcomes for that fold's held-out records."""

    fold: int
    propensities: PropensitySet
    aux: AuxContrastSet
    core: CoreModels
    costs: CostSchedule
    stage2_dr: dict[int, FittedModel] = field(default_factory=dict)


def _record_e(core: CoreModels, record: Record, state: InformationState,
              costs: CostSchedule, outcome_kind: str) -> float:
    feats = features_at_state(record, state)
    pred = float(core.predict_mean(state, np.atleast_2d(feats))[0])
    return prediction_loss(record.y, pred, outcome_kind) + state.cost(costs)


def pseudo_outcome_stage2(record: Record, j: int, nu: FoldNuisances,
                          outcome_kind: str = "binary") -> float:
    """Doubly robust stage-2 pseudo-outcome for one record with S1 = j."""
    if record.path.s1 != j:
        raise WrongStage(f"record has S1={record.path.s1}, expected {j}")
    jc = 3 - j
    state_j = InformationState.S1only if j == 1 else InformationState.S2only
    xj = np.atleast_2d(features_at_state(record, state_j))
    delta = float(nu.aux.stage2[(nu.fold, j)].predict(xj)[0])
    if record.path.s2 != jc:
        return delta
    pi = float(nu.propensities.continuation(nu.fold, j, xj)[0])
    e12 = _record_e(nu.core, record, InformationState.S12, nu.costs, outcome_kind)
    ej = _record_e(nu.core, record, state_j, nu.costs, outcome_kind)
    return delta + ((e12 - ej) - delta) / pi


def continuation_value(record: Record, j: int, nu: FoldNuisances,
                       outcome_kind: str = "binary") -> float:
    """Estimated value of following the fold's stage-2 rule from state j:
    E_j plus the contrast whenever the rule continues."""
    state_j = InformationState.S1only if j == 1 else InformationState.S2only
    if (j == 1 and record.x1 is None) or (j == 2 and record.x2 is None):
        raise MissingBlock(f"continuation value at state {j} needs block x{j}")
    xj = np.atleast_2d(features_at_state(record, state_j))
    ej = _record_e(nu.core, record, state_j, nu.costs, outcome_kind)
    delta = float(nu.stage2_dr[j].predict(xj)[0])
    return ej + min(0.0, delta)


def pseudo_outcome_stage1(record: Record, j: int, nu: FoldNuisances,
                          outcome_kind: str = "binary") -> float:
    """Doubly robust stage-1 pseudo-outcome; defined for every record, and
    equal to the auxiliary prediction when the record took a different test."""
    x0 = np.atleast_2d(record.x0)
    delta = float(nu.aux.stage1[(nu.fold, j)].predict(x0)[0])
    if record.path.s1 != j:
        return delta
    pi = float(nu.propensities.first_stage(nu.fold, x0)[0, j])
    e0 = _record_e(nu.core, record, InformationState.S0, nu.costs, outcome_kind)
    qt = continuation_value(record, j, nu, outcome_kind)
    return delta + ((qt - e0) - delta) / pi


# ---------------------------------------------------------------------------
# Vectorized pipeline pieces
# ---------------------------------------------------------------------------


class _ClipCounter:
    def __init__(self):
        self.clipped = 0
        self.total = 0

    def add(self, raw: np.ndarray, clip: float) -> None:
        raw = np.atleast_1d(raw)
        self.clipped += int(((raw < clip) | (raw > 1 - clip)).sum())
        self.total += raw.size

    @property
    def rate(self) -> float:
        return self.clipped / self.total if self.total else 0.0


def _stage2_phi(data: Dataset, evals: EValues, prop: PropensitySet,
                aux: AuxContrastSet, k: int, j: int, idx: np.ndarray,
                counter: Optional[_ClipCounter] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stage-2 pseudo-outcomes for records ``idx`` (all with S1 = j) using
    fold k's nuisance models."""
    Xj = data.history(j)[idx]
    delta = aux.stage2[(k, j)].predict(Xj)
    phi = delta.copy()
    w = np.zeros(idx.size)
    cont = data.s2[idx] == 3 - j
    if np.any(cont):
        raw = prop.continuation_raw(k, j, Xj[cont])
        if counter is not None:
            counter.add(raw, prop.clip)
        pi = np.clip(raw, prop.clip, 1 - prop.clip)
        w[cont] = 1.0 / pi
        labels = evals.e12[idx][cont] - evals.at_state(j)[idx][cont]
        phi[cont] += w[cont] * (labels - delta[cont])
    return phi, w


def _stage1_phi(data: Dataset, evals: EValues, prop: PropensitySet,
                aux: AuxContrastSet, qtilde: dict, k: int, j: int,
                idx: np.ndarray, counter: Optional[_ClipCounter] = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Stage-1 pseudo-outcomes for records ``idx`` using fold k's nuisances."""
    X0 = data.x0[idx]
    delta = aux.stage1[(k, j)].predict(X0)
    phi = delta.copy()
    w = np.zeros(idx.size)
    took = data.s1[idx] == j
    if np.any(took):
        raw = prop.first_stage_raw(k, X0[took])[:, j]
        if counter is not None:
            counter.add(raw, prop.clip)
        pi = np.clip(raw, prop.clip, 1 - prop.clip)
        w[took] = 1.0 / pi
        labels = qtilde[(k, j)][idx][took] - evals.e0[idx][took]
        phi[took] += w[took] * (labels - delta[took])
    return phi, w


def stage2_pseudo_outcomes(data: Dataset, folds: FoldAssignment, evals: EValues,
                           propensities, aux: AuxContrastSet, j: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold stage-2 pseudo-outcomes for every record with S1 = j
    (NaN elsewhere), with the weights used. Nuisances may be fitted objects
    or injected true functions."""
    n = len(data)
    phi = np.full(n, np.nan)
    w = np.zeros(n)
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        idx = held[data.s1[held] == j]
        if idx.size == 0:
            continue
        phi[idx], w[idx] = _stage2_phi(data, evals, propensities, aux, k, j, idx)
    return phi, w


def stage1_pseudo_outcomes(data: Dataset, folds: FoldAssignment, evals: EValues,
                           propensities, aux: AuxContrastSet,
                           qtilde: dict[tuple[int, int], np.ndarray], j: int
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold stage-1 pseudo-outcomes for every record."""
    n = len(data)
    phi = np.full(n, np.nan)
    w = np.zeros(n)
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        phi[held], w[held] = _stage1_phi(data, evals, propensities, aux, qtilde, k, j, held)
    return phi, w


def fit_dr_contrast_stage2(data: Dataset, j: int, phi: np.ndarray,
                           config: LearnerConfig) -> FittedModel:
    """Squared-error ERM of the stage-2 pseudo-outcomes on the stage-j
    history, restricted to subjects with S1 = j."""
    mask = data.s1 == j
    if not np.any(mask):
        raise InsufficientSupport(f"no subjects with S1={j}")
    return fit_regressor(data.history(j)[mask], phi[mask], config)


def fit_dr_contrast_stage1(data: Dataset, j: int, phi: np.ndarray,
                           config: LearnerConfig) -> FittedModel:
    """Squared-error ERM of the stage-1 pseudo-outcomes on the baseline over
    the FULL sample (no first-stage indicator, unlike stage 2)."""
    if phi.shape[0] != len(data):
        raise EmptyData("stage-1 pseudo-outcomes must cover every record")
    return fit_regressor(data.x0, phi, config)


def _nested_stage2_phi(data, evals, s1, s2, train_idx, j, cfg, clip, seed):
    """Optional one-level internal 2-fold nesting for the fold-specific
    stage-2 fits: each training-half's pseudo-outcomes use nuisances from the
    other half."""
    jc = 3 - j
    sub = train_idx[s1[train_idx] == j]
    halves = make_folds(train_idx.size, 2, seed, stratify=s1[train_idx])
    phi = np.full(sub.size, np.nan)
    pos_of = {int(i): p for p, i in enumerate(sub)}
    for half in (0, 1):
        fit_abs = train_idx[halves.train_indices(half)]
        eval_abs = train_idx[halves.test_indices(half)]
        fit_j = fit_abs[s1[fit_abs] == j]
        labels = (s2[fit_j] == jc).astype(int)
        if labels.sum() in (0, labels.size):
            raise InsufficientSupport(
                f"internal nesting: no decision variation after test {j}"
            )
        from .learners import fit_classifier  # local to avoid cycle at import

        pi_model = fit_classifier(data.history(j)[fit_j], labels, cfg.propensity2)
        path_idx = fit_j[s2[fit_j] == jc]
        if path_idx.size == 0:
            raise InsufficientSupport(f"internal nesting: ordered path ({j},{jc}) empty")
        aux_model = fit_regressor(
            data.history(j)[path_idx],
            evals.e12[path_idx] - evals.at_state(j)[path_idx],
            cfg.aux_contrast,
        )
        ev = eval_abs[s1[eval_abs] == j]
        Xj = data.history(j)[ev]
        delta = aux_model.predict(Xj)
        vals = delta.copy()
        cont = s2[ev] == jc
        if np.any(cont):
            pi = np.clip(pi_model.predict(Xj[cont]), clip, 1 - clip)
            vals[cont] += (evals.e12[ev][cont] - evals.at_state(j)[ev][cont] - delta[cont]) / pi
        for v, i in zip(vals, ev):
            phi[pos_of[int(i)]] = v
    return sub, phi


# ---------------------------------------------------------------------------
# The learned policy object
# ---------------------------------------------------------------------------


_STATE_OF_STAGE = {1: InformationState.S1only, 2: InformationState.S2only}


@dataclass
class PolicyRule:
    """Learned sequential testing policy: decisions from the DR contrasts,
    predictions from the per-state core models."""

    contrasts: DrContrastSet
    costs: CostSchedule
    core: CoreModels
    dims: tuple[int, int, int]
    outcome_kind: str = "binary"
    method: str = "costq"
    metadata: dict = field(default_factory=dict)

    # batch interface (used by the evaluator) ------------------------------

    def decide0_batch(self, X0: np.ndarray) -> np.ndarray:
        X0 = np.atleast_2d(X0)
        d1 = self.contrasts.stage1[1].predict(X0)
        d2 = self.contrasts.stage1[2].predict(X0)
        return rule_stage0_values(d1, d2, self.costs)

    def decide_next_batch(self, j: int, Xj: np.ndarray) -> np.ndarray:
        return rule_stage2_values(self.contrasts.stage2[j].predict(np.atleast_2d(Xj)), j)

    def predict_batch(self, state: InformationState, F: np.ndarray) -> np.ndarray:
        return self.core.predict_mean(state, np.atleast_2d(F))

    # scalar interface ------------------------------------------------------

    def decide0(self, x0: np.ndarray) -> int:
        if np.atleast_1d(x0).shape[-1] != self.dims[0]:
            raise DimMismatch(f"x0 must have dim {self.dims[0]}")
        return int(self.decide0_batch(np.atleast_2d(x0))[0])

    def decide_next(self, j: int, xj: np.ndarray) -> int:
        return int(self.decide_next_batch(j, np.atleast_2d(xj))[0])

    def predict(self, state: InformationState, features: np.ndarray) -> float:
        return float(self.predict_batch(state, np.atleast_2d(features))[0])

    def contrast_stage1(self, x0: np.ndarray) -> dict[int, float]:
        X0 = np.atleast_2d(x0)
        return {j: float(self.contrasts.stage1[j].predict(X0)[0]) for j in (1, 2)}

    def contrast_stage2(self, j: int, xj: np.ndarray) -> float:
        return float(self.contrasts.stage2[j].predict(np.atleast_2d(xj))[0])

    # serialization ----------------------------------------------------------

    def to_json_dict(self) -> dict:
        core_models = {}
        for state, model in self.core.models.items():
            if not isinstance(model, FittedModel):
                raise ValueError("policies with injected core callables cannot be serialized")
            core_models[state.value] = model.to_json_dict()
        return {
            "format_version": FORMAT_VERSION,
            "method": self.method,
            "dims": list(self.dims),
            "outcome_kind": self.outcome_kind,
            "costs": {"c1": self.costs.c1, "c2": self.costs.c2},
            "tie_break": self.contrasts.tie_break,
            "metadata": self.metadata,
            "contrasts": {
                "stage2": {str(j): m.to_json_dict() for j, m in self.contrasts.stage2.items()},
                "stage1": {str(j): m.to_json_dict() for j, m in self.contrasts.stage1.items()},
            },
            "core": core_models,
        }

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @staticmethod
    def from_json_dict(d: dict) -> "PolicyRule":
        contrasts = DrContrastSet(
            stage2={int(j): FittedModel.from_json_dict(m) for j, m in d["contrasts"]["stage2"].items()},
            stage1={int(j): FittedModel.from_json_dict(m) for j, m in d["contrasts"]["stage1"].items()},
            tie_break=d.get("tie_break", "cheaper-then-test1"),
        )
        core = CoreModels(
            {InformationState(s): FittedModel.from_json_dict(m) for s, m in d["core"].items()},
            d.get("outcome_kind", "binary"),
        )
        return PolicyRule(
            contrasts=contrasts,
            costs=CostSchedule(d["costs"]["c1"], d["costs"]["c2"]),
            core=core,
            dims=tuple(d["dims"]),
            outcome_kind=d.get("outcome_kind", "binary"),
            method=d.get("method", "costq"),
            metadata=d.get("metadata", {}),
        )


@dataclass
class LearnResult:
    policy: PolicyRule
    diagnostics: Diagnostics


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def learn_policy(
    data: Dataset,
    costs: CostSchedule,
    config: CostqConfig = CostqConfig(),
    core_models: Optional[CoreModels] = None,
    propensities: Optional[PropensitySet] = None,
    method_name: str = "costq",
) -> LearnResult:
    """Run the backward doubly robust pipeline and return the learned policy
    with its diagnostics bundle.

    ``core_models`` / ``propensities`` may be injected (e.g. known-true
    functions); anything not supplied is estimated from the data.
    """
    cfg = config.resolved()
    n = len(data)
    s1, s2 = data.s1, data.s2
    folds = make_folds(n, cfg.n_folds, cfg.seed, stratify=s1)

    core = core_models if core_models is not None else fit_core_models(data, cfg.core)
    evals = core.e_values(data, costs)
    prop = propensities if propensities is not None else fit_propensities(
        data, folds, cfg.propensity1, cfg.propensity2, cfg.clip
    )

    aux = fit_stage2_aux_contrasts(data, folds, evals, cfg.aux_contrast)
    clip2, clip1 = _ClipCounter(), _ClipCounter()
    losses: dict[str, dict] = {"stage2_dr_fold": {}, "stage1_dr_fold": {}}

    # Fold-specific stage-2 DR fits and the rules they induce.
    fold_stage2_dr: dict[tuple[int, int], FittedModel] = {}
    for k in range(folds.n_folds):
        train_idx = folds.train_indices(k)
        for j in (1, 2):
            if cfg.nested_stage2:
                sub, phi_train = _nested_stage2_phi(
                    data, evals, s1, s2, train_idx, j, cfg, cfg.clip,
                    seed=cfg.seed * 1000 + 7 * k + j,
                )
            else:
                sub = train_idx[s1[train_idx] == j]
                phi_train, _ = _stage2_phi(data, evals, prop, aux, k, j, sub)
            if sub.size == 0:
                raise InsufficientSupport(f"no subjects with S1={j} in training fold {k}")
            model = fit_regressor(data.history(j)[sub], phi_train, cfg.dr_contrast)
            fold_stage2_dr[(k, j)] = model
            resid = phi_train - model.predict(data.history(j)[sub])
            losses["stage2_dr_fold"][(k, j)] = float(np.mean(resid**2))

    # Pooled out-of-fold stage-2 pseudo-outcomes and the final stage-2 fits.
    phi2 = {j: np.full(n, np.nan) for j in (1, 2)}
    w2 = {j: np.zeros(n) for j in (1, 2)}
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        for j in (1, 2):
            idx = held[s1[held] == j]
            if idx.size == 0:
                continue
            phi, w = _stage2_phi(data, evals, prop, aux, k, j, idx, clip2)
            phi2[j][idx] = phi
            w2[j][idx] = w
    dr_stage2 = {j: fit_dr_contrast_stage2(data, j, phi2[j], cfg.dr_contrast) for j in (1, 2)}

    # Continuation values under each fold's stage-2 rule, for all S1=j records.
    qtilde: dict[tuple[int, int], np.ndarray] = {}
    for k in range(folds.n_folds):
        for j in (1, 2):
            vals = np.full(n, np.nan)
            idx = np.flatnonzero(s1 == j)
            delta = fold_stage2_dr[(k, j)].predict(data.history(j)[idx])
            vals[idx] = evals.at_state(j)[idx] + np.minimum(0.0, delta)
            qtilde[(k, j)] = vals

    aux = fit_stage1_aux_contrasts(data, folds, evals, qtilde, cfg.aux1, out=aux)

    # Out-of-fold stage-1 pseudo-outcomes for every record.
    phi1 = {j: np.full(n, np.nan) for j in (1, 2)}
    w1 = {j: np.zeros(n) for j in (1, 2)}
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        for j in (1, 2):
            phi, w = _stage1_phi(data, evals, prop, aux, qtilde, k, j, held, clip1)
            phi1[j][held] = phi
            w1[j][held] = w
    dr_stage1 = {j: fit_dr_contrast_stage1(data, j, phi1[j], cfg.dr1) for j in (1, 2)}

    # Fold-specific stage-1 DR fits (training-fold pseudo-outcomes only),
    # needed by the internal value estimator.
    fold_stage1_dr: dict[tuple[int, int], FittedModel] = {}
    for k in range(folds.n_folds):
        train_idx = folds.train_indices(k)
        for j in (1, 2):
            phi_train, _ = _stage1_phi(data, evals, prop, aux, qtilde, k, j, train_idx)
            model = fit_regressor(data.x0[train_idx], phi_train, cfg.dr1)
            fold_stage1_dr[(k, j)] = model
            resid = phi_train - model.predict(data.x0[train_idx])
            losses["stage1_dr_fold"][(k, j)] = float(np.mean(resid**2))

    pseudo = PseudoOutcomeTable(phi2, w2, phi1, w1)
    vhat = estimate_policy_value(data, folds, fold_stage1_dr, pseudo, evals, costs)

    contrasts = DrContrastSet(stage2=dr_stage2, stage1=dr_stage1)
    policy = PolicyRule(
        contrasts=contrasts,
        costs=costs,
        core=core,
        dims=data.dims,
        outcome_kind=data.outcome_kind,
        method=method_name,
        metadata={
            "n": n,
            "n_folds": cfg.n_folds,
            "seed": cfg.seed,
            "clip": cfg.clip,
            "config_hash": cfg.config_hash(),
            "value_estimate": vhat,
            "misspec": cfg.misspec.setting if cfg.misspec else "A",
        },
    )
    train_indices = {
        "propensity_first": prop.train_idx_first if propensities is None else {},
        "propensity_second": prop.train_idx_second if propensities is None else {},
        "aux_stage2": aux.train_idx_stage2,
        "aux_stage1": aux.train_idx_stage1,
        "core": dict(core.train_idx),
    }
    diag = Diagnostics(
        folds=folds,
        pseudo_outcomes=pseudo,
        value_estimate=vhat,
        clip_rates={"stage2": clip2.rate, "stage1": clip1.rate},
        per_fold_losses=losses,
        nuisance_train_indices=train_indices,
        fold_stage2_dr=fold_stage2_dr,
        fold_stage1_dr=fold_stage1_dr,
        aux=aux,
        propensities=prop,
        propensity_histograms=_propensity_histograms(data, folds, prop),
    )
    return LearnResult(policy, diag)


def estimate_policy_value(
    data: Dataset,
    folds: FoldAssignment,
    fold_stage1_dr: dict[tuple[int, int], FittedModel],
    pseudo: PseudoOutcomeTable,
    evals: EValues,
    costs: CostSchedule,
) -> float:
    """Internal estimate of the expected cost-augmented loss of the learned
    policy: baseline loss plus the stage-1 pseudo-outcome of whichever test
    the held-out fold's rule would order."""
    n = len(data)
    total = 0.0
    for k in range(folds.n_folds):
        held = folds.test_indices(k)
        if held.size == 0:
            continue
        X0 = data.x0[held]
        d1 = fold_stage1_dr[(k, 1)].predict(X0)
        d2 = fold_stage1_dr[(k, 2)].predict(X0)
        action = rule_stage0_values(d1, d2, costs)
        contrib = evals.e0[held].copy()
        contrib[action == 1] += pseudo.phi_stage1[1][held][action == 1]
        contrib[action == 2] += pseudo.phi_stage1[2][held][action == 2]
        total += contrib.sum()
    return total / n


def load_policy_json(d: dict):
    """Dispatch a policy JSON dict to the class that wrote it."""
    method = d.get("method", "costq")
    if method in ("costq", "only_complete"):
        return PolicyRule.from_json_dict(d)
    from . import baselines

    if method == "one_time":
        return baselines.OneTimePolicy.from_json_dict(d)
    if method in ("always_stop", "always_test_all"):
        return baselines.FixedPolicy.from_json_dict(d)
    raise ValueError(f"unknown policy method {method!r}")


def load_policy(path: str):
    with open(path) as fh:
        return load_policy_json(json.load(fh))
