"""Synthetic data generation and ground-truth oracles.

Provides the two built-in outcome scenarios (plus degenerate variants used in
tests), the two-stage behavior policy that induces history-dependent
missingness, quadrature-composed true conditional means, and brute-force
Monte Carlo tables of the true contrasts, continuation values, and optimal
actions.

All generators draw a fixed number of variates per record from a counted RNG
stream, so datasets are bit-reproducible and acquisition decisions depend
only on the observed history by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import (
    AcquisitionPath,
    CostSchedule,
    Dataset,
    InformationState,
    Record,
    TruePropensities,
    dataset_from_arrays,
    PROB_CLAMP,
)
from .learners import LearnerConfig

TRUNC_LO, TRUNC_HI = -2.0, 2.0


def _sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _entropy(p):
    """Expected cross-entropy of a calibrated binary prediction."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    return -(p * np.log(p) + (1 - p) * np.log1p(-p))


def _cross_entropy(y, p):
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


def truncated_normal(rng: np.random.Generator, loc, scale: float,
                     lo: float, hi: float, size: int) -> np.ndarray:
    """Rejection-sampled truncated normals; deterministic given the stream."""
    loc = np.broadcast_to(np.asarray(loc, dtype=float), (size,)).copy()
    out = np.empty(size)
    todo = np.arange(size)
    while todo.size:
        draw = loc[todo] + scale * rng.standard_normal(todo.size)
        ok = (draw >= lo) & (draw <= hi)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def _gauss_legendre(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (nodes + 1.0), half * weights


# ---------------------------------------------------------------------------
# Scenario specifications (scalar blocks: p0 = p1 = p2 = 1)
# ---------------------------------------------------------------------------


class ScenarioSpec:
    """One data-generating process: block sampler plus outcome model.

    Subclasses must be conditionally independent across test blocks given x0
    unless they override the stage-2 samplers and set
    ``conditionally_independent = False``.
    """

    name: str
    default_costs: CostSchedule
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    conditionally_independent: bool = True

    def outcome_prob(self, x0, x1, x2) -> np.ndarray:
        raise NotImplementedError

    def sample_x0(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def sample_tests_given_x0(self, rng, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def sample_missing_given(self, j_missing: int, rng, x0: np.ndarray,
                             x_observed: np.ndarray) -> np.ndarray:
        """Draw the unobserved test block given (x0, observed test block)."""
        x1, x2 = self.sample_tests_given_x0(rng, x0)
        return x1 if j_missing == 1 else x2

    def block_quadrature(self, j: int, x0: np.ndarray, n_nodes: int):
        """Nodes and row-normalized conditional weights of block j given x0."""
        raise NotImplementedError


class Scenario1Spec(ScenarioSpec):
    """Truncated-normal biomarkers correlated through the baseline, with a
    strong nonlinear interaction in the outcome model."""

    name = "s1"
    default_costs = CostSchedule(0.01, 0.02)
    bounds = ((TRUNC_LO, TRUNC_HI),) * 3
    test_sd = 0.9

    def outcome_prob(self, x0, x1, x2):
        eta = 0.15 * x0 + 1.2 * x1 + 1.2 * x2 + 8.0 * np.sin(2 * x1) * np.sin(2 * x2) / 2.2
        return _sigmoid(eta)

    def sample_x0(self, rng, n):
        return truncated_normal(rng, 0.0, 1.0, TRUNC_LO, TRUNC_HI, n)

    def sample_tests_given_x0(self, rng, x0):
        x1 = truncated_normal(rng, x0, self.test_sd, TRUNC_LO, TRUNC_HI, x0.size)
        x2 = truncated_normal(rng, x0, self.test_sd, TRUNC_LO, TRUNC_HI, x0.size)
        return x1, x2

    def block_quadrature(self, j, x0, n_nodes):
        nodes, gl_w = _gauss_legendre(TRUNC_LO, TRUNC_HI, n_nodes)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        dens = np.exp(-0.5 * ((nodes[None, :] - x0[:, None]) / self.test_sd) ** 2)
        W = dens * gl_w[None, :]
        return nodes, W / W.sum(axis=1, keepdims=True)


class Scenario2LikeSpec(ScenarioSpec):
    """Independent uniform blocks with nonlinear main effects and interactions.

    The outcome score is a documented stand-in with the same structural
    flavor (nonlinear main effects plus interactions), not a reproduction of
    any published coefficient set.
    """

    name = "s2like"
    default_costs = CostSchedule(0.004, 0.002)
    bounds = ((0.0, 1.0),) * 3

    def outcome_prob(self, x0, x1, x2):
        eta = (
            2.5 * (x0 - 0.5)
            + 3.0 * (x1 - 0.5)
            + 3.0 * (x2 - 0.5)
            + 4.0 * np.sin(2 * np.pi * x1) * (x2 - 0.5)
            + 2.0 * (x0 - 0.5) * (x1 - 0.5)
        )
        return _sigmoid(eta / 3.0)

    def sample_x0(self, rng, n):
        return rng.random(n)

    def sample_tests_given_x0(self, rng, x0):
        return rng.random(x0.size), rng.random(x0.size)

    def block_quadrature(self, j, x0, n_nodes):
        nodes, gl_w = _gauss_legendre(0.0, 1.0, n_nodes)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        W = np.broadcast_to(gl_w[None, :], (x0.size, n_nodes)).copy()
        return nodes, W / W.sum(axis=1, keepdims=True)


class PureNoiseSpec(ScenarioSpec):
    """Tests carry no information: the outcome depends on the baseline only."""

    name = "pure_noise"
    default_costs = CostSchedule(0.01, 0.02)
    bounds = ((TRUNC_LO, TRUNC_HI),) * 3

    def outcome_prob(self, x0, x1, x2):
        return _sigmoid(1.5 * np.asarray(x0, dtype=float) + 0.0 * np.asarray(x1) + 0.0 * np.asarray(x2))

    def sample_x0(self, rng, n):
        return truncated_normal(rng, 0.0, 1.0, TRUNC_LO, TRUNC_HI, n)

    def sample_tests_given_x0(self, rng, x0):
        x1 = truncated_normal(rng, 0.0, 1.0, TRUNC_LO, TRUNC_HI, x0.size)
        x2 = truncated_normal(rng, 0.0, 1.0, TRUNC_LO, TRUNC_HI, x0.size)
        return x1, x2

    def block_quadrature(self, j, x0, n_nodes):
        nodes, gl_w = _gauss_legendre(TRUNC_LO, TRUNC_HI, n_nodes)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        dens = np.exp(-0.5 * nodes[None, :] ** 2) * np.ones((x0.size, 1))
        W = dens * gl_w[None, :]
        return nodes, W / W.sum(axis=1, keepdims=True)


class DuplicateTestSpec(Scenario1Spec):
    """Degenerate variant of the first scenario where the second test
    duplicates the first exactly (X2 = X1)."""

    name = "duplicate"
    conditionally_independent = False

    def sample_tests_given_x0(self, rng, x0):
        x1 = truncated_normal(rng, x0, self.test_sd, TRUNC_LO, TRUNC_HI, x0.size)
        return x1, x1.copy()

    def sample_missing_given(self, j_missing, rng, x0, x_observed):
        return x_observed.copy()

    def block_quadrature(self, j, x0, n_nodes):
        raise NotImplementedError("duplicate-test blocks are not conditionally independent")


SCENARIOS: dict[str, ScenarioSpec] = {
    s.name: s for s in (Scenario1Spec(), Scenario2LikeSpec(), PureNoiseSpec(), DuplicateTestSpec())
}


def generate_full_dataset(spec: ScenarioSpec, n: int, seed: int) -> Dataset:
    """Fully observed draw from the scenario's joint law (all blocks revealed)."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    x0 = spec.sample_x0(rng, n)
    x1, x2 = spec.sample_tests_given_x0(rng, x0)
    y = (rng.random(n) < spec.outcome_prob(x0, x1, x2)).astype(float)
    full = np.full(n, 1, dtype=int), np.full(n, 2, dtype=int)
    return dataset_from_arrays(x0[:, None], x1[:, None], x2[:, None], y, *full)


def generate_scenario1(n: int, seed: int) -> Dataset:
    return generate_full_dataset(SCENARIOS["s1"], n, seed)


def generate_scenario2_like(n: int, seed: int) -> Dataset:
    return generate_full_dataset(SCENARIOS["s2like"], n, seed)


# ---------------------------------------------------------------------------
# Behavior (missingness) policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BehaviorConfig:
    """Two-stage acquisition behavior: a softmax over {stop, test 1, test 2}
    on the baseline mean, then a logistic continuation decision on the mean of
    the most recently observed block.

    Probabilities are forced into [floor, 1 - floor]: the softmax is mixed
    with the uniform distribution, the continuation probability is clipped.
    """

    stage1: tuple[tuple[float, float], ...] = ((0.0, 0.0), (0.2, 0.8), (0.2, -0.8))
    stage2: tuple[float, float] = (-0.3, 1.2)
    floor: float = 0.05  # set to 0 to allow degenerate (positivity-violating) behavior

    def first_stage_probs(self, x0: np.ndarray) -> np.ndarray:
        x0bar = np.atleast_2d(x0).mean(axis=1)
        scores = np.stack([a + b * x0bar for a, b in self.stage1], axis=1)
        scores -= scores.max(axis=1, keepdims=True)
        expd = np.exp(scores)
        probs = expd / expd.sum(axis=1, keepdims=True)
        return (1.0 - 3.0 * self.floor) * probs + self.floor

    def continue_prob(self, xj: np.ndarray) -> np.ndarray:
        xbar = np.atleast_2d(xj).mean(axis=1)
        a, b = self.stage2
        return np.clip(_sigmoid(a + b * xbar), self.floor, 1.0 - self.floor)


@dataclass(frozen=True)
class ScenarioConfig:
    """Bundle describing one simulated cohort."""

    scenario: str = "s1"
    n: int = 1000
    seed: int = 0
    costs: Optional[CostSchedule] = None
    behavior: BehaviorConfig = BehaviorConfig()

    @property
    def spec(self) -> ScenarioSpec:
        return SCENARIOS[self.scenario]

    @property
    def resolved_costs(self) -> CostSchedule:
        return self.costs if self.costs is not None else self.spec.default_costs


def apply_behavior_policy(
    full_data: Dataset,
    behavior: BehaviorConfig,
    seed: int,
    misspec: Optional[str] = None,
) -> tuple[Dataset, TruePropensities]:
    """Induce missingness by sampling acquisition paths from the behavior
    policy, masking the never-visited blocks.

    Exactly two uniforms per record are consumed, in record order, so the
    sampled actions cannot depend on blocks the policy never saw. The true
    sampling probabilities are returned alongside for oracle-weight checks.
    ``misspec="nonlinear"`` perturbs both stages with sine terms, for
    experiments where even a flexible fitted propensity family is wrong.
    """
    if not full_data.fully_observed:
        raise ValueError("behavior policy requires a fully observed dataset")
    n = len(full_data)
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(n), rng.random(n)

    x0bar = full_data.x0.mean(axis=1)
    probs1 = behavior.first_stage_probs(full_data.x0)
    if misspec == "nonlinear":
        bump = np.column_stack([np.zeros(n), np.sin(2.0 * x0bar), -np.sin(2.0 * x0bar)])
        scores = np.log(probs1) + 0.8 * bump
        expd = np.exp(scores - scores.max(axis=1, keepdims=True))
        soft = expd / expd.sum(axis=1, keepdims=True)
        probs1 = (1.0 - 3.0 * behavior.floor) * soft + behavior.floor
    cum = np.cumsum(probs1, axis=1)
    s1 = (u1[:, None] >= cum).sum(axis=1)  # 0, 1, or 2

    cont = np.full(n, np.nan)
    s2 = np.zeros(n, dtype=int)
    for j in (1, 2):
        mask = s1 == j
        if not np.any(mask):
            continue
        xj = full_data.test_block(j)[mask]
        p = behavior.continue_prob(xj)
        if misspec == "nonlinear":
            p = np.clip(p + 0.3 * np.sin(2.0 * xj.mean(axis=1)), behavior.floor, 1 - behavior.floor)
        cont[mask] = p
        s2[mask] = np.where(u2[mask] < p, 3 - j, 0)

    lo, hi = behavior.floor, 1.0 - behavior.floor
    assert probs1.min() >= lo - 1e-12 and probs1.max() <= hi + 1e-12
    observed = dataset_from_arrays(
        full_data.x0, full_data.x1, full_data.x2, full_data.y, s1, s2,
        outcome_kind=full_data.outcome_kind,
    )
    return observed, TruePropensities(probs1, cont)


def simulate_observed(config: ScenarioConfig, misspec: Optional[str] = None):
    """Convenience wrapper: full draw, then behavior-policy masking.

    Returns (observed dataset, fully observed dataset, true propensities).
    """
    full = generate_full_dataset(config.spec, config.n, config.seed)
    observed, props = apply_behavior_policy(full, config.behavior, config.seed + 1, misspec)
    return observed, full, props


class BehaviorPropensities:
    """Adapter exposing the behavior policy's exact sampling probabilities
    through the fitted-propensity interface, for oracle-weight experiments."""

    def __init__(self, behavior: BehaviorConfig, clip: float = 0.01, p0: int = 1):
        self.behavior = behavior
        self.clip = clip
        self.p0 = p0
        self.train_idx_first: dict = {}
        self.train_idx_second: dict = {}

    def first_stage_raw(self, k: int, X0: np.ndarray) -> np.ndarray:
        return self.behavior.first_stage_probs(np.atleast_2d(X0))

    def first_stage(self, k: int, X0: np.ndarray) -> np.ndarray:
        return np.clip(self.first_stage_raw(k, X0), self.clip, 1 - self.clip)

    def continuation_raw(self, k: int, j: int, Xj: np.ndarray) -> np.ndarray:
        Xj = np.atleast_2d(Xj)
        return self.behavior.continue_prob(Xj[:, self.p0 :])  # drop baseline columns

    def continuation(self, k: int, j: int, Xj: np.ndarray) -> np.ndarray:
        return np.clip(self.continuation_raw(k, j, Xj), self.clip, 1 - self.clip)


# ---------------------------------------------------------------------------
# Quadrature-composed true conditional means and contrasts
# ---------------------------------------------------------------------------


class ContrastOracle:
    """True conditional means, contrasts, continuation values, and optimal
    actions for a scenario whose test blocks are conditionally independent
    given the baseline. Integrals are Gauss-Legendre; everything is
    deterministic.

    Works on scalar blocks (the built-in scenarios); array arguments are
    one-dimensional arrays of block values.
    """

    def __init__(self, spec: ScenarioSpec, costs: Optional[CostSchedule] = None,
                 n_nodes: int = 96, chunk: int = 2048):
        if not spec.conditionally_independent:
            raise ValueError(f"scenario {spec.name!r} lacks conditional independence")
        self.spec = spec
        self.costs = costs if costs is not None else spec.default_costs
        self.n_nodes = n_nodes
        self.chunk = chunk

    # conditional means ------------------------------------------------------

    def m12(self, x0, x1, x2):
        return self.spec.outcome_prob(np.asarray(x0, float), np.asarray(x1, float),
                                      np.asarray(x2, float))

    def m1(self, x0, x1):
        return self._m_cond(1, x0, x1)

    def _m_cond(self, j_obs: int, x0, xj):
        """E[Y | x0, block j observed at xj], integrating out the other block."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        xj = np.atleast_1d(np.asarray(xj, dtype=float))
        jc = 3 - j_obs
        nodes, W = self.spec.block_quadrature(jc, x0, self.n_nodes)
        out = np.empty(x0.size)
        for start in range(0, x0.size, self.chunk):
            sl = slice(start, start + min(self.chunk, x0.size - start))
            a = x0[sl][:, None]
            b = xj[sl][:, None]
            u = nodes[None, :]
            q = self.m12(a, b, u) if j_obs == 1 else self.m12(a, u, b)
            out[sl] = (q * W[sl]).sum(axis=1)
        return out

    def m2(self, x0, x2):
        return self._m_cond(2, x0, x2)

    def m0(self, x0):
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        n1, W1 = self.spec.block_quadrature(1, x0, self.n_nodes)
        n2, W2 = self.spec.block_quadrature(2, x0, self.n_nodes)
        out = np.empty(x0.size)
        small = max(1, self.chunk // self.n_nodes)
        for start in range(0, x0.size, small):
            sl = slice(start, start + min(small, x0.size - start))
            a = x0[sl][:, None, None]
            q = self.m12(a, n1[None, :, None], n2[None, None, :])
            out[sl] = np.einsum("mjk,mj,mk->m", q, W1[sl], W2[sl])
        return out

    def mean_fn(self, state: InformationState) -> Callable[[np.ndarray], np.ndarray]:
        """True-mean predictor over the state's concatenated feature matrix,
        suitable for injection as a core prediction model."""
        if state is InformationState.S0:
            return lambda F: self.m0(np.atleast_2d(F)[:, 0])
        if state is InformationState.S1only:
            return lambda F: self.m1(np.atleast_2d(F)[:, 0], np.atleast_2d(F)[:, 1])
        if state is InformationState.S2only:
            return lambda F: self.m2(np.atleast_2d(F)[:, 0], np.atleast_2d(F)[:, 1])
        return lambda F: self.m12(np.atleast_2d(F)[:, 0], np.atleast_2d(F)[:, 1],
                                  np.atleast_2d(F)[:, 2])

    # expected cost-augmented losses and contrasts ----------------------------

    def expected_full_loss_given(self, j_obs: int, x0, xj):
        """E[E_12 | x0, block j] with predictions from the true m12."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        xj = np.atleast_1d(np.asarray(xj, dtype=float))
        jc = 3 - j_obs
        nodes, W = self.spec.block_quadrature(jc, x0, self.n_nodes)
        out = np.empty(x0.size)
        for start in range(0, x0.size, self.chunk):
            sl = slice(start, start + min(self.chunk, x0.size - start))
            a = x0[sl][:, None]
            b = xj[sl][:, None]
            u = nodes[None, :]
            q = self.m12(a, b, u) if j_obs == 1 else self.m12(a, u, b)
            out[sl] = (_entropy(q) * W[sl]).sum(axis=1)
        return out + self.costs.c1 + self.costs.c2

    def expected_stop_loss_given(self, j_obs: int, x0, xj):
        """E[E_j | x0, block j]: entropy of the stage-j mean plus its cost."""
        m = self._m_cond(j_obs, x0, xj)
        return _entropy(m) + self.costs.cost_of_test(j_obs)

    def delta_stage2(self, j: int, x0, xj):
        """True stage-2 contrast: expected change in cost-augmented loss from
        acquiring the remaining test."""
        return self.expected_full_loss_given(j, x0, xj) - self.expected_stop_loss_given(j, x0, xj)

    def qstar(self, j: int, x0, xj):
        stop = self.expected_stop_loss_given(j, x0, xj)
        both = self.expected_full_loss_given(j, x0, xj)
        return np.minimum(stop, both)

    def expected_baseline_loss(self, x0):
        return _entropy(self.m0(x0))

    def delta_stage1(self, j: int, x0):
        """True first-stage contrast E[Q*_j - E_0 | x0]."""
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        nodes, W = self.spec.block_quadrature(j, x0, self.n_nodes)
        out = np.empty(x0.size)
        for start in range(0, x0.size, self.chunk):
            sl = slice(start, start + min(self.chunk, x0.size - start))
            block = nodes[None, :].repeat(W[sl].shape[0], axis=0)
            a = np.repeat(x0[sl], self.n_nodes)
            q = self.qstar(j, a, block.ravel()).reshape(block.shape)
            out[sl] = (q * W[sl]).sum(axis=1)
        return out - self.expected_baseline_loss(x0)

    # optimal actions ---------------------------------------------------------

    def optimal_stage2(self, j: int, x0, xj):
        return np.where(self.delta_stage2(j, x0, xj) < 0, 3 - j, 0)

    def optimal_stage1(self, x0):
        d1 = self.delta_stage1(1, x0)
        d2 = self.delta_stage1(2, x0)
        take1 = (d1 < 0) & (d1 < d2)
        take2 = (d2 < 0) & (d2 < d1)
        tie = (d1 < 0) & (d1 == d2)
        cheaper = 1 if self.costs.c1 <= self.costs.c2 else 2
        out = np.zeros(np.atleast_1d(d1).shape, dtype=int)
        out[np.atleast_1d(take1)] = 1
        out[np.atleast_1d(take2)] = 2
        out[np.atleast_1d(tie)] = cheaper
        return out


class OraclePolicy:
    """The true optimal policy: decisions from the oracle contrasts,
    predictions from the true conditional means."""

    def __init__(self, oracle: ContrastOracle):
        self.oracle = oracle
        self.costs = oracle.costs

    def decide0_batch(self, X0: np.ndarray) -> np.ndarray:
        return self.oracle.optimal_stage1(np.atleast_2d(X0)[:, 0])

    def decide_next_batch(self, j: int, Xj: np.ndarray) -> np.ndarray:
        Xj = np.atleast_2d(Xj)
        return self.oracle.optimal_stage2(j, Xj[:, 0], Xj[:, 1])

    def predict_batch(self, state: InformationState, F: np.ndarray) -> np.ndarray:
        return self.oracle.mean_fn(state)(np.atleast_2d(F))

    def decide0(self, x0: np.ndarray) -> int:
        return int(self.decide0_batch(np.atleast_2d(x0))[0])

    def decide_next(self, j: int, xj_features: np.ndarray) -> int:
        return int(self.decide_next_batch(j, np.atleast_2d(xj_features))[0])

    def predict(self, state: InformationState, features: np.ndarray) -> float:
        return float(self.predict_batch(state, np.atleast_2d(features))[0])


# ---------------------------------------------------------------------------
# Monte Carlo oracle tables
# ---------------------------------------------------------------------------


@dataclass
class OracleTable:
    """MC estimates over one grid: values, standard errors, draw counts."""

    axes: tuple[np.ndarray, ...]
    value: np.ndarray
    se: np.ndarray
    draws: int

    def to_json_dict(self) -> dict:
        return {
            "axes": [a.tolist() for a in self.axes],
            "value": self.value.tolist(),
            "se": self.se.tolist(),
            "draws": self.draws,
        }


@dataclass
class OracleTables:
    """Ground-truth tables for a scenario at given costs: stage-2 and stage-1
    contrasts, continuation values, and optimal actions, each with MC SEs."""

    scenario: str
    costs: CostSchedule
    delta2: dict[int, OracleTable]  # j -> contrast of acquiring jc from state j
    qstar: dict[int, OracleTable]
    delta1: dict[int, OracleTable]  # j -> first-stage contrast for test j
    optimal0: np.ndarray
    optimal2: dict[int, np.ndarray]

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "costs": {"c1": self.costs.c1, "c2": self.costs.c2},
            "delta2": {j: t.to_json_dict() for j, t in self.delta2.items()},
            "qstar": {j: t.to_json_dict() for j, t in self.qstar.items()},
            "delta1": {j: t.to_json_dict() for j, t in self.delta1.items()},
            "optimal0": self.optimal0.tolist(),
            "optimal2": {j: a.tolist() for j, a in self.optimal2.items()},
        }


def _grid(bounds: tuple[float, float], count: int, margin: float = 0.05) -> np.ndarray:
    lo, hi = bounds
    pad = margin * (hi - lo)
    return np.linspace(lo + pad, hi - pad, count)


def oracle_tables(
    spec: ScenarioSpec,
    costs: Optional[CostSchedule] = None,
    grid_points: int = 41,
    mc_per_cell: int = 20_000,
    seed: int = 0,
    oracle: Optional[ContrastOracle] = None,
) -> OracleTables:
    """Brute-force MC oracle: per grid cell, draw the unobserved blocks and
    the outcome from the true DGP, score losses with the true conditional
    means, and average the stage labels. Cells use independent RNG streams
    keyed by (seed, table, cell), so results are schedule-independent.
    """
    costs = costs if costs is not None else spec.default_costs
    means = oracle if oracle is not None else (
        ContrastOracle(spec, costs) if spec.conditionally_independent else None
    )

    def true_m(j_obs, a, b):
        if means is not None:
            return means._m_cond(j_obs, a, b)
        # degenerate duplicate-test case: the other block equals the observed one
        return spec.outcome_prob(a, b, b)

    def true_m0(a):
        if means is not None:
            return means.m0(a)
        rng = np.random.default_rng([seed, 999])
        x1, x2 = spec.sample_tests_given_x0(rng, np.repeat(a, 4000))
        q = spec.outcome_prob(np.repeat(a, 4000), x1, x2)
        return q.reshape(a.size, 4000).mean(axis=1)

    g0 = _grid(spec.bounds[0], grid_points)
    delta2, qstar, optimal2 = {}, {}, {}
    for j in (1, 2):
        gj = _grid(spec.bounds[j], grid_points)
        val = np.empty((g0.size, gj.size))
        se = np.empty_like(val)
        qval = np.empty_like(val)
        qse = np.empty_like(val)
        for a_idx, a in enumerate(g0):
            for b_idx, b in enumerate(gj):
                rng = np.random.default_rng([seed, 10 + j, a_idx, b_idx])
                aa = np.full(mc_per_cell, a)
                bb = np.full(mc_per_cell, b)
                other = spec.sample_missing_given(3 - j, rng, aa, bb)
                x1, x2 = (bb, other) if j == 1 else (other, bb)
                q = spec.outcome_prob(aa, x1, x2)
                y = (rng.random(mc_per_cell) < q).astype(float)
                m_stop = float(true_m(j, np.array([a]), np.array([b]))[0])
                e_full = _cross_entropy(y, spec.outcome_prob(aa, x1, x2)) + costs.c1 + costs.c2
                e_stop = _cross_entropy(y, m_stop) + costs.cost_of_test(j)
                t = e_full - e_stop
                val[a_idx, b_idx] = t.mean()
                se[a_idx, b_idx] = t.std(ddof=1) / math.sqrt(mc_per_cell)
                cont = val[a_idx, b_idx] < 0
                qdraw = e_full if cont else e_stop
                qval[a_idx, b_idx] = qdraw.mean()
                qse[a_idx, b_idx] = qdraw.std(ddof=1) / math.sqrt(mc_per_cell)
        delta2[j] = OracleTable((g0, gj), val, se, mc_per_cell)
        qstar[j] = OracleTable((g0, gj), qval, qse, mc_per_cell)
        optimal2[j] = np.where(val < 0, 3 - j, 0)

    delta1 = {}
    for j in (1, 2):
        val = np.empty(g0.size)
        se = np.empty_like(val)
        for a_idx, a in enumerate(g0):
            rng = np.random.default_rng([seed, 20 + j, a_idx])
            aa = np.full(mc_per_cell, a)
            x1, x2 = spec.sample_tests_given_x0(rng, aa)
            q = spec.outcome_prob(aa, x1, x2)
            y = (rng.random(mc_per_cell) < q).astype(float)
            xj = x1 if j == 1 else x2
            e_stop_j = _cross_entropy(y, true_m(j, aa, xj)) + costs.cost_of_test(j)
            e_full = _cross_entropy(y, spec.outcome_prob(aa, x1, x2)) + costs.c1 + costs.c2
            if means is not None:
                cont = means.delta_stage2(j, aa, xj) < 0
            else:
                cont = np.zeros(mc_per_cell, dtype=bool)
            q_draw = np.where(cont, e_full, e_stop_j)
            m0_val = float(true_m0(np.array([a]))[0])
            t = q_draw - _cross_entropy(y, m0_val)
            val[a_idx] = t.mean()
            se[a_idx] = t.std(ddof=1) / math.sqrt(mc_per_cell)
        delta1[j] = OracleTable((g0,), val, se, mc_per_cell)

    d1v, d2v = delta1[1].value, delta1[2].value
    cheaper = 1 if costs.c1 <= costs.c2 else 2
    optimal0 = np.zeros(g0.size, dtype=int)
    optimal0[(d1v < 0) & (d1v < d2v)] = 1
    optimal0[(d2v < 0) & (d2v < d1v)] = 2
    optimal0[(d1v < 0) & (d1v == d2v)] = cheaper
    return OracleTables(spec.name, costs, delta2, qstar, delta1, optimal0, optimal2)


# ---------------------------------------------------------------------------
# Nuisance misspecification settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MisspecPlan:
    """Which nuisance learners are forced into a wrong family.

    ``constant`` feature maps reduce a learner to its intercept: propensities
    become marginal action frequencies, contrast models become label means.
    """

    setting: str
    propensity_feature_map: Optional[str] = None
    aux_contrast_feature_map: Optional[str] = None


def nuisance_misspec(setting: str) -> MisspecPlan:
    """Settings: A = both nuisances flexible, B = propensity forced constant,
    C = auxiliary contrast forced constant."""
    setting = setting.upper()
    if setting == "A":
        return MisspecPlan("A")
    if setting == "B":
        return MisspecPlan("B", propensity_feature_map="constant")
    if setting == "C":
        return MisspecPlan("C", aux_contrast_feature_map="constant")
    raise ValueError(f"unknown misspecification setting {setting!r}")
