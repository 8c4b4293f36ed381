import math

import numpy as np
import pytest

from costq.data import CostSchedule, InformationState
from costq.simulate import (
    SCENARIOS,
    BehaviorConfig,
    BehaviorPropensities,
    ContrastOracle,
    MisspecPlan,
    OraclePolicy,
    ScenarioConfig,
    apply_behavior_policy,
    generate_full_dataset,
    generate_scenario1,
    generate_scenario2_like,
    nuisance_misspec,
    oracle_tables,
    simulate_observed,
    truncated_normal,
)

S1 = SCENARIOS["s1"]
S2L = SCENARIOS["s2like"]


class TestScenario1Generator:
    def test_support_is_truncated(self):
        data = generate_scenario1(4000, seed=0)
        for block in (data.x0, data.x1, data.x2):
            assert block.min() >= -2.0 and block.max() <= 2.0

    def test_outcome_prob_at_origin(self):
        assert S1.outcome_prob(0.0, 0.0, 0.0) == pytest.approx(0.5)

    def test_default_costs(self):
        assert S1.default_costs == CostSchedule(0.01, 0.02)

    def test_determinism(self):
        a = generate_scenario1(500, seed=9)
        b = generate_scenario1(500, seed=9)
        np.testing.assert_array_equal(a.x1, b.x1)
        np.testing.assert_array_equal(a.y, b.y)

    def test_correlation_matches_truncnorm_oracle(self):
        # oracle: an independent construction of the same law via scipy's
        # quantile-based truncated normal sampler
        from scipy import stats

        rng = np.random.default_rng(1234)
        m = 50_000
        x0 = stats.truncnorm.ppf(rng.random(m), -2, 2, loc=0, scale=1)
        lo, hi = (-2 - x0) / 0.9, (2 - x0) / 0.9
        x1 = stats.truncnorm.ppf(rng.random(m), lo, hi, loc=x0, scale=0.9)
        r_oracle = np.corrcoef(x0, x1)[0, 1]

        data = generate_scenario1(50_000, seed=5)
        r = np.corrcoef(data.x0[:, 0], data.x1[:, 0])[0, 1]
        se = 2.0 * (1 - r_oracle**2) / math.sqrt(m)  # both sides carry MC error
        assert abs(r - r_oracle) < 3 * se


class TestScenario2Like:
    def test_support_is_unit_interval(self):
        data = generate_scenario2_like(4000, seed=2)
        for block in (data.x0, data.x1, data.x2):
            assert block.min() >= 0.0 and block.max() <= 1.0

    def test_default_costs(self):
        assert S2L.default_costs == CostSchedule(0.004, 0.002)

    def test_mean_outcome_matches_mc_oracle(self):
        # oracle: direct MC average of the outcome score over fresh uniforms
        rng = np.random.default_rng(77)
        m = 200_000
        q = S2L.outcome_prob(rng.random(m), rng.random(m), rng.random(m))
        mu, se_mu = q.mean(), q.std(ddof=1) / math.sqrt(m)

        data = generate_scenario2_like(50_000, seed=3)
        se = math.sqrt(mu * (1 - mu) / 50_000 + se_mu**2)
        assert abs(data.y.mean() - mu) < 3 * se


class TestTruncatedNormal:
    def test_respects_bounds_and_stream(self):
        rng = np.random.default_rng(0)
        draws = truncated_normal(rng, loc=1.5, scale=1.0, lo=-2, hi=2, size=5000)
        assert draws.min() >= -2 and draws.max() <= 2
        rng2 = np.random.default_rng(0)
        np.testing.assert_array_equal(
            draws, truncated_normal(rng2, 1.5, 1.0, -2, 2, 5000)
        )


class TestBehaviorPolicy:
    def test_symmetric_softmax_gives_uniform_actions(self):
        beh = BehaviorConfig(stage1=((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)))
        full = generate_scenario1(10_000, seed=4)
        obs, _ = apply_behavior_policy(full, beh, seed=8)
        freqs = np.bincount(obs.s1, minlength=3) / len(obs)
        se = math.sqrt((1 / 3) * (2 / 3) / len(obs))
        np.testing.assert_allclose(freqs, 1 / 3, atol=3 * se)

    def test_never_continue_blocks_full_state(self):
        # floor lifted so the degenerate coefficient can actually reach zero
        beh = BehaviorConfig(stage2=(-50.0, 0.0), floor=0.0)
        full = generate_scenario1(4000, seed=6)
        obs, props = apply_behavior_policy(full, beh, seed=9)
        assert not np.any(obs.state_names == "S12")
        cont = props.continue_prob[~np.isnan(props.continue_prob)]
        assert np.all(cont < 1e-20)

    def test_floor_clips_continuation(self):
        beh = BehaviorConfig(stage2=(-50.0, 0.0))
        full = generate_scenario1(1000, seed=6)
        _, props = apply_behavior_policy(full, beh, seed=9)
        cont = props.continue_prob[~np.isnan(props.continue_prob)]
        assert np.all(cont == 0.05)

    def test_probabilities_respect_floor(self):
        beh = BehaviorConfig()
        full = generate_scenario1(5000, seed=7)
        _, props = apply_behavior_policy(full, beh, seed=10)
        assert props.first_stage.min() >= 0.05 and props.first_stage.max() <= 0.95
        cont = props.continue_prob[~np.isnan(props.continue_prob)]
        assert cont.min() >= 0.05 and cont.max() <= 0.95

    def test_stored_probabilities_calibrated_per_decile(self):
        # binned calibration oracle: within x0-deciles, empirical action
        # frequencies match the mean stored probability up to 3 binomial SEs
        full = generate_scenario1(40_000, seed=11)
        obs, props = apply_behavior_policy(full, BehaviorConfig(), seed=12)
        x0 = obs.x0[:, 0]
        edges = np.quantile(x0, np.linspace(0, 1, 11))
        edges[-1] += 1e-9
        for b in range(10):
            sel = (x0 >= edges[b]) & (x0 < edges[b + 1])
            for action in (0, 1, 2):
                p_bar = props.first_stage[sel, action].mean()
                emp = np.mean(obs.s1[sel] == action)
                se = math.sqrt(p_bar * (1 - p_bar) / sel.sum())
                assert abs(emp - p_bar) < 3.5 * se

    def test_mean_inverse_weights_near_one(self):
        obs, _, props = simulate_observed(ScenarioConfig(scenario="s1", n=20_000, seed=13))
        for j in (1, 2):
            w = (obs.s1 == j) / props.first_stage[:, j]
            se = w.std(ddof=1) / math.sqrt(len(w))
            assert abs(w.mean() - 1.0) < 3 * se

    def test_sequential_mar_taint_first_stage(self):
        # permuting the never-used test blocks cannot change sampled actions
        full = generate_scenario1(2000, seed=14)
        obs, _ = apply_behavior_policy(full, BehaviorConfig(), seed=15)
        rng = np.random.default_rng(99)
        perm = rng.permutation(len(full))
        shuffled = type(full)(
            tuple(
                type(r)(r.x0, full.records[p].x1, full.records[p].x2, r.y, r.path)
                for r, p in zip(full.records, perm)
            ),
            full.dims,
            full.outcome_kind,
        )
        obs2, _ = apply_behavior_policy(shuffled, BehaviorConfig(), seed=15)
        np.testing.assert_array_equal(obs.s1, obs2.s1)

    def test_sequential_mar_taint_second_stage(self):
        # permuting the UNOBSERVED block among records that share the same
        # first test leaves their continuation decisions unchanged
        full = generate_scenario1(2000, seed=16)
        obs, _ = apply_behavior_policy(full, BehaviorConfig(), seed=17)
        took1 = np.flatnonzero(obs.s1 == 1)
        rng = np.random.default_rng(100)
        perm = took1[rng.permutation(took1.size)]
        x2 = full.x2.copy()
        x2[took1] = x2[perm]
        records = tuple(
            type(r)(r.x0, r.x1, x2[i], r.y, r.path)
            for i, r in enumerate(full.records)
        )
        obs2, _ = apply_behavior_policy(
            type(full)(records, full.dims, full.outcome_kind), BehaviorConfig(), seed=17
        )
        np.testing.assert_array_equal(obs.s2[took1], obs2.s2[took1])

    def test_requires_fully_observed_input(self):
        obs, _, _ = simulate_observed(ScenarioConfig(n=50, seed=1))
        with pytest.raises(ValueError):
            apply_behavior_policy(obs, BehaviorConfig(), seed=1)


class TestBehaviorPropensities:
    def test_adapter_matches_stored_probabilities(self):
        beh = BehaviorConfig()
        obs, full, props = simulate_observed(ScenarioConfig(n=500, seed=21))
        adapter = BehaviorPropensities(beh, clip=0.01)
        np.testing.assert_allclose(
            adapter.first_stage_raw(0, obs.x0), props.first_stage, atol=1e-12
        )
        took1 = obs.s1 == 1
        got = adapter.continuation_raw(0, 1, obs.history(1)[took1])
        np.testing.assert_allclose(got, props.continue_prob[took1], atol=1e-12)


class TestContrastOracle:
    def test_known_value_at_origin(self):
        oracle = ContrastOracle(S1)
        assert oracle.m12(0.0, 0.0, 0.0) == pytest.approx(0.5)

    def test_pure_noise_stage2_contrast_is_cost(self):
        oracle = ContrastOracle(SCENARIOS["pure_noise"], CostSchedule(0.01, 0.02))
        x0 = np.linspace(-1.5, 1.5, 9)
        x1 = np.linspace(-1.5, 1.5, 9)
        np.testing.assert_allclose(oracle.delta_stage2(1, x0, x1), 0.02, atol=1e-8)

    def test_qstar_never_exceeds_stop_value(self):
        oracle = ContrastOracle(S1)
        rng = np.random.default_rng(3)
        x0 = rng.uniform(-1.8, 1.8, 50)
        xj = rng.uniform(-1.8, 1.8, 50)
        stop = oracle.expected_stop_loss_given(1, x0, xj)
        assert np.all(oracle.qstar(1, x0, xj) <= stop + 1e-12)

    def test_duplicate_spec_rejected(self):
        with pytest.raises(ValueError):
            ContrastOracle(SCENARIOS["duplicate"])


class TestOracleTables:
    def test_pure_noise_delta_is_cost(self):
        spec = SCENARIOS["pure_noise"]
        tab = oracle_tables(spec, CostSchedule(0.01, 0.02), grid_points=5,
                            mc_per_cell=4000, seed=1)
        t = tab.delta2[1]
        assert np.all(np.abs(t.value - 0.02) <= 3 * t.se + 1e-9)

    def test_duplicate_with_zero_costs_is_zero(self):
        spec = SCENARIOS["duplicate"]
        tab = oracle_tables(spec, CostSchedule(0.0, 0.0), grid_points=4,
                            mc_per_cell=2000, seed=2)
        np.testing.assert_allclose(tab.delta2[1].value, 0.0, atol=1e-12)
        np.testing.assert_allclose(tab.delta2[2].value, 0.0, atol=1e-12)

    def test_mc_matches_quadrature_oracle(self):
        # two genuinely independent routes to the same quantity
        oracle = ContrastOracle(S1)
        tab = oracle_tables(S1, grid_points=4, mc_per_cell=8000, seed=3, oracle=oracle)
        g0, g1 = tab.delta2[1].axes
        G0, G1 = np.meshgrid(g0, g1, indexing="ij")
        quad = oracle.delta_stage2(1, G0.ravel(), G1.ravel()).reshape(G0.shape)
        assert np.all(np.abs(tab.delta2[1].value - quad) <= 4 * tab.delta2[1].se)

    def test_cost_shift_is_exact_on_matched_streams(self):
        spec = SCENARIOS["pure_noise"]
        base = oracle_tables(spec, CostSchedule(0.01, 0.02), grid_points=3,
                             mc_per_cell=500, seed=4)
        bumped = oracle_tables(spec, CostSchedule(0.01, 0.07), grid_points=3,
                               mc_per_cell=500, seed=4)
        np.testing.assert_allclose(
            bumped.delta2[1].value - base.delta2[1].value, 0.05, atol=1e-12
        )
        np.testing.assert_allclose(
            bumped.delta2[2].value, base.delta2[2].value, atol=1e-12
        )

    def test_qstar_below_stop_loss(self):
        oracle = ContrastOracle(S1)
        tab = oracle_tables(S1, grid_points=4, mc_per_cell=4000, seed=5, oracle=oracle)
        g0, g1 = tab.qstar[1].axes
        G0, G1 = np.meshgrid(g0, g1, indexing="ij")
        stop = (oracle.expected_stop_loss_given(1, G0.ravel(), G1.ravel())
                .reshape(G0.shape))
        assert np.all(tab.qstar[1].value <= stop + 4 * tab.qstar[1].se)

    def test_json_serialization(self):
        tab = oracle_tables(SCENARIOS["pure_noise"], grid_points=3, mc_per_cell=200, seed=6)
        d = tab.to_json_dict()
        assert d["scenario"] == "pure_noise"
        assert len(d["delta1"][1]["value"]) == 3


class TestOraclePolicy:
    def test_beats_fixed_reference_policies(self):
        from costq.evaluate import evaluate

        oracle = ContrastOracle(S1)
        policy = OraclePolicy(oracle)
        data = generate_full_dataset(S1, 3000, seed=30)
        costs = S1.default_costs
        best = evaluate(policy, data, costs).total_loss

        class Fixed:
            def __init__(self, action):
                self.action = action

            def decide0_batch(self, X0):
                return np.full(np.atleast_2d(X0).shape[0], self.action)

            def decide_next_batch(self, j, Xj):
                n = np.atleast_2d(Xj).shape[0]
                return np.full(n, 3 - j if self.action else 0)

            def predict_batch(self, state, F):
                return policy.predict_batch(state, F)

        stop = evaluate(Fixed(0), data, costs).total_loss
        both = evaluate(Fixed(1), data, costs).total_loss
        slack = 2.0 / math.sqrt(len(data))
        assert best <= stop + slack
        assert best <= both + slack


class TestMisspecPlans:
    def test_settings(self):
        assert nuisance_misspec("a") == MisspecPlan("A")
        assert nuisance_misspec("B").propensity_feature_map == "constant"
        assert nuisance_misspec("C").aux_contrast_feature_map == "constant"
        with pytest.raises(ValueError):
            nuisance_misspec("D")


class TestNonlinearMisspecFlag:
    def test_changes_actions_but_respects_floor(self):
        full = generate_scenario1(4000, seed=40)
        obs_a, props_a = apply_behavior_policy(full, BehaviorConfig(), seed=41)
        obs_b, props_b = apply_behavior_policy(full, BehaviorConfig(), seed=41,
                                               misspec="nonlinear")
        assert np.any(obs_a.s1 != obs_b.s1)
        assert props_b.first_stage.min() >= 0.05 - 1e-12
