import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from costq.data import (
    AcquisitionPath,
    CostSchedule,
    Dataset,
    InformationState,
    Record,
    cost_augmented_loss,
    csv_header,
    dataset_from_arrays,
    features_at_state,
    load_dataset_csv,
    load_propensities_csv,
    prediction_loss,
    save_dataset_csv,
    state_of_path,
    TruePropensities,
    VALID_PATHS,
)
from costq.errors import DataError, EmptyData, InvalidPath, MissingBlock

COSTS = CostSchedule(0.01, 0.02)


class TestStateOfPath:
    @pytest.mark.parametrize("pair,expected", [
        ((0, 0), InformationState.S0),
        ((1, 0), InformationState.S1only),
        ((2, 0), InformationState.S2only),
        ((1, 2), InformationState.S12),
        ((2, 1), InformationState.S12),
    ])
    def test_table_of_states(self, pair, expected):
        assert state_of_path(pair) is expected
        assert state_of_path(AcquisitionPath(*pair)) is expected

    @pytest.mark.parametrize("pair", [(1, 1), (2, 2), (0, 1), (0, 2)])
    def test_invalid_paths_rejected(self, pair):
        with pytest.raises(InvalidPath):
            state_of_path(pair)
        with pytest.raises(InvalidPath):
            AcquisitionPath(*pair)

    def test_exactly_two_paths_reach_full_state(self):
        full = [p for p in VALID_PATHS if state_of_path(p) is InformationState.S12]
        assert sorted(full) == [(1, 2), (2, 1)]

    def test_total_and_deterministic(self):
        for pair in VALID_PATHS:
            assert state_of_path(pair) is state_of_path(pair)


class TestCosts:
    def test_cumulative_costs_per_state(self):
        assert InformationState.S0.cost(COSTS) == 0.0
        assert InformationState.S1only.cost(COSTS) == 0.01
        assert InformationState.S2only.cost(COSTS) == 0.02
        assert InformationState.S12.cost(COSTS) == pytest.approx(0.03, abs=1e-15)

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError):
            CostSchedule(-0.1, 0.0)

    @given(
        c1=st.floats(0, 10, allow_nan=False),
        c2=st.floats(0, 10, allow_nan=False),
        bump=st.floats(0, 5, allow_nan=False),
    )
    def test_cost_monotone_in_each_test_cost(self, c1, c2, bump):
        base = CostSchedule(c1, c2)
        more1 = CostSchedule(c1 + bump, c2)
        more2 = CostSchedule(c1, c2 + bump)
        for state in InformationState:
            assert state.cost(more1) >= state.cost(base) - 1e-12
            assert state.cost(more2) >= state.cost(base) - 1e-12


class TestFeaturesAtState:
    def make_record(self, x1=None, x2=None, path=(0, 0)):
        return Record(np.array([0.5]), x1, x2, 1.0, AcquisitionPath(*path))

    def test_concatenation_order(self):
        r = self.make_record(np.array([1.0]), None, path=(1, 0))
        np.testing.assert_array_equal(
            features_at_state(r, InformationState.S1only), [0.5, 1.0]
        )

    def test_full_state_order(self):
        r = Record(np.array([1.0]), np.array([2.0]), np.array([3.0]), 0.0,
                   AcquisitionPath(1, 2))
        np.testing.assert_array_equal(features_at_state(r, InformationState.S12),
                                      [1.0, 2.0, 3.0])

    def test_missing_block_raises(self):
        r = self.make_record()
        with pytest.raises(MissingBlock):
            features_at_state(r, InformationState.S1only)

    def test_dims_by_state(self):
        r = Record(np.array([1.0, 2.0]), np.array([3.0]), np.array([4.0, 5.0, 6.0]),
                   1.0, AcquisitionPath(2, 1))
        dims = {
            InformationState.S0: 2,
            InformationState.S1only: 3,
            InformationState.S2only: 5,
            InformationState.S12: 6,
        }
        for state, d in dims.items():
            assert features_at_state(r, state).shape == (d,)


class TestRecordValidation:
    def test_block_must_match_path(self):
        with pytest.raises(MissingBlock):
            Record(np.array([0.0]), None, None, 1.0, AcquisitionPath(1, 0))
        with pytest.raises(InvalidPath):
            Record(np.array([0.0]), np.array([1.0]), None, 1.0, AcquisitionPath(0, 0))

    def test_arrays_frozen(self):
        r = Record(np.array([0.0]), None, None, 1.0, AcquisitionPath(0, 0))
        with pytest.raises(ValueError):
            r.x0[0] = 5.0


class TestPredictionLoss:
    def test_perfect_binary_prediction_clamped(self):
        assert prediction_loss(1.0, 1.0) == pytest.approx(0.0, abs=1e-10)

    def test_coin_flip_cross_entropy(self):
        assert prediction_loss(0.0, 0.5) == pytest.approx(math.log(2), abs=1e-12)

    def test_continuous_squared_error(self):
        assert prediction_loss(2.0, 1.5, kind="continuous") == pytest.approx(0.25)

    def test_no_infinities_at_extremes(self):
        assert math.isfinite(prediction_loss(1.0, 0.0))
        assert math.isfinite(prediction_loss(0.0, 1.0))


class TestCostAugmentedLoss:
    def test_baseline_state_adds_nothing(self):
        assert cost_augmented_loss(0.0, 0.5, InformationState.S0, COSTS) == \
            pytest.approx(math.log(2), abs=1e-12)

    def test_full_state_adds_both_costs(self):
        got = cost_augmented_loss(0.0, 0.5, InformationState.S12, COSTS)
        assert got == pytest.approx(math.log(2) + 0.03, abs=1e-12)

    def test_blood_test_cost_scale(self):
        clinical = CostSchedule(0.012, 0.024)
        got = cost_augmented_loss(0.0, 0.5, InformationState.S1only, clinical)
        assert got == pytest.approx(math.log(2) + 0.012, abs=1e-12)

    @given(
        y=st.integers(0, 1),
        p=st.floats(0.01, 0.99),
        c1=st.floats(0, 2),
        c2=st.floats(0, 2),
    )
    def test_decomposition_exact(self, y, p, c1, c2):
        costs = CostSchedule(c1, c2)
        for state in InformationState:
            total = cost_augmented_loss(float(y), p, state, costs)
            assert total - prediction_loss(float(y), p) == pytest.approx(
                state.cost(costs), abs=1e-12
            )


def _toy_dataset():
    rows = [
        (0.1, None, None, 1.0, (0, 0)),
        (0.2, 1.5, None, 0.0, (1, 0)),
        (0.3, None, -0.4, 1.0, (2, 0)),
        (0.4, 0.9, 0.1, 0.0, (1, 2)),
        (0.5, -0.2, 0.7, 1.0, (2, 1)),
    ]
    records = [
        Record(np.array([a]), None if b is None else np.array([b]),
               None if c is None else np.array([c]), y, AcquisitionPath(*p))
        for a, b, c, y, p in rows
    ]
    return Dataset(tuple(records), (1, 1, 1))


class TestDataset:
    def test_empty_rejected(self):
        with pytest.raises(EmptyData):
            Dataset((), (1, 1, 1))

    def test_dim_consistency_enforced(self):
        good = Record(np.array([0.0]), None, None, 1.0, AcquisitionPath(0, 0))
        bad = Record(np.array([0.0, 1.0]), None, None, 1.0, AcquisitionPath(0, 0))
        with pytest.raises(DataError):
            Dataset((good, bad), (1, 1, 1))

    def test_binary_outcome_checked(self):
        r = Record(np.array([0.0]), None, None, 0.7, AcquisitionPath(0, 0))
        with pytest.raises(DataError):
            Dataset((r,), (1, 1, 1), "binary")
        Dataset((r,), (1, 1, 1), "continuous")

    def test_columnar_views(self):
        data = _toy_dataset()
        assert data.x0.shape == (5, 1)
        assert np.isnan(data.x1[0, 0]) and data.x1[1, 0] == 1.5
        np.testing.assert_array_equal(data.s1, [0, 1, 2, 1, 2])
        np.testing.assert_array_equal(data.s2, [0, 0, 0, 2, 1])

    def test_fully_observed_flag(self):
        assert not _toy_dataset().fully_observed


class TestCsvRoundTrip:
    def test_header_layout(self):
        assert csv_header((2, 1, 1)) == ["x0_1", "x0_2", "x1_1", "x2_1", "y", "s1", "s2"]

    def test_round_trip_preserves_everything(self, tmp_path):
        data = _toy_dataset()
        path = tmp_path / "d.csv"
        save_dataset_csv(data, str(path))
        back = load_dataset_csv(str(path))
        assert back.dims == data.dims
        assert back.outcome_kind == "binary"
        assert len(back) == len(data)
        for a, b in zip(data.records, back.records):
            assert a.path == b.path and a.y == b.y
            np.testing.assert_array_equal(a.x0, b.x0)

    def test_rewrite_is_byte_identical(self, tmp_path):
        data = _toy_dataset()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_dataset_csv(data, str(p1))
        save_dataset_csv(load_dataset_csv(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_action_value_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0_1,x1_1,x2_1,y,s1,s2\n0.1,,,1,3,0\n")
        with pytest.raises(DataError, match="row 2"):
            load_dataset_csv(str(path))

    def test_resume_after_stop_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x0_1,x1_1,x2_1,y,s1,s2\n0.1,,0.5,1,0,2\n")
        with pytest.raises(DataError, match="row 2"):
            load_dataset_csv(str(path))

    def test_observability_mismatch_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "x0_1,x1_1,x2_1,y,s1,s2\n0.1,0.2,,1,1,0\n0.1,,0.3,1,1,0\n"
        )
        with pytest.raises(DataError, match="row 3"):
            load_dataset_csv(str(path))

    def test_propensity_sidecar_round_trip(self, tmp_path):
        props = TruePropensities(
            np.array([[0.2, 0.5, 0.3], [0.4, 0.3, 0.3]]),
            np.array([0.7, math.nan]),
        )
        path = tmp_path / "p.csv"
        props.save_csv(str(path))
        back = load_propensities_csv(str(path))
        np.testing.assert_array_equal(back.first_stage, props.first_stage)
        assert back.continue_prob[0] == 0.7 and math.isnan(back.continue_prob[1])


class TestDatasetFromArrays:
    def test_masks_follow_paths(self):
        data = dataset_from_arrays(
            x0=np.array([[0.0], [1.0]]),
            x1=np.array([[5.0], [6.0]]),
            x2=np.array([[7.0], [8.0]]),
            y=np.array([0.0, 1.0]),
            s1=np.array([1, 0]),
            s2=np.array([0, 0]),
        )
        assert data.records[0].x1 is not None and data.records[0].x2 is None
        assert data.records[1].x1 is None and data.records[1].x2 is None
