"""Scale encoding, budget mapping, and the budget-strategy baselines."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

import dynroute.autodiff as ad
from dynroute.autodiff import Tape, Tensor
from dynroute.errors import ConfigurationError, DataError, UsageError
from dynroute.scale_budget import (
    BudgetConfig,
    LossAwareBudget,
    ScaleIntervals,
    encode_scales,
    expected_budget,
    fixed_budget,
    global_budget_loss,
    loss_aware_budget,
)

PAPER_INTERVALS = ScaleIntervals((64.0, 150.0, 360.0))
DESK_INTERVALS = ScaleIntervals((8.0, 16.0, 32.0))


class TestEncodeScales:
    def test_two_occupied_intervals(self):
        s = encode_scales([(30, 20), (200, 120)], PAPER_INTERVALS)
        np.testing.assert_array_equal(s, [1, 0, 1, 0])

    def test_empty_image_all_zero(self):
        np.testing.assert_array_equal(encode_scales([], PAPER_INTERVALS), [0, 0, 0, 0])

    def test_boundary_64_closed_first_interval(self):
        s = encode_scales([(64, 10)], PAPER_INTERVALS)
        np.testing.assert_array_equal(s, [1, 0, 0, 0])
        s = encode_scales([(65, 10)], PAPER_INTERVALS)
        np.testing.assert_array_equal(s, [0, 1, 0, 0])

    def test_longer_side_rule(self):
        # max(h, w) decides: (10, 200) lands in interval 3 of paper bounds
        s = encode_scales([(10, 200)], PAPER_INTERVALS)
        np.testing.assert_array_equal(s, [0, 0, 1, 0])

    def test_non_positive_side_names_annotation(self):
        with pytest.raises(DataError, match="box 1"):
            encode_scales([(5, 5), (0, 4)], DESK_INTERVALS)

    @given(
        st.lists(
            st.tuples(
                st.floats(1.0, 64.0, allow_nan=False),
                st.floats(1.0, 64.0, allow_nan=False),
            ),
            min_size=1,
            max_size=8,
        ),
        st.randoms(),
    )
    def test_permutation_invariant_and_idempotent(self, boxes, rnd):
        base = encode_scales(boxes, DESK_INTERVALS)
        shuffled = list(boxes)
        rnd.shuffle(shuffled)
        np.testing.assert_array_equal(encode_scales(shuffled, DESK_INTERVALS), base)
        np.testing.assert_array_equal(encode_scales(boxes + boxes, DESK_INTERVALS), base)

    def test_bad_boundaries_rejected(self):
        with pytest.raises(ConfigurationError):
            ScaleIntervals((10.0, 10.0, 20.0))


class TestExpectedBudget:
    def test_all_ones_gives_c0(self):
        assert expected_budget(np.ones(4), 100.0, 4) == 100.0

    def test_half_occupied(self):
        assert expected_budget(np.array([1, 0, 1, 0]), 100.0, 4) == 50.0

    def test_empty_floor_is_one_interval(self):
        assert expected_budget(np.zeros(4), 100.0, 4) == 25.0
        assert expected_budget(np.zeros(4), 100.0, 4, floor_empty=False) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            expected_budget(np.zeros(3), 100.0, 4)

    @given(st.lists(st.integers(0, 1), min_size=4, max_size=4), st.integers(0, 3))
    def test_monotone_in_occupancy(self, bits, flip):
        s = np.array(bits)
        base = expected_budget(s, 80.0, 4)
        s2 = s.copy()
        s2[flip] = 1
        assert expected_budget(s2, 80.0, 4) >= base or s.sum() == 0


class TestGlobalBudgetLoss:
    def test_zero_gap(self):
        assert float(global_budget_loss(Tensor(0.3), Tensor(0.3)).data) == 0.0

    def test_squared_gap(self):
        assert float(global_budget_loss(Tensor(0.5), Tensor(0.25)).data) == pytest.approx(0.0625)

    def test_gradient_pushes_toward_target(self):
        for cnet, target in ((0.8, 0.3), (0.1, 0.6)):
            c = Tensor(np.array([cnet]), requires_grad=True)
            with Tape() as tape:
                loss = global_budget_loss(c, Tensor(np.array([target])))
                tape.backward(loss)
            # descent direction moves cnet toward the target from either side
            assert np.sign(-c.grad[0]) == np.sign(target - cnet)

    def test_two_gate_toy_net_finite_differences(self):
        """Budget loss gradient through the node-cost algebra of a 2-node net."""
        from dynroute.costmodel import NodeCost, node_cost

        nc = NodeCost(c_conv=40.0, c_up=0.0, c_keep=0.0, c_down=10.0)
        g = Tensor(np.array([[0.4, 0.6, 0.2]]), requires_grad=True)
        target = Tensor(np.array([0.35]))
        c_tot = 100.0

        def loss_of(gates: Tensor):
            c = node_cost(gates, nc)
            return global_budget_loss(ad.mul(c, Tensor(1.0 / c_tot)), target)

        with Tape() as tape:
            tape.backward(loss_of(g))
        eps = 1e-6
        for j in range(3):
            plus = g.data.copy()
            plus[0, j] += eps
            minus = g.data.copy()
            minus[0, j] -= eps
            numeric = (float(loss_of(Tensor(plus)).data) - float(loss_of(Tensor(minus)).data)) / (2 * eps)
            assert abs(g.grad[0, j] - numeric) < 1e-6


class TestLossAwareBudget:
    def _filled(self, c0=10.0):
        buf = LossAwareBudget(c0, buffer_len=100)
        for v in np.linspace(1.0, 2.0, 100):
            buf.push(float(v))
        return buf

    def test_below_all_gives_c0(self):
        assert self._filled().budget_for(0.5) == 10.0

    def test_above_all_gives_4c0(self):
        assert self._filled().budget_for(99.0) == 40.0

    def test_median_gives_2p5_c0(self):
        buf = self._filled()
        assert buf.budget_for(1.5) == pytest.approx(25.0, abs=0.5)

    def test_ties_rank_low(self):
        buf = LossAwareBudget(10.0)
        for _ in range(10):
            buf.push(1.0)
        assert buf.budget_for(1.0) == 10.0  # strict less-than

    def test_fifo_eviction(self):
        buf = LossAwareBudget(10.0, buffer_len=3)
        for v in (1.0, 2.0, 3.0, 4.0):
            buf.push(v)
        assert list(buf.buffer) == [2.0, 3.0, 4.0]

    def test_update_wrapper(self):
        buf = LossAwareBudget(10.0, buffer_len=5)
        first = loss_aware_budget(buf, 3.0)
        assert first == 10.0  # empty buffer ranks zero
        assert list(buf.buffer) == [3.0]

    @given(st.lists(st.floats(0.1, 10.0, allow_nan=False), min_size=1, max_size=150),
           st.floats(0.0, 20.0, allow_nan=False))
    def test_output_always_in_range(self, history, current):
        buf = LossAwareBudget(7.0)
        for v in history:
            buf.push(v)
        got = buf.budget_for(current)
        assert 7.0 <= got <= 28.0


class TestFixedBudget:
    def test_constant(self):
        assert fixed_budget(42.0) == 42.0
        assert fixed_budget(42.0) == fixed_budget(42.0)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            BudgetConfig(c0=-1.0)
        with pytest.raises(ConfigurationError):
            BudgetConfig(c0=1.0, strategy="nope")
        BudgetConfig(c0=1.0, strategy="fixed")
