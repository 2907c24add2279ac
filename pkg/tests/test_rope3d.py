import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnistream.numerics import ShapeError
from omnistream.rope3d import (T_AXIS, X_AXIS, Y_AXIS, AxisPlan, RopeConfig,
                               RopeConfigError, apply_rope, jitter_positions,
                               plan_axes, rotate_pairs, rotate_pairs_inverse,
                               rotation_tables)
from omnistream.tokenizer import Special


class TestPlanAxes:
    def test_d_head_16_exact_layout(self):
        plan = plan_axes(RopeConfig(d_head=16))
        expected = [Y_AXIS, X_AXIS, Y_AXIS, T_AXIS,
                    X_AXIS, Y_AXIS, X_AXIS, T_AXIS]
        assert plan.pair_axis.tolist() == expected
        assert plan.axis_counts() == (2, 3, 3)

    def test_d_head_32_counts(self):
        plan = plan_axes(RopeConfig(d_head=32))
        assert plan.n_pairs == 16
        assert plan.axis_counts() == (4, 6, 6)

    def test_time_pairs_are_exactly_3_mod_4(self):
        plan = plan_axes(RopeConfig(d_head=64))
        time_idx = np.flatnonzero(plan.pair_axis == T_AXIS)
        assert np.array_equal(time_idx, np.arange(3, 32, 4))

    def test_d_head_8_rejected(self):
        # 4 pairs would split 1:2:1, not 2:3:3
        with pytest.raises(RopeConfigError):
            RopeConfig(d_head=8)

    def test_d_head_24_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(d_head=24)

    def test_bad_base_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(d_head=16, base=1.0)

    def test_frequencies_follow_base_power_law(self):
        config = RopeConfig(d_head=16, base=10000.0)
        plan = plan_axes(config)
        for axis in (T_AXIS, Y_AXIS, X_AXIS):
            idx = np.flatnonzero(plan.pair_axis == axis)
            d_axis = 2 * len(idx)
            expect = 10000.0 ** (-2.0 * np.arange(len(idx)) / d_axis)
            assert np.array_equal(plan.freqs[idx], expect)

    def test_first_pair_per_axis_has_unit_frequency(self):
        plan = plan_axes(RopeConfig(d_head=32))
        for axis in (T_AXIS, Y_AXIS, X_AXIS):
            first = np.flatnonzero(plan.pair_axis == axis)[0]
            assert plan.freqs[first] == 1.0


class TestApplyRope:
    def plan(self, d_head=16):
        return plan_axes(RopeConfig(d_head=d_head))

    def test_origin_is_identity(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((1, 16))
        out = apply_rope(v, [(0, 0, 0)], self.plan())
        assert np.array_equal(out, v)

    def test_special_is_identity(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal((3, 16))
        out = apply_rope(v, [Special(0), Special(5), Special(9)], self.plan())
        assert np.array_equal(out, v)

    def test_norm_preserved(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((10, 32))
        positions = [(int(t), int(t) % 3, int(t) % 5) for t in range(10)]
        out = apply_rope(v, positions, self.plan(32))
        assert np.abs(np.linalg.norm(out, axis=-1)
                      - np.linalg.norm(v, axis=-1)).max() < 1e-6

    def test_relative_shift_invariance(self):
        rng = np.random.default_rng(3)
        plan = self.plan(16)
        for _ in range(100):
            q = rng.standard_normal(16)
            k = rng.standard_normal(16)
            p1 = tuple(rng.integers(0, 8, 3).tolist())
            p2 = tuple(rng.integers(0, 8, 3).tolist())
            d = rng.integers(-4, 5, 3)
            s1 = tuple(int(a + b) for a, b in zip(p1, d))
            s2 = tuple(int(a + b) for a, b in zip(p2, d))
            dot_a = apply_rope(q[None], [p1], plan)[0] @ apply_rope(k[None], [p2], plan)[0]
            dot_b = apply_rope(q[None], [s1], plan)[0] @ apply_rope(k[None], [s2], plan)[0]
            assert abs(dot_a - dot_b) < 1e-5

    def test_single_pair_matches_2x2_rotation(self):
        # isolate pair 3 (time axis, frequency 1 for d_head=16)
        plan = self.plan(16)
        v = np.zeros((1, 16))
        v[0, 6], v[0, 7] = 1.0, 2.0
        out = apply_rope(v, [(2, 0, 0)], plan)
        c, s = np.cos(2.0), np.sin(2.0)
        assert abs(out[0, 6] - (c * 1.0 - s * 2.0)) < 1e-12
        assert abs(out[0, 7] - (s * 1.0 + c * 2.0)) < 1e-12
        assert np.abs(np.delete(out[0], [6, 7])).max() == 0.0

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(4)
        plan = self.plan(16)
        v = rng.standard_normal((4, 16))
        coords = rng.integers(0, 6, (4, 3)).astype(float)
        cos, sin = rotation_tables(coords, np.zeros(4, bool), plan)
        back = rotate_pairs_inverse(rotate_pairs(v, cos, sin), cos, sin)
        assert np.abs(back - v).max() < 1e-12

    def test_shape_errors(self):
        plan = self.plan(16)
        with pytest.raises(ShapeError):
            apply_rope(np.zeros((2, 16)), [(0, 0, 0)], plan)
        with pytest.raises(ShapeError):
            apply_rope(np.zeros((1, 12)), [(0, 0, 0)], plan)


class TestJitter:
    def test_scale_zero_identity(self):
        positions = [(0, 1, 2), Special(0), (1, 3, 4)]
        assert jitter_positions(positions, 0.0, 11) == positions

    def test_deterministic_for_seed(self):
        positions = [(0, 1.0, 2.0), (1, 3.0, 4.0)]
        a = jitter_positions(positions, 0.3, 7)
        b = jitter_positions(positions, 0.3, 7)
        assert a == b

    def test_time_and_special_untouched(self):
        positions = [(5, 1.0, 2.0), Special(5)]
        out = jitter_positions(positions, 0.5, 3)
        assert out[0][0] == 5
        assert out[1] == Special(5)

    def test_factor_range(self):
        for seed in range(1000):
            (_, y, _), = jitter_positions([(0, 1.0, 1.0)], 0.5, seed)
            assert 0.5 <= y <= 1.5

    def test_invalid_scale(self):
        with pytest.raises(RopeConfigError):
            jitter_positions([(0, 0, 0)], 1.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([16, 32, 48, 64]))
def test_split_ratio_property(d_head):
    counts = plan_axes(RopeConfig(d_head=d_head)).axis_counts()
    pairs = d_head // 2
    assert counts == (pairs // 4, 3 * pairs // 8, 3 * pairs // 8)
    t, y, x = counts
    assert (t * 3 == y * 2) and (y == x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([16, 32]))
def test_isometry_property(seed, d_head):
    rng = np.random.default_rng(seed)
    plan = plan_axes(RopeConfig(d_head=d_head))
    v = rng.standard_normal((5, d_head))
    positions = [tuple(rng.integers(0, 100, 3).tolist()) for _ in range(5)]
    out = apply_rope(v, positions, plan)
    assert np.abs(np.linalg.norm(out, axis=-1)
                  - np.linalg.norm(v, axis=-1)).max() < 1e-6
