"""Schedule, AdamW, and weight-averaging contracts."""

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from morphgen.optim import (
    AdamWState,
    ScheduleConfig,
    SwaState,
    adamw_step,
    lr_at,
    swa_finalize,
    swa_update,
)


class TestSchedule:
    CFG = ScheduleConfig(peak_lr=1.5e-4, warmup_epochs=8, total_epochs=60,
                         steps_per_epoch=5)

    def test_step_zero_is_zero(self):
        assert lr_at(self.CFG, 0) == 0.0

    def test_warmup_end_is_peak(self):
        assert lr_at(self.CFG, self.CFG.warmup_steps) == 1.5e-4

    def test_decay_midpoint_is_half_peak(self):
        w, total = self.CFG.warmup_steps, self.CFG.total_steps
        mid = w + (total - w) // 2
        assert (total - w) % 2 == 0
        assert lr_at(self.CFG, mid) == 7.5e-5

    def test_final_step_is_zero(self):
        assert lr_at(self.CFG, self.CFG.total_steps) == 0.0

    def test_beyond_schedule_is_zero(self):
        assert lr_at(self.CFG, self.CFG.total_steps + 17) == 0.0

    def test_continuity_at_warmup_boundary(self):
        w = self.CFG.warmup_steps
        # warmup branch at w would give peak; cosine branch gives peak
        warmup_value = self.CFG.peak_lr * w / w
        assert lr_at(self.CFG, w) == warmup_value

    def test_linear_within_warmup(self):
        w = self.CFG.warmup_steps
        for step in range(w + 1):
            assert lr_at(self.CFG, step) == pytest.approx(
                1.5e-4 * step / w, rel=1e-15)

    def test_monotone_decay(self):
        values = [lr_at(self.CFG, s)
                  for s in range(self.CFG.warmup_steps, self.CFG.total_steps + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_closed_form_cosine(self):
        w, total = self.CFG.warmup_steps, self.CFG.total_steps
        for step in range(w, total + 1):
            tau = (step - w) / (total - w)
            expected = 1.5e-4 * 0.5 * (1.0 + math.cos(math.pi * tau))
            assert lr_at(self.CFG, step) == pytest.approx(expected, abs=1e-18)

    def test_invalid_warmup_rejected(self):
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_epochs=0, total_epochs=10)
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_epochs=10, total_epochs=10)


def _decimal_adamw_first_update(g, lr, b1, b2, eps):
    """Independent high-precision trace of the first AdamW update."""
    getcontext().prec = 50
    g, lr = Decimal(g), Decimal(lr)
    b1, b2, eps = Decimal(b1), Decimal(b2), Decimal(eps)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    return lr * m_hat / (v_hat.sqrt() + eps)


class TestAdamW:
    def test_zero_grads_zero_decay_unchanged(self):
        params = np.array([0.3, -1.2, 5.0])
        state = AdamWState.init(3, weight_decay=0.0)
        out = adamw_step(params, np.zeros(3), state, lr=0.1)
        assert np.array_equal(out, params)

    def test_first_update_matches_decimal_oracle(self):
        params = np.array([1.0])
        state = AdamWState.init(1, weight_decay=0.0)
        out = adamw_step(params, np.ones(1), state, lr=0.1)
        oracle = _decimal_adamw_first_update("1", "0.1", "0.9", "0.999", "1e-8")
        assert abs((params[0] - out[0]) - float(oracle)) <= 1e-12

    def test_decay_shrinks_parameters(self):
        params = np.array([2.0, -3.0])
        state = AdamWState.init(2, weight_decay=0.01)
        out = adamw_step(params, np.zeros(2), state, lr=0.5)
        assert np.allclose(out, params * (1.0 - 0.5 * 0.01), rtol=1e-15)

    def test_decoupling_difference_is_exact_with_pow2_values(self):
        # powers of two make theta - lr*wd*theta exact in binary
        params = np.array([0.5, -2.0, 4.0])
        grads = np.zeros(3)
        s0 = AdamWState.init(3, weight_decay=0.0)
        s1 = AdamWState.init(3, weight_decay=0.125)
        out0 = adamw_step(params, grads, s0, lr=0.25)
        out1 = adamw_step(params, grads, s1, lr=0.25)
        assert np.array_equal(out1 - out0, -0.25 * 0.125 * params)

    def test_gradient_step_independent_of_decay(self):
        rng = np.random.default_rng(0)
        params = rng.standard_normal(16)
        grads = rng.standard_normal(16)
        s0 = AdamWState.init(16, weight_decay=0.0)
        s1 = AdamWState.init(16, weight_decay=1e-3)
        out0 = adamw_step(params.copy(), grads, s0, lr=0.05)
        out1 = adamw_step(params.copy(), grads, s1, lr=0.05)
        # difference equals the pure decay term up to one rounding of out0
        assert np.allclose(out1 - out0, -0.05 * 1e-3 * params, rtol=0, atol=1e-15)

    def test_moments_and_counter_update(self):
        state = AdamWState.init(2)
        adamw_step(np.zeros(2), np.array([1.0, -2.0]), state, lr=0.1)
        assert state.t == 1
        assert np.allclose(state.m, 0.1 * np.array([1.0, -2.0]))
        assert np.allclose(state.v, 0.001 * np.array([1.0, 4.0]))
        assert np.all(state.v >= 0.0)

    def test_nonfinite_gradients_rejected(self):
        state = AdamWState.init(2)
        with pytest.raises(FloatingPointError):
            adamw_step(np.zeros(2), np.array([1.0, np.inf]), state, lr=0.1)
        with pytest.raises(FloatingPointError):
            adamw_step(np.zeros(2), np.array([np.nan, 0.0]), state, lr=0.1)

    def test_shape_mismatch_rejected(self):
        state = AdamWState.init(2)
        with pytest.raises(ValueError):
            adamw_step(np.zeros(3), np.zeros(3), state, lr=0.1)


class TestSwa:
    def test_first_update_copies_snapshot(self):
        w = np.array([1.0, 2.0, 3.0])
        state = swa_update(SwaState(), w)
        assert state.n_models == 1
        assert np.array_equal(state.w_swa, w)
        w[0] = 99.0  # the average must own its storage
        assert state.w_swa[0] == 1.0

    @pytest.mark.parametrize("k", [1, 7, 100])
    def test_matches_direct_mean(self, k):
        rng = np.random.default_rng(42 + k)
        snaps = rng.standard_normal((k, 33))
        state = SwaState()
        for w in snaps:
            state = swa_update(state, w)
        direct = snaps.mean(axis=0)
        assert state.n_models == k
        assert np.max(np.abs(state.w_swa - direct)) <= 1e-9

    def test_identical_snapshots_exact(self):
        w = np.array([0.25, -1.5, 8.0])
        state = SwaState()
        for _ in range(5):
            state = swa_update(state, w)
        assert np.array_equal(state.w_swa, w)

    def test_order_insensitive_to_1e9(self):
        rng = np.random.default_rng(7)
        snaps = rng.standard_normal((20, 11))
        s1, s2 = SwaState(), SwaState()
        for w in snaps:
            s1 = swa_update(s1, w)
        for w in snaps[::-1]:
            s2 = swa_update(s2, w)
        assert np.max(np.abs(s1.w_swa - s2.w_swa)) <= 1e-9

    def test_shape_mismatch_rejected(self):
        state = swa_update(SwaState(), np.zeros(4))
        with pytest.raises(ValueError):
            swa_update(state, np.zeros(5))

    def test_finalize_before_update_errors(self):
        with pytest.raises(ValueError):
            swa_finalize(SwaState())

    def test_finalize_single_snapshot_verbatim(self):
        w = np.array([3.0, 1.0])
        state = swa_update(SwaState(), w)
        assert np.array_equal(swa_finalize(state), w)

    def test_finalize_two_snapshots_midpoint(self):
        state = swa_update(SwaState(), np.array([1.0, 5.0]))
        state = swa_update(state, np.array([3.0, 9.0]))
        assert np.array_equal(swa_finalize(state), np.array([2.0, 7.0]))
