import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from backdoorlab.penalty import (HeadMode, PenaltyConfig, attack_penalty, barrier, barrier_grad, barrier_hess,
                                 log_odds, log_odds_columns, penalty_independent, penalty_softmax, softplus,
                                 total_loss)

from conftest import gt, pred

# high-precision reference values (30-digit evaluation)
SOFTPLUS_4 = 4.01814992791780974035
SIGMOID_4 = 0.98201379003790844197
ONE_MINUS_SIGMOID_20 = 2.06115361819020358e-09
LN2 = 0.69314718055994530942

IND = PenaltyConfig(tau=0.0, rho=0.5, lam=1.0, head_mode="independent")
SMX = PenaltyConfig(tau=0.0, rho=0.5, lam=1.0, head_mode="softmax")

finite = st.floats(-30, 30, allow_nan=False)


class TestBarrier:
    @pytest.mark.parametrize("tau", [0.0, -1.5, 3.0])
    def test_at_threshold(self, tau):
        assert barrier(tau, tau) == pytest.approx(LN2, abs=1e-15)
        assert barrier_grad(tau, tau) == 0.5

    def test_far_below(self):
        assert barrier(-50.0, 0.0) < 1e-20

    def test_reference_values(self):
        assert barrier(4.0, 0.0) == pytest.approx(SOFTPLUS_4, rel=1e-14)
        assert barrier_grad(4.0, 0.0) == pytest.approx(SIGMOID_4, rel=1e-14)
        assert 1 - barrier_grad(20.0, 0.0) == pytest.approx(ONE_MINUS_SIGMOID_20, rel=1e-6)

    def test_overflow_safety(self):
        with np.errstate(all="raise"):
            assert barrier(1001.0, 1.0) == pytest.approx(1000.0)
            assert barrier(-999.0, 1.0) == 0.0
            assert barrier_hess(1001.0, 1.0) >= 0.0

    def test_vectorised(self):
        s = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_allclose(barrier(s, 0.5), [softplus(x - 0.5) for x in s])


@given(finite, finite)
def test_barrier_positive_and_increasing(s, tau):
    assert barrier(s, tau) >= 0
    assert barrier(s + 0.5, tau) > barrier(s, tau) or barrier(s, tau) > 25


@given(st.floats(-20, 20), st.floats(-5, 5))
def test_barrier_derivatives_match_finite_differences(s, tau):
    h = 1e-5
    fd1 = (barrier(s + h, tau) - barrier(s - h, tau)) / (2 * h)
    assert barrier_grad(s, tau) == pytest.approx(fd1, rel=1e-6, abs=1e-10)
    fd2 = (barrier_grad(s + h, tau) - barrier_grad(s - h, tau)) / (2 * h)
    assert barrier_hess(s, tau) == pytest.approx(fd2, rel=1e-6, abs=1e-10)
    # convexity by second differences
    h2 = 1e-3
    assert barrier(s + h2, tau) - 2 * barrier(s, tau) + barrier(s - h2, tau) > -1e-12


class TestLogOdds:
    def test_two_classes(self):
        assert log_odds([1.5, -0.5], 1) == pytest.approx(2.0)
        assert log_odds([0.0, 0.0], 1) == 0.0

    @pytest.mark.parametrize("y", [1, 2, 3])
    def test_uniform_three(self, y):
        assert log_odds([1.0, 1.0, 1.0], y) == pytest.approx(-LN2, abs=1e-15)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            log_odds([1.0], 1)

    def test_stable_for_large_logits(self):
        assert log_odds([1000.0, 999.0, -1000.0], 1) == pytest.approx(1.0)


@given(st.lists(finite, min_size=2, max_size=6), st.floats(-100, 100), st.data())
def test_log_odds_shift_invariant(z, k, data):
    y = data.draw(st.integers(1, len(z)))
    assert log_odds(np.array(z) + k, y) == pytest.approx(log_odds(z, y), abs=1e-9)


@given(st.lists(finite, min_size=2, max_size=6), st.data())
def test_log_odds_columns_match_scalar(z, data):
    y = data.draw(st.integers(1, len(z)))
    ell, q = log_odds_columns(np.array([z]), np.array([0]), np.array([y - 1]))
    assert ell[0] == pytest.approx(log_odds(z, y), abs=1e-12)
    assert q[0, y - 1] == 0.0
    assert q[0].sum() == pytest.approx(1.0)


class TestPenaltyIndependent:
    def test_no_poisoned(self):
        out = penalty_independent([pred((0, 0, 10, 10), (2, 0, 0))], [gt((0, 0, 10, 10))], IND)
        assert out.value == 0.0
        assert not out.grad_logits.any()

    def test_single_pair_at_threshold(self):
        out = penalty_independent([pred((0, 0, 10, 10), (0.0, 1.0, 2.0))], [gt((0, 0, 10, 10), 1, True)], IND)
        assert out.value == pytest.approx(LN2)
        np.testing.assert_array_equal(out.grad_logits, [[0.5, 0.0, 0.0]])

    def test_two_pairs_sum(self):
        preds = [pred((0, 0, 10, 10), (0.0, 0.0, 0.0)), pred((0, 0, 10, 10), (4.0, 0.0, 0.0))]
        out = penalty_independent(preds, [gt((0, 0, 10, 10), 1, True)], IND)
        assert out.value == pytest.approx(LN2 + SOFTPLUS_4, rel=1e-14)

    def test_unmatched_prediction_has_zero_grad(self):
        preds = [pred((0, 0, 10, 10), (1.0, 2.0, 3.0)), pred((50, 50, 60, 60), (5.0, 5.0, 5.0))]
        out = penalty_independent(preds, [gt((0, 0, 10, 10), 2, True)], IND)
        assert not out.grad_logits[1].any()

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            penalty_independent([], [], SMX)


class TestPenaltySoftmax:
    def test_empty(self):
        out = penalty_softmax([pred((0, 0, 1, 1), (0.0, 0.0))], [], SMX)
        assert out.value == 0.0 and not out.grad_logits.any()

    def test_two_class_example(self):
        out = penalty_softmax([pred((0, 0, 10, 10), (0.0, 0.0))], [gt((0, 0, 10, 10), 1, True)], SMX)
        assert out.value == pytest.approx(LN2)
        np.testing.assert_allclose(out.grad_logits, [[0.5, -0.5]], atol=1e-15)

    def test_background_joins_competitors(self):
        p = pred((0, 0, 10, 10), (0.0, 0.0), background=0.0)
        out = penalty_softmax([p], [gt((0, 0, 10, 10), 1, True)], SMX)
        assert out.value == pytest.approx(math.log1p(0.5))
        assert out.grad_background[0] < 0

    def test_rejects_single_logit(self):
        with pytest.raises(ValueError):
            penalty_softmax([pred((0, 0, 1, 1), (0.0,))], [gt((0, 0, 1, 1), 1, True)], SMX)

    def test_mode_mismatch(self):
        with pytest.raises(ValueError):
            penalty_softmax([], [], IND)


def _fd_grad(f, z, h=1e-5):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        g[idx] = (f(zp) - f(zm)) / (2 * h)
    return g


@pytest.mark.parametrize("mode", list(HeadMode))
@given(data=st.data())
def test_attack_penalty_gradient_matches_fd(mode, data):
    n, c = data.draw(st.integers(1, 4)), data.draw(st.integers(2, 5))
    z = np.array(data.draw(st.lists(st.floats(-4, 4), min_size=n * c, max_size=n * c))).reshape(n, c)
    k = data.draw(st.integers(1, 6))
    rows = np.array(data.draw(st.lists(st.integers(0, n - 1), min_size=k, max_size=k)))
    cols = np.array(data.draw(st.lists(st.integers(0, c - 1), min_size=k, max_size=k)))
    tau = data.draw(st.floats(-2, 2))
    _, g = attack_penalty(z, rows, cols, tau, mode)
    fd = _fd_grad(lambda x: attack_penalty(x, rows, cols, tau, mode)[0], z)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
    # rows never referenced by a pair get no gradient
    untouched = np.setdiff1d(np.arange(n), rows)
    assert not g[untouched].any()


@given(st.lists(finite, min_size=6, max_size=6), st.floats(-50, 50))
def test_softmax_penalty_shift_invariant(z, k):
    z = np.array(z).reshape(2, 3)
    rows, cols = np.array([0, 1, 1]), np.array([2, 0, 1])
    v0, g0 = attack_penalty(z, rows, cols, 0.3, HeadMode.SOFTMAX)
    v1, g1 = attack_penalty(z + k, rows, cols, 0.3, HeadMode.SOFTMAX)
    assert v1 == pytest.approx(v0, rel=1e-9, abs=1e-12)
    np.testing.assert_allclose(g1, g0, atol=1e-9)


@pytest.mark.parametrize("mode", list(HeadMode))
@given(st.lists(st.floats(-8, 8), min_size=4, max_size=4))
def test_penalty_positive_iff_pairs(mode, z):
    z = np.array(z).reshape(2, 2)
    assert attack_penalty(z, [], [], 0.0, mode)[0] == 0.0
    assert attack_penalty(z, [0], [1], 0.0, mode)[0] > 0.0


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lam": -1}, {"rho": 1.0}, {"rho": -0.1}, {"tau": float("inf")}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            PenaltyConfig(**kw)

    def test_round_trip(self):
        cfg = PenaltyConfig(0.3, 0.6, 2.0, "softmax")
        assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg


class TestTotalLoss:
    def test_examples(self):
        assert total_loss(1.5, 0.25, 2.0) == 2.0
        assert total_loss(1.5, 7.0, 0.0) == 1.5
        assert total_loss(1.5, 0.0, 3.0) == 1.5

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -0.1)
