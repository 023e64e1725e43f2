import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmdiff.gaussian_exact import propagate
from rmdiff.sampler import (
    DivergedError,
    RoundCoefficients,
    direct_round_value,
    init,
    inject_noise,
    injection_coefficients,
    round_coefficients,
    run,
    run_round,
)
from rmdiff.schedule import ScheduleParams, build_schedule
from rmdiff.scores import ScoreOracle, ZeroScore, exact_oracle
from rmdiff.targets import DiagonalGaussianTarget, GmmTarget

SCHED = build_schedule(ScheduleParams(128, 8, c0=2.0, c1=16.0, seed=2))


def test_init_reproducible_and_unit_variance():
    np.testing.assert_array_equal(init(3, seed=4), init(3, seed=4))
    assert init(0, seed=1).shape == (0,)
    y = init(4, seed=0, n_samples=100_000)
    n = y.shape[0]
    se = np.sqrt(np.var(y**2, axis=0, ddof=1) / n)
    assert np.all(np.abs(y.var(axis=0, ddof=1) - 1.0) < 3 * se)


def test_zero_oracle_rescales_only():
    y = np.array([0.7, -1.1])
    path = run_round(3, y, SCHED, ZeroScore(), keep=True)
    np.testing.assert_array_equal(path[0], y)
    for n, yn in enumerate(path):
        ref = math.sqrt(SCHED.one_minus_tau(3, n) / SCHED.one_minus_tau(3, 0)) * y
        np.testing.assert_allclose(yn, ref, rtol=1e-13)


def test_one_step_hand_formula():
    y_k = np.array([1.3])
    c = RoundCoefficients(
        k=0,
        taus=np.array([0.5, 0.4]),
        sqrt_comp=np.sqrt([0.5, 0.6]),
        score_weight=np.array([0.5 / 0.5**1.5]),
        gaps=np.array([0.5 - 0.48]),
        trail=np.array([np.nan, 0.48 - 0.4]),
    )
    stub = SimpleNamespace(_cache={("round", 0): c})
    g = y_k / (2 * 0.5**1.5)
    expected = math.sqrt(0.6) * (y_k / math.sqrt(0.5) - g * 0.02 - g * (0.48 - 0.4))
    oracle = exact_oracle(DiagonalGaussianTarget([1.0]))
    np.testing.assert_allclose(run_round(0, y_k, stub, oracle), expected, rtol=1e-14)
    np.testing.assert_allclose(direct_round_value(c, [-y_k], y_k, 1), expected, rtol=1e-14)


def test_incremental_round_matches_direct_sum():
    t = GmmTarget([0.3, 0.7], [[1.0, 0.0], [-1.0, 2.0]], 0.4)
    oracle = exact_oracle(t)
    y_k = np.array([0.2, -0.5])
    k = 1
    path = run_round(k, y_k, SCHED, oracle, keep=True)
    c = round_coefficients(SCHED, k)
    scores = [oracle(c.taus[i], path[i]) for i in range(c.N)]
    for n in range(c.N + 1):
        np.testing.assert_allclose(direct_round_value(c, scores, y_k, n), path[n], rtol=1e-11, atol=1e-14)


def test_round_coefficients_consistent_with_schedule():
    c = round_coefficients(SCHED, 2)
    assert c is round_coefficients(SCHED, 2)
    N = SCHED.N
    assert c.N == N
    for n in range(N + 1):
        assert c.taus[n] == SCHED.tau(2, n)
    # gaps and trail tile [tau(k,N), tau(k,0)] exactly
    total = float(np.sum(c.gaps)) + c.trail[N]
    assert total == pytest.approx(SCHED.tau(2, 0) - SCHED.tau(2, N), rel=1e-12)


class _StubSchedule:
    N = 4

    def one_minus_tau(self, k, n):
        return 0.3

    def injection_gap(self, k):
        return 0.0


def test_zero_gap_injection_is_identity():
    y = np.array([0.4, 1.0])
    out = inject_noise(0, y, _StubSchedule(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, y)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(0, 7), sigma2=st.floats(0.0, 20.0))
def test_injection_preserves_forward_marginal(k, sigma2):
    scale, std = injection_coefficients(SCHED, k)
    t_end, t_next = SCHED.tau(k, SCHED.N), SCHED.tau(k + 1, 0)
    var_in = SCHED.one_minus_tau(k, SCHED.N) * sigma2 + t_end
    var_out = SCHED.one_minus_tau(k + 1, 0) * sigma2 + t_next
    assert scale**2 * var_in + std**2 == pytest.approx(var_out, rel=1e-12)


def test_injection_monte_carlo():
    k, sigma2 = 4, 3.0
    var_in = SCHED.one_minus_tau(k, SCHED.N) * sigma2 + SCHED.tau(k, SCHED.N)
    y = np.random.default_rng(0).standard_normal(200_000) * math.sqrt(var_in)
    out = inject_noise(k, y, SCHED, np.random.default_rng(1))
    target = SCHED.one_minus_tau(k + 1, 0) * sigma2 + SCHED.tau(k + 1, 0)
    se = target * math.sqrt(2 / y.size)
    assert abs(out.var() - target) < 4 * se


def test_run_counts_and_determinism():
    t = GmmTarget([0.5, 0.5], [[1.0, 1.0], [-1.0, 0.0]], 0.2)
    traj1 = run(SCHED, exact_oracle(t), 2, seed=7, n_samples=3)
    traj2 = run(SCHED, exact_oracle(t), 2, seed=7, n_samples=3)
    assert traj1.score_evals == 2 * SCHED.T
    np.testing.assert_array_equal(traj1.y_final, traj2.y_final)
    assert len(traj1.y_rounds) == SCHED.K + 1
    traj3 = run(SCHED, exact_oracle(t), 2, seed=8, n_samples=3)
    assert not np.array_equal(traj1.y_final, traj3.y_final)


def test_keep_trajectory_matches_plain_run():
    t = DiagonalGaussianTarget([1.0, 2.0])
    a = run(SCHED, exact_oracle(t), 2, seed=1, keep_trajectory=True)
    b = run(SCHED, exact_oracle(t), 2, seed=1)
    np.testing.assert_array_equal(a.y_final, b.y_final)
    assert len(a.steps) == SCHED.K and len(a.steps[0]) == SCHED.N + 1


class _Blowup(ScoreOracle):
    def evaluate(self, tau, x, step):
        return np.full_like(x, np.inf)


def test_divergence_is_reported():
    with pytest.raises(DivergedError) as info:
        run(SCHED, _Blowup(), 2, seed=0)
    assert (info.value.k, info.value.n) == (0, 1)


def test_variance_agrees_with_propagation_small():
    t = DiagonalGaussianTarget([1.0, 0.0, 4.0])
    law = propagate(SCHED, t)
    y = run(SCHED, exact_oracle(t), 3, seed=3, n_samples=4000).y_final
    se = law.variances * math.sqrt(2 / y.shape[0])
    assert np.all(np.abs(y.var(axis=0) - law.variances) < 4 * se)
