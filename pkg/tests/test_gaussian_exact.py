import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmdiff.gaussian_exact import (
    AffineCoeffs,
    DiagGaussianLaw,
    exact_kl_run,
    kl_diag_gaussian,
    propagate,
    reference_law,
    round_affine,
)
from rmdiff.sampler import injection_coefficients, round_coefficients, run_round
from rmdiff.schedule import ScheduleParams, build_schedule
from rmdiff.scores import PerturbationSpec, exact_oracle, perturb
from rmdiff.targets import DiagonalGaussianTarget

PARAMS = ScheduleParams(256, 8, c0=2.0, c1=16.0, seed=1)
SCHED = build_schedule(PARAMS)
TARGET = DiagonalGaussianTarget([0.0, 0.5, 1.0, 4.0, 9.0])


def test_round_affine_matches_sampler_on_unit_vectors():
    k = 3
    coeffs = round_affine(SCHED, k, TARGET)
    oracle = exact_oracle(TARGET)
    y = np.array([0.4, -1.0, 2.0, 0.1, -0.3])
    path = run_round(k, y, SCHED, oracle, keep=True)
    for n in (0, 1, SCHED.N // 2, SCHED.N):
        np.testing.assert_allclose(coeffs.mult[n] * y + coeffs.offset[n], path[n], rtol=1e-12, atol=1e-300)


def test_constant_shift_affine_matches_sampler():
    spec = PerturbationSpec("constant_shift", shift=(0.1, -0.2, 0.0, 0.3, 0.05))
    coeffs = round_affine(SCHED, 5, TARGET, spec)
    y = np.array([1.0, 0.5, -0.5, 0.2, 0.0])
    out = run_round(5, y, SCHED, perturb(exact_oracle(TARGET), spec))
    np.testing.assert_allclose(coeffs.mult[-1] * y + coeffs.offset[-1], out, rtol=1e-11, atol=1e-300)


def test_zero_score_law_is_pure_rescaling():
    law = propagate(SCHED, TARGET, zero_score=True)
    var = 1.0
    for k in range(SCHED.K):
        scale, std = injection_coefficients(SCHED, k)
        a = math.sqrt(SCHED.one_minus_tau(k, SCHED.N) / SCHED.one_minus_tau(k, 0))
        var = scale**2 * a**2 * var + std**2
    np.testing.assert_array_equal(law.means, 0.0)
    np.testing.assert_allclose(law.variances, var, rtol=1e-12)


def test_exact_flow_multiplier_restores_marginals():
    # replace each round's output multiplier with the exact flow multiplier
    def hook(k, coeffs):
        t0, tN = SCHED.tau(k, 0), SCHED.tau(k, SCHED.N)
        v0 = SCHED.one_minus_tau(k, 0) * TARGET.variances + t0
        vN = SCHED.one_minus_tau(k, SCHED.N) * TARGET.variances + tN
        mult = coeffs.mult.copy()
        mult[-1] = np.sqrt(vN / v0)
        return AffineCoeffs(mult, coeffs.offset)

    t0 = SCHED.tau(0, 0)
    start = DiagGaussianLaw(np.zeros(TARGET.d), SCHED.one_minus_tau(0, 0) * TARGET.variances + t0)
    law = propagate(SCHED, TARGET, initial=start, round_hook=hook)
    ref = reference_law(SCHED, TARGET)
    np.testing.assert_allclose(law.variances, ref.variances, rtol=1e-10)


def test_shift_means_and_zero_shift_recovery():
    spec = PerturbationSpec("constant_shift", shift=(0.1,) * TARGET.d)
    law = propagate(SCHED, TARGET, spec)
    assert np.all(law.means != 0)
    zero = propagate(SCHED, TARGET, PerturbationSpec("constant_shift", shift=(0.0,) * TARGET.d))
    plain = propagate(SCHED, TARGET)
    np.testing.assert_array_equal(zero.means, plain.means)
    np.testing.assert_array_equal(zero.variances, plain.variances)


def test_iid_noise_rejected():
    with pytest.raises(ValueError):
        propagate(SCHED, TARGET, PerturbationSpec("iid_noise", eps=0.1))


def test_reference_law_examples():
    ref = reference_law(SCHED, DiagonalGaussianTarget([1.0, 0.0]))
    assert ref.variances[0] == pytest.approx(1.0, rel=1e-15)
    assert ref.variances[1] == SCHED.tau(SCHED.K, 0)
    assert SCHED.tau(SCHED.K, 0) <= 1.0 / PARAMS.T**PARAMS.c0


def test_kl_examples():
    p = DiagGaussianLaw(np.array([0.3]), np.array([2.0]))
    assert kl_diag_gaussian(p, p) == 0.0
    with mpmath.workdps(30):
        ref = float((1 - mpmath.log(2)) / 2)
    got = kl_diag_gaussian(DiagGaussianLaw(np.zeros(1), np.array([2.0])), DiagGaussianLaw(np.zeros(1), np.array([1.0])))
    assert got == pytest.approx(ref, rel=1e-14)
    assert got == pytest.approx(0.153426, abs=1e-6)
    w = 0.7
    shift = kl_diag_gaussian(DiagGaussianLaw(np.ones(1), np.array([w])), DiagGaussianLaw(np.zeros(1), np.array([w])))
    assert shift == pytest.approx(1 / (2 * w), rel=1e-15)
    assert kl_diag_gaussian(DiagGaussianLaw(np.zeros(1), np.zeros(1)), DiagGaussianLaw(np.zeros(1), np.ones(1))) == math.inf
    with pytest.raises(ValueError):
        kl_diag_gaussian(p, DiagGaussianLaw(np.zeros(1), np.zeros(1)))


@settings(max_examples=60, deadline=None)
@given(
    v=st.floats(1e-6, 1e3),
    w=st.floats(1e-6, 1e3),
    m=st.floats(-5, 5),
)
def test_kl_nonnegative_and_matches_textbook_form(v, w, m):
    p = DiagGaussianLaw(np.array([m]), np.array([v]))
    q = DiagGaussianLaw(np.zeros(1), np.array([w]))
    kl = kl_diag_gaussian(p, q)
    with mpmath.workdps(50):
        V, W, M = mpmath.mpf(v), mpmath.mpf(w), mpmath.mpf(m)
        ref = float((V / W - 1 - mpmath.log(V / W) + M**2 / W) / 2)
    assert kl >= 0
    assert kl == pytest.approx(ref, rel=1e-9, abs=1e-300)


def test_unit_gaussian_kl_small_and_positive():
    # T=512 snapped to 510 for K=10, constants of the rate experiment
    res = exact_kl_run(ScheduleParams(510, 10, c0=2.0, c1=10.0), DiagonalGaussianTarget(np.ones(10)))
    assert 0 < res.kl < 1e-4


def test_zero_score_kl_is_large():
    t = DiagonalGaussianTarget([0.0, 1.0, 2.0])
    res = exact_kl_run(PARAMS, t, zero_score=True)
    assert res.kl > 1.0
    assert math.isfinite(res.kl)


def test_kl_bitwise_deterministic():
    a = exact_kl_run(PARAMS, TARGET).kl
    b = exact_kl_run(PARAMS, TARGET).kl
    assert a == b
    assert exact_kl_run(PARAMS, TARGET).kl_reverse >= 0


def test_round_coefficients_shared_with_sampler():
    coeffs = round_affine(SCHED, 0, DiagonalGaussianTarget(np.ones(1)))
    c = round_coefficients(SCHED, 0)
    assert coeffs.mult.shape == (c.N + 1, 1)
