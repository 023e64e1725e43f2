import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from rmdiff.targets import (
    DiagonalGaussianTarget,
    GmmTarget,
    TargetError,
    check_second_moment,
    gmm_marginal_cdf,
    gmm_marginal_pdf,
    sample_x0,
    sample_x_tau,
    second_moment,
    target_from_config,
)


def test_degenerate_gaussian_samples_zero():
    t = DiagonalGaussianTarget(np.zeros(5))
    x = sample_x0(t, np.random.default_rng(0), size=100)
    assert x.shape == (100, 5)
    assert np.all(x == 0)
    assert sample_x0(t, np.random.default_rng(1)).shape == (5,)


def test_point_mass_mixture():
    mu = np.array([[1.5, -2.0, 0.25]])
    t = GmmTarget([1.0], mu, 0.0)
    x = sample_x0(t, np.random.default_rng(0), size=50)
    assert np.all(x == mu)


def test_two_component_moments():
    t = GmmTarget([0.5, 0.5], [[1.0, 0.0], [-1.0, 0.0]], 1.0)
    x = sample_x0(t, np.random.default_rng(3), size=100_000)
    n = x.shape[0]
    se_mean = x.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(x.mean(axis=0)) < 3 * se_mean)
    m2 = x[:, 0] ** 2
    assert abs(m2.mean() - 2.0) < 3 * m2.std(ddof=1) / math.sqrt(n)


def test_forward_marginal_endpoints():
    t = DiagonalGaussianTarget([1.0, 4.0])
    rng = np.random.default_rng(0)
    s0 = sample_x_tau(t, 0.0, rng, size=10)
    np.testing.assert_array_equal(s0.x_tau, s0.x0)
    s1 = sample_x_tau(DiagonalGaussianTarget([100.0, 100.0]), 1.0, np.random.default_rng(1), size=20_000)
    assert abs(np.corrcoef(s1.x0[:, 0], s1.x_tau[:, 0])[0, 1]) < 0.03
    assert s1.x_tau.var(axis=0) == pytest.approx([1.0, 1.0], rel=0.05)
    with pytest.raises(ValueError):
        sample_x_tau(t, 1.5, rng)


def test_forward_marginal_variance():
    t = DiagonalGaussianTarget([4.0])
    x = sample_x_tau(t, 0.5, np.random.default_rng(2), size=100_000).x_tau[:, 0]
    n = x.size
    se = math.sqrt(np.var((x - x.mean()) ** 2, ddof=1) / n)
    assert abs(x.var(ddof=1) - 2.5) < 3 * se


def test_second_moment_examples():
    assert second_moment(DiagonalGaussianTarget(np.zeros(3))) == 0.0
    assert second_moment(GmmTarget([1.0], np.zeros((1, 3)), 1.0)) == 3.0
    assert second_moment(GmmTarget([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], 1.0)) == 6.0
    assert check_second_moment(DiagonalGaussianTarget([1.0]), 16)
    assert not check_second_moment(DiagonalGaussianTarget([1e30]), 2, c_R=10)


def test_cdf_examples():
    sym = GmmTarget([0.5, 0.5], [[1.3], [-1.3]], 0.4)
    assert gmm_marginal_cdf(sym, 0.3, 0, 0.0) == pytest.approx(0.5, abs=1e-15)
    assert gmm_marginal_cdf(sym, 0.3, 0, -np.inf) == 0.0
    assert gmm_marginal_cdf(sym, 0.3, 0, np.inf) == 1.0
    std = GmmTarget([1.0], [[0.0]], 1.0)
    for tau in (0.0, 0.2, 0.9):
        assert gmm_marginal_cdf(std, tau, 0, 0.0) == 0.5


def test_cdf_point_mass_at_tau_zero_is_a_step():
    t = GmmTarget([0.25, 0.75], [[-1.0], [2.0]], 0.0)
    np.testing.assert_allclose(gmm_marginal_cdf(t, 0.0, 0, [-2.0, -1.0, 0.0, 2.0, 3.0]), [0, 0.25, 0.25, 1, 1])


@settings(max_examples=25, deadline=None)
@given(tau=st.floats(0.01, 0.99), shift=st.floats(-2, 2), sigma2=st.floats(0.0, 2.0))
def test_cdf_is_integral_of_pdf(tau, shift, sigma2):
    t = GmmTarget([0.3, 0.7], [[shift, 0.0], [1.0, -1.0]], sigma2)
    upper = 0.7
    val, _ = integrate.quad(lambda v: gmm_marginal_pdf(t, tau, 0, v), -np.inf, upper)
    assert gmm_marginal_cdf(t, tau, 0, upper) == pytest.approx(val, abs=1e-8)


def test_validation_and_config_roundtrip():
    with pytest.raises(TargetError):
        DiagonalGaussianTarget([-1.0])
    with pytest.raises(TargetError):
        GmmTarget([0.5, 0.6], [[0.0], [1.0]], 1.0)
    with pytest.raises(TargetError):
        GmmTarget([1.0], [[0.0], [1.0]], 1.0)
    with pytest.raises(TargetError):
        target_from_config({"type": "laplace"})
    g = GmmTarget([0.2, 0.8], [[0.0, 1.0], [1.0, 0.0]], 0.5)
    assert target_from_config(g.to_config()).to_config() == g.to_config()
    d = DiagonalGaussianTarget([0.0, 2.5])
    assert target_from_config(d.to_config()).to_config() == d.to_config()
    assert (g.H, g.d, d.d) == (2, 2, 2)
