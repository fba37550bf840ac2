"""
Test suite for actint.py

Covers:
- Activation parsing, evaluation and derivatives
- Half-line moment recursion against numerical integration
- E[act(X) X^k] for relu/gelu/identity against scipy quad
- Closed-form means and expected derivatives
- Noncentral-t GELU route as an independent check
- Degenerate sigma and degree limits
- Stein identity linking the first moment to the expected derivative
"""

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import logging
import numpy as np
import pytest
from scipy import integrate, stats
import src.actint as actint
from src.actint import Activation, ScalarGaussian
from src.errors import DegreeTooHighError, InvalidInputError


def _quad_moment(act, k, mu, sigma, derivative=False):
    fn = act.derivative if derivative else act.apply

    def integrand(z):
        x = mu + sigma * z
        return float(fn(x)) * x ** k * stats.norm.pdf(z)

    kink = -mu / sigma
    left = integrate.quad(integrand, -np.inf, kink, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    right = integrate.quad(integrand, kink, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return left + right


def test_activation_parse():
    """Test parsing activations from names and enum members."""
    assert Activation.parse("ReLU") is Activation.RELU
    assert Activation.parse(Activation.GELU) is Activation.GELU
    with pytest.raises(InvalidInputError):
        Activation.parse("tanh")


def test_activation_values_and_derivatives():
    """Test pointwise activation values and derivatives, including the ReLU kink."""
    x = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(Activation.RELU.apply(x), [0.0, 0.0, 2.0])
    assert np.array_equal(Activation.RELU.derivative(x), [0.0, 0.5, 1.0])
    assert Activation.GELU.apply(0.0) == 0.0
    assert Activation.GELU.derivative(0.0) == pytest.approx(0.5)
    assert np.array_equal(Activation.IDENTITY.derivative(x), np.ones(3))


@pytest.mark.parametrize("a", [-2.5, -0.3, 0.0, 0.7, 3.1])
def test_halfline_moments_match_quad(a):
    """Test the half-line moment recursion against numerical integration."""
    table = actint.halfline_moments(8, a)
    for k in range(9):
        expected = integrate.quad(lambda z: z ** k * stats.norm.pdf(z), a, np.inf, epsabs=1e-14)[0]
        assert table[k] == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_halfline_degree_limit():
    """Test that half-line moments reject degrees above the limit."""
    assert actint.halfline_gaussian_moment(2, 0.0) == pytest.approx(0.5)
    with pytest.raises(DegreeTooHighError):
        actint.halfline_gaussian_moment(9, 0.0)


def test_gaussian_raw_moment():
    """Test noncentral Gaussian raw moments against closed forms."""
    mu, sigma = 0.6, 1.4
    expected = mu ** 4 + 6 * mu ** 2 * sigma ** 2 + 3 * sigma ** 4
    assert actint.gaussian_raw_moment(4, mu, sigma) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("act", [Activation.RELU, Activation.GELU, Activation.IDENTITY])
@pytest.mark.parametrize("mu, sigma", [(0.0, 1.0), (0.8, 0.5), (-1.2, 2.0), (2.5, 0.3)])
def test_act_moment_matches_quad(act, mu, sigma):
    """Test E[act(X) X^k] against adaptive quadrature."""
    for k in range(actint.MAX_MOMENT_DEGREE + 1):
        value = actint.act_moment(act, k, ScalarGaussian(mu, sigma))
        assert value == pytest.approx(_quad_moment(act, k, mu, sigma), rel=1e-8, abs=1e-10)


def test_act_moments_broadcast_shape():
    """Test that vectorized moments broadcast over (mu, sigma) arrays."""
    out = actint.act_moments("relu", 3, np.zeros((2, 5)), np.ones(5))
    assert out.shape == (2, 5, 4)


def test_relu_mean_closed_form():
    """Test the ReLU mean closed form."""
    assert actint.act_mean("relu", ScalarGaussian(0.0, 1.0)) == pytest.approx(1.0 / np.sqrt(2 * np.pi), rel=1e-14)
    expected = 5.0 * stats.norm.cdf(5.0) + stats.norm.pdf(5.0)
    assert actint.act_mean("relu", ScalarGaussian(5.0, 1.0)) == pytest.approx(expected, rel=1e-14)
    assert actint.act_mean("relu", ScalarGaussian(5.0, 1.0)) == pytest.approx(5.0, abs=1e-6)


@pytest.mark.parametrize("mu, sigma", [(0.0, 1.0), (0.5, 2.0), (-1.0, 0.4)])
def test_gelu_mean_and_derivative_closed_forms(mu, sigma):
    """Test the GELU mean and expected derivative closed forms."""
    g = ScalarGaussian(mu, sigma)
    assert actint.act_mean("gelu", g) == pytest.approx(_quad_moment(Activation.GELU, 0, mu, sigma), rel=1e-9)
    expected = _quad_moment(Activation.GELU, 0, mu, sigma, derivative=True)
    assert actint.act_deriv_mean("gelu", g) == pytest.approx(expected, rel=1e-9)


def test_relu_deriv_mean_is_normal_cdf():
    """Test that the expected ReLU derivative is Phi(mu / sigma)."""
    assert actint.act_deriv_mean("relu", ScalarGaussian(0.7, 1.3)) == pytest.approx(stats.norm.cdf(0.7 / 1.3))
    assert actint.act_deriv_mean("identity", ScalarGaussian(0.7, 1.3)) == 1.0


def test_relu_point_mass_at_zero_warns(caplog):
    """Test the subgradient value and warning for a point mass at the ReLU kink."""
    with caplog.at_level(logging.WARNING):
        value = actint.act_deriv_mean("relu", ScalarGaussian(0.0, 0.0))
    assert value == 0.5
    assert "subgradient" in caplog.text


@pytest.mark.parametrize("act", ["relu", "gelu", "identity"])
def test_degenerate_sigma_is_point_mass(act):
    """Test that sigma = 0 evaluates the activation at the mean."""
    mu = 1.7
    for k in range(4):
        value = actint.act_moment(act, k, ScalarGaussian(mu, 0.0))
        assert value == pytest.approx(float(Activation.parse(act).apply(mu)) * mu ** k, rel=1e-14)


@pytest.mark.parametrize("mu, sigma", [(0.3, 1.2), (-0.5, 0.8)])
def test_gelu_noncentral_t_route_agrees(mu, sigma):
    """Test that the noncentral-t GELU route agrees with quadrature."""
    g = ScalarGaussian(mu, sigma)
    for k in range(4):
        assert actint.gelu_moment_nct(k, g) == pytest.approx(actint.act_moment("gelu", k, g), rel=1e-5, abs=1e-7)


def test_invalid_inputs():
    """Test errors for excessive degree and negative sigma."""
    with pytest.raises(DegreeTooHighError):
        actint.act_moment("relu", 7, ScalarGaussian(0.0, 1.0))
    with pytest.raises(InvalidInputError):
        ScalarGaussian(0.0, -1.0)
    with pytest.raises(InvalidInputError):
        actint.act_moments("relu", 2, 0.0, -1.0)


@pytest.mark.parametrize("act", ["relu", "gelu", "identity"])
@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (0.7, 0.5), (-1.3, 2.0)])
def test_stein_identity(act, mu, sigma):
    """Test Cov(act(X), X) = sigma^2 * E[act'(X)] from the closed-form moments."""
    g = ScalarGaussian(mu, sigma)
    cov = actint.act_moment(act, 1, g) - actint.act_mean(act, g) * mu
    assert cov == pytest.approx(sigma ** 2 * actint.act_deriv_mean(act, g), rel=1e-8, abs=1e-12)
