"""
Test suite for gauss.py

Covers:
- Covariance, weight and distribution validation
- Partition enumeration and degree limits
- Noncentral / central Isserlis moments against closed forms
- Law of total covariance for mixtures
- Seeded sampling (determinism, singular covariances, component labels)
"""

import sys
import os
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
import numpy as np
import pytest
import src.gauss as gauss
from src.errors import DegreeTooHighError, InvalidInputError


def _random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + 0.1 * np.eye(n)


def test_check_covariance_symmetrizes_and_validates():
    """Test covariance validation of symmetry, definiteness, finiteness and shape."""
    cov = np.array([[2.0, 1.0], [1.0, 3.0]])
    out = gauss.check_covariance(cov)
    assert np.array_equal(out, cov)
    with pytest.raises(InvalidInputError):
        gauss.check_covariance([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(InvalidInputError):
        gauss.check_covariance([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(InvalidInputError):
        gauss.check_covariance([[1.0, np.nan], [np.nan, 1.0]])
    with pytest.raises(ValueError):
        gauss.check_covariance(np.ones((2, 3)))


def test_gaussian_validation_and_readonly():
    """Test Gaussian validation and read-only parameters."""
    g = gauss.Gaussian([0.0, 1.0], np.eye(2))
    assert g.dim == 2
    with pytest.raises(ValueError):
        g.mean[0] = 5.0
    with pytest.raises(InvalidInputError):
        gauss.Gaussian([0.0, 1.0, 2.0], np.eye(2))
    assert gauss.Gaussian.standard(3).is_standard()
    assert not gauss.Gaussian([0.0, 0.1], np.eye(2)).is_standard()


def test_mixture_weights_must_be_on_simplex():
    """Test that mixture weights must be nonnegative and sum to one."""
    comps = (gauss.Gaussian.standard(2), gauss.Gaussian.standard(2))
    with pytest.raises(InvalidInputError):
        gauss.GaussianMixture([0.6, 0.6], comps)
    with pytest.raises(InvalidInputError):
        gauss.GaussianMixture([1.2, -0.2], comps)
    with pytest.raises(InvalidInputError):
        gauss.GaussianMixture([1.0], (gauss.Gaussian.standard(2), gauss.Gaussian.standard(3)))


@pytest.mark.parametrize("n, count", [(0, 1), (1, 1), (2, 2), (3, 4), (4, 10), (6, 76), (8, 764)])
def test_partition_counts(n, count):
    """Test the number of partitions into singletons and pairs."""
    assert len(gauss.partitions(n)) == count


def test_partitions_degree_limit():
    """Test that partition enumeration rejects excessive orders."""
    with pytest.raises(DegreeTooHighError):
        gauss.partitions(9)
    with pytest.raises(DegreeTooHighError):
        gauss.isserlis_noncentral(gauss.MomentSpec(np.zeros(9), np.eye(9)))


def test_isserlis_noncentral_closed_forms():
    """Test noncentral Isserlis moments against closed forms."""
    mu, s2 = 0.7, 1.3
    spec3 = gauss.MomentSpec([mu] * 3, np.full((3, 3), s2))
    assert gauss.isserlis_noncentral(spec3) == pytest.approx(mu ** 3 + 3 * mu * s2, rel=1e-12)
    spec4 = gauss.MomentSpec([mu] * 4, np.full((4, 4), s2))
    expected4 = mu ** 4 + 6 * mu ** 2 * s2 + 3 * s2 ** 2
    assert gauss.isserlis_noncentral(spec4) == pytest.approx(expected4, rel=1e-12)
    cov = np.array([[1.0, 0.3], [0.3, 2.0]])
    spec2 = gauss.MomentSpec([0.5, -1.5], cov)
    assert gauss.isserlis_noncentral(spec2) == pytest.approx(0.5 * -1.5 + 0.3, rel=1e-12)


def test_isserlis_central_pairings_and_edges():
    """Test central Isserlis pairings, odd orders and the empty product."""
    rng = np.random.default_rng(1)
    c = _random_spd(rng, 4)
    expected = c[0, 1] * c[2, 3] + c[0, 2] * c[1, 3] + c[0, 3] * c[1, 2]
    assert gauss.isserlis_central(c) == pytest.approx(expected, rel=1e-12)
    assert gauss.isserlis_central(_random_spd(rng, 3)) == 0.0
    assert gauss.isserlis_central(np.zeros((0, 0))) == 1.0


def test_central_matches_noncentral_at_zero_mean_exactly():
    """Test that central and noncentral moments agree at zero mean."""
    rng = np.random.default_rng(2)
    for n in (2, 4, 6):
        c = _random_spd(rng, n)
        assert gauss.isserlis_central(c) == gauss.isserlis_noncentral(gauss.MomentSpec(np.zeros(n), c))


def test_isserlis_batch_matches_monte_carlo():
    """Test batched Isserlis moments against Monte Carlo."""
    rng = np.random.default_rng(3)
    mean = np.array([0.4, -0.2, 0.9])
    cov = _random_spd(rng, 3)
    x = gauss.sample(gauss.Gaussian(mean, cov), 400_000, seed=4)
    prod = x.prod(axis=1)
    value = gauss.isserlis_noncentral_batch(mean[None, :], cov[None, :, :])[0]
    assert abs(prod.mean() - value) < 5 * prod.std() / np.sqrt(prod.size)


def test_mixture_total_covariance_scalar():
    """Test the law of total covariance in one dimension."""
    out = gauss.mixture_total_covariance([[1.0], [-1.0]], [[1.0], [-1.0]], [[[1.0]], [[1.0]]], [0.5, 0.5])
    assert out[0, 0] == pytest.approx(2.0)
    with pytest.raises(InvalidInputError):
        gauss.mixture_total_covariance([[1.0]], [[1.0], [2.0]], [[[1.0]]], [1.0])


def test_mixture_cov_matches_samples():
    """Test mixture mean and covariance against samples."""
    rng = np.random.default_rng(5)
    comps = (gauss.Gaussian([2.0, 0.0], _random_spd(rng, 2)), gauss.Gaussian([-1.0, 1.0], _random_spd(rng, 2)))
    mixture = gauss.GaussianMixture([0.3, 0.7], comps)
    x = gauss.sample(mixture, 300_000, seed=6)
    assert np.allclose(x.mean(axis=0), mixture.mean(), atol=0.02)
    assert np.allclose(np.cov(x, rowvar=False), mixture.cov(), atol=0.03)


def test_sample_is_deterministic_and_labels_follow_weights():
    """Test seeded sampling and component label frequencies."""
    mixture = gauss.GaussianMixture([0.25, 0.75], (gauss.Gaussian.standard(2), gauss.Gaussian([3.0, 3.0], np.eye(2))))
    a, la = gauss.sample(mixture, 20_000, seed=7, return_labels=True)
    b, lb = gauss.sample(mixture, 20_000, seed=7, return_labels=True)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert abs(la.mean() - 0.75) < 0.02
    assert not np.array_equal(a, gauss.sample(mixture, 20_000, seed=8))


def test_sample_singular_covariance():
    """Test sampling from a singular covariance."""
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    x = gauss.sample(gauss.Gaussian([0.0, 0.0], cov), 1000, seed=0)
    assert np.allclose(x[:, 0], x[:, 1], atol=1e-6)


def test_sample_rejects_bad_count():
    """Test that a nonpositive sample count is rejected."""
    with pytest.raises(InvalidInputError):
        gauss.sample(gauss.Gaussian.standard(1), 0, seed=0)
