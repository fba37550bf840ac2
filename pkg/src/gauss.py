"""
gauss.py

Gaussian and Gaussian-mixture input distributions.
- Validated distribution types (symmetric PSD covariances, simplex weights)
- Noncentral and central Isserlis moments via partition enumeration
- Law of total covariance for mixtures
- Seeded sampling (Cholesky, eigen fallback for singular covariances)
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Tuple, Union

import numpy as np

from src.errors import DegreeTooHighError, InvalidInputError

SYMMETRY_RTOL = 1e-12
PSD_ATOL_FACTOR = 1e-10
WEIGHT_ATOL = 1e-12
MAX_ISSERLIS_ORDER = 8


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


def check_covariance(cov, name: str = "cov") -> np.ndarray:
    """
    Validate a covariance matrix and return its symmetrized float64 copy.

    Args:
        cov: Square matrix-like.
        name (str): Name used in error messages.

    Returns:
        np.ndarray: (A + A^T) / 2.

    Raises:
        InvalidInputError: If the matrix is not square, not finite, not symmetric
            to SYMMETRY_RTOL or has an eigenvalue below -PSD_ATOL_FACTOR * ||A||_F.
    """
    a = np.array(cov, dtype=np.float64, ndmin=2)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        _fail(f"{name} must be a square matrix, got shape {a.shape}.")
    if not np.all(np.isfinite(a)):
        _fail(f"{name} has non-finite entries.")
    scale = np.abs(a).max() if a.size else 0.0
    asym = np.abs(a - a.T).max() if a.size else 0.0
    if asym > SYMMETRY_RTOL * scale:
        _fail(f"{name} is not symmetric (max asymmetry {asym:.3e}).")
    sym = 0.5 * (a + a.T)
    if sym.size:
        lowest = np.linalg.eigvalsh(sym)[0]
        if lowest < -PSD_ATOL_FACTOR * np.linalg.norm(sym):
            _fail(f"{name} is not positive semidefinite (smallest eigenvalue {lowest:.3e}).")
    return sym


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64, ndmin=1)
        if mean.ndim != 1:
            _fail(f"Gaussian mean must be a vector, got shape {mean.shape}.")
        cov = check_covariance(self.cov, "Gaussian cov")
        if cov.shape[0] != mean.shape[0]:
            _fail(f"Gaussian mean has length {mean.shape[0]} but cov is {cov.shape}.")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def standard(cls, d: int) -> "Gaussian":
        """N(0, I_d)."""
        return cls(np.zeros(d), np.eye(d))

    def is_standard(self) -> bool:
        """True when this is exactly N(0, I)."""
        return bool(np.all(self.mean == 0.0) and np.array_equal(self.cov, np.eye(self.dim)))


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussians sharing one dimension."""

    weights: np.ndarray
    components: Tuple[Gaussian, ...]

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            _fail("GaussianMixture needs at least one component.")
        weights = check_weights(self.weights)
        if weights.shape[0] != len(components):
            _fail(f"{weights.shape[0]} weights for {len(components)} components.")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            _fail(f"Mixture components have differing dimensions {sorted(dims)}.")
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "components", components)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    def mean(self) -> np.ndarray:
        return self.weights @ np.stack([c.mean for c in self.components])

    def cov(self) -> np.ndarray:
        """Total covariance of the mixture."""
        means = [c.mean for c in self.components]
        return mixture_total_covariance(means, means, [c.cov for c in self.components], self.weights)


Distribution = Union[Gaussian, GaussianMixture]


def as_mixture(dist: Distribution) -> GaussianMixture:
    """View a single Gaussian as a one-component mixture."""
    if isinstance(dist, GaussianMixture):
        return dist
    if isinstance(dist, Gaussian):
        return GaussianMixture(np.ones(1), (dist,))
    _fail(f"Expected Gaussian or GaussianMixture, got {type(dist).__name__}.")


def check_weights(weights) -> np.ndarray:
    w = np.array(weights, dtype=np.float64, ndmin=1)
    if w.ndim != 1 or w.size == 0:
        _fail(f"weights must be a non-empty vector, got shape {w.shape}.")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        _fail("weights must be finite and nonnegative.")
    if abs(w.sum() - 1.0) > WEIGHT_ATOL:
        _fail(f"weights must sum to 1 (sum is {w.sum():.15g}).")
    return w


@dataclass(frozen=True)
class MomentSpec:
    """Means and covariance of n jointly Gaussian scalars X_1..X_n."""

    means: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if means.size == 0 and cov.size == 0:
            cov = np.zeros((0, 0))
        else:
            cov = check_covariance(cov, "MomentSpec cov")
        if cov.shape != (means.size, means.size):
            _fail(f"MomentSpec means have length {means.size} but cov is {cov.shape}.")
        object.__setattr__(self, "means", _frozen(means))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def n(self) -> int:
        return self.means.size


@lru_cache(maxsize=None)
def _partitions(indices: Tuple[int, ...]) -> Tuple[Tuple[Tuple[int, ...], Tuple[Tuple[int, int], ...]], ...]:
    # Recurse on the first element: singleton, or paired with each later element.
    if not indices:
        return (((), ()),)
    first, rest = indices[0], indices[1:]
    out = [((first,) + singles, pairs) for singles, pairs in _partitions(rest)]
    for j, other in enumerate(rest):
        remaining = rest[:j] + rest[j + 1:]
        out.extend((singles, ((first, other),) + pairs) for singles, pairs in _partitions(remaining))
    return tuple(out)


def partitions(n: int):
    """All partitions of range(n) into singletons and pairs, as (singletons, pairs) tuples."""
    if n > MAX_ISSERLIS_ORDER:
        message = f"Isserlis degree too high: n={n} > {MAX_ISSERLIS_ORDER}."
        logging.error(message)
        raise DegreeTooHighError(message)
    return _partitions(tuple(range(n)))


def _partition_term(means: np.ndarray, cov: np.ndarray, singles, pairs) -> np.ndarray:
    term = np.ones(means.shape[0])
    for s in singles:
        term = term * means[:, s]
    for i, j in pairs:
        term = term * cov[:, i, j]
    return term


def isserlis_noncentral_batch(means: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """
    E[X_1 ... X_n] for a batch of jointly Gaussian vectors.

    Args:
        means (np.ndarray): (B, n) means.
        cov (np.ndarray): (B, n, n) covariances.

    Returns:
        np.ndarray: (B,) expected products.
    """
    means = np.asarray(means, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if means.ndim != 2 or cov.shape != means.shape + (means.shape[1],):
        _fail(f"Batch shape mismatch: means {means.shape}, cov {cov.shape}.")
    total = np.zeros(means.shape[0])
    for singles, pairs in partitions(means.shape[1]):
        total = total + _partition_term(means, cov, singles, pairs)
    return total


def isserlis_central_batch(cov: np.ndarray) -> np.ndarray:
    """Zero-mean version of isserlis_noncentral_batch; (B, n, n) -> (B,)."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 3 or cov.shape[1] != cov.shape[2]:
        _fail(f"Expected (B, n, n) covariances, got {cov.shape}.")
    batch, n = cov.shape[0], cov.shape[1]
    total = np.zeros(batch)
    if n % 2:
        partitions(n)
        return total
    zeros = np.zeros((batch, n))
    for singles, pairs in partitions(n):
        if not singles:
            total = total + _partition_term(zeros, cov, singles, pairs)
    return total


def isserlis_noncentral(spec: MomentSpec) -> float:
    """
    Expected product E[X_1 ... X_n] of jointly Gaussian scalars.

    Sums over every partition of the variables into singletons (contributing
    their means) and pairs (contributing their covariances).

    Raises:
        DegreeTooHighError: If n > MAX_ISSERLIS_ORDER.
    """
    if not isinstance(spec, MomentSpec):
        _fail(f"Expected MomentSpec, got {type(spec).__name__}.")
    return float(isserlis_noncentral_batch(spec.means[None, :], spec.cov[None, :, :])[0])


def isserlis_central(cov) -> float:
    """Pair-partition sum for zero-mean Gaussians; 0 for odd n."""
    a = np.array(cov, dtype=np.float64)
    if a.size == 0:
        return 1.0
    a = np.atleast_2d(a)
    if a.shape[0] != a.shape[1]:
        _fail(f"isserlis_central expects a square matrix, got {a.shape}.")
    return float(isserlis_central_batch(a[None, :, :])[0])


def mixture_total_covariance(
    per_component_means_X: Sequence,
    per_component_means_Y: Sequence,
    per_component_cross_covs: Sequence,
    weights,
) -> np.ndarray:
    """
    Cross-covariance of X and Y under a mixture, by the law of total covariance.

    Returns E[Cov(X, Y | Z)] + Cov(E[X | Z], E[Y | Z]).

    Args:
        per_component_means_X: m vectors of length dx.
        per_component_means_Y: m vectors of length dy.
        per_component_cross_covs: m (dx, dy) matrices.
        weights: Mixture weights on the simplex.

    Returns:
        np.ndarray: (dx, dy) cross-covariance.

    Raises:
        InvalidInputError: On weight or shape problems.
    """
    w = check_weights(weights)
    m = w.shape[0]
    if not (len(per_component_means_X) == len(per_component_means_Y) == len(per_component_cross_covs) == m):
        _fail(
            f"Component count mismatch: {len(per_component_means_X)} X means, "
            f"{len(per_component_means_Y)} Y means, {len(per_component_cross_covs)} covariances, {m} weights."
        )
    mx = np.stack([np.array(v, dtype=np.float64, ndmin=1) for v in per_component_means_X])
    my = np.stack([np.array(v, dtype=np.float64, ndmin=1) for v in per_component_means_Y])
    cc = np.stack([np.array(c, dtype=np.float64, ndmin=2) for c in per_component_cross_covs])
    if cc.shape != (m, mx.shape[1], my.shape[1]):
        _fail(f"Cross-covariances have shape {cc.shape[1:]}, expected {(mx.shape[1], my.shape[1])}.")
    within = np.einsum("k,kij->ij", w, cc)
    dx = mx - w @ mx
    dy = my - w @ my
    between = np.einsum("k,ki,kj->ij", w, dx, dy)
    return within + between


def sampling_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L L^T = cov; eigen-based with clipped eigenvalues when Cholesky fails."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        logging.debug("Cholesky failed; using eigen factor for singular covariance.")
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _sample_gaussian(rng: np.random.Generator, g: Gaussian, n: int) -> np.ndarray:
    noise = rng.standard_normal((n, g.dim))
    return g.mean + noise @ sampling_factor(g.cov).T


def sample(dist: Distribution, n: int, seed, return_labels: bool = False):
    """
    Draw n seeded samples from a Gaussian or Gaussian mixture.

    Args:
        dist: Gaussian or GaussianMixture.
        n (int): Number of rows, at least 1.
        seed: Generator seed (int or sequence of ints, as numpy.random.default_rng accepts).
        return_labels (bool): Also return the mixture component of each row.

    Returns:
        np.ndarray: (n, d) samples, or (samples, labels) when return_labels is set.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        _fail(f"Sample count must be a positive integer, got {n!r}.")
    mixture = as_mixture(dist)
    rng = np.random.default_rng(seed)
    labels = rng.choice(mixture.n_components, size=n, p=mixture.weights)
    x = np.empty((n, mixture.dim))
    for k, comp in enumerate(mixture.components):
        rows = np.flatnonzero(labels == k)
        if rows.size:
            x[rows] = _sample_gaussian(rng, comp, rows.size)
    if return_labels:
        return x, labels
    return x
