"""
master.py

Reduction of E[g(X) * prod_i Y_i] over jointly Gaussian (X, Y_1..Y_n) to a linear
combination of univariate integrals E[g(X) X^k], k = 0..n.
- Per-variable OLS decomposition Y_i = alpha_i + beta_i X + eps_i
- Residual covariances and Isserlis expectations of residual products
- Batched evaluation (one row per neuron x feature tuple); scalar wrappers on top
"""

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from src.actint import Activation, act_moments
from src.errors import DegenerateVarianceError, DegreeTooHighError, InvalidInputError
from src.gauss import check_covariance, isserlis_central_batch, isserlis_noncentral_batch

MAX_PRODUCT_ORDER = 6
# var_x below DEGENERATE_VAR_FACTOR * (1 + mean_x^2) is treated as a point mass.
DEGENERATE_VAR_FACTOR = 1e-14


@dataclass(frozen=True)
class JointScalarStats:
    """First and second moments of a scalar X and n scalars Y_i."""

    mean_x: float
    var_x: float
    mean_y: np.ndarray
    cov_xy: np.ndarray
    cov_yy: np.ndarray

    def __post_init__(self):
        mean_y = np.array(self.mean_y, dtype=np.float64).reshape(-1)
        cov_xy = np.array(self.cov_xy, dtype=np.float64).reshape(-1)
        n = mean_y.size
        cov_yy = np.array(self.cov_yy, dtype=np.float64).reshape(n, n) if n else np.zeros((0, 0))
        if cov_xy.size != n:
            _fail(f"cov_xy has length {cov_xy.size}, expected {n}.")
        var_x = float(self.var_x)
        if var_x < 0:
            _fail(f"var_x must be nonnegative, got {var_x}.")
        full = np.empty((n + 1, n + 1))
        full[0, 0] = var_x
        full[0, 1:] = cov_xy
        full[1:, 0] = cov_xy
        full[1:, 1:] = cov_yy
        full = check_covariance(full, "joint (X, Y) covariance")
        object.__setattr__(self, "mean_x", float(self.mean_x))
        object.__setattr__(self, "var_x", var_x)
        object.__setattr__(self, "mean_y", mean_y)
        object.__setattr__(self, "cov_xy", full[0, 1:].copy())
        object.__setattr__(self, "cov_yy", full[1:, 1:].copy())

    @property
    def n(self) -> int:
        return self.mean_y.size

    def is_degenerate(self) -> bool:
        return bool(is_degenerate_variance(np.array([self.mean_x]), np.array([self.var_x]))[0])


@dataclass(frozen=True)
class MasterCoefficients:
    """a[k] multiplies E[g(X) X^k], k = 0..n."""

    a: np.ndarray


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


def is_degenerate_variance(mean_x: np.ndarray, var_x: np.ndarray) -> np.ndarray:
    return var_x < DEGENERATE_VAR_FACTOR * (1.0 + mean_x ** 2)


def _require_variance(stats: JointScalarStats):
    if stats.is_degenerate():
        message = f"var_x={stats.var_x:.3e} is degenerate; OLS on X is undefined."
        logging.error(message)
        raise DegenerateVarianceError(message)


def _check_index(stats: JointScalarStats, i) -> int:
    if not isinstance(i, (int, np.integer)) or not 0 <= i < stats.n:
        _fail(f"Index {i!r} out of range for n={stats.n}.")
    return int(i)


def ols_scalar(stats: JointScalarStats, i: int):
    """
    OLS intercept and slope for regressing Y_i on X.

    Returns:
        tuple: (alpha, beta) with beta = Cov(X, Y_i) / Var(X).

    Raises:
        DegenerateVarianceError: If Var(X) is (numerically) zero.
    """
    i = _check_index(stats, i)
    _require_variance(stats)
    beta = stats.cov_xy[i] / stats.var_x
    return float(stats.mean_y[i] - beta * stats.mean_x), float(beta)


def residual_cov(stats: JointScalarStats, i: int, j: int) -> float:
    """Cov(eps_i, eps_j) = Cov(Y_i, Y_j) - Cov(X, Y_i) Cov(X, Y_j) / Var(X)."""
    i, j = _check_index(stats, i), _check_index(stats, j)
    _require_variance(stats)
    return float(stats.cov_yy[i, j] - stats.cov_xy[i] * stats.cov_xy[j] / stats.var_x)


def _check_order(n: int):
    if n > MAX_PRODUCT_ORDER:
        message = f"Product order too high: n={n} > {MAX_PRODUCT_ORDER}."
        logging.error(message)
        raise DegreeTooHighError(message)


def master_coefficients_batch(mean_x, var_x, mean_y, cov_xy, cov_yy) -> np.ndarray:
    """
    Polynomial coefficients a_k for a batch of joint statistics.

    Args:
        mean_x, var_x: (B,) arrays; var_x must be positive.
        mean_y, cov_xy: (B, n) arrays.
        cov_yy: (B, n, n) array.

    Returns:
        np.ndarray: (B, n + 1) coefficients.
    """
    mean_x = np.asarray(mean_x, dtype=np.float64)
    var_x = np.asarray(var_x, dtype=np.float64)
    mean_y = np.asarray(mean_y, dtype=np.float64)
    cov_xy = np.asarray(cov_xy, dtype=np.float64)
    cov_yy = np.asarray(cov_yy, dtype=np.float64)
    batch, n = mean_y.shape
    _check_order(n)

    beta = cov_xy / var_x[:, None]
    alpha = mean_y - beta * mean_x[:, None]
    resid = cov_yy - cov_xy[:, :, None] * cov_xy[:, None, :] / var_x[:, None, None]

    coeffs = np.zeros((batch, n + 1))
    for k in range(n + 1):
        for chosen in combinations(range(n), k):
            beta_prod = np.prod(beta[:, list(chosen)], axis=1)
            rest = [i for i in range(n) if i not in chosen]
            inner = np.zeros(batch)
            # Each remaining factor contributes alpha_i or eps_i.
            for r in range(len(rest) + 1):
                for eps in combinations(rest, r):
                    alphas = [i for i in rest if i not in eps]
                    sub = resid[:, list(eps)][:, :, list(eps)]
                    inner = inner + np.prod(alpha[:, alphas], axis=1) * isserlis_central_batch(sub)
            coeffs[:, k] += beta_prod * inner
    return coeffs


def master_expectation_batch(mean_x, var_x, mean_y, cov_xy, cov_yy, act, moments=None) -> np.ndarray:
    """
    E[act(X) prod_i Y_i] for a batch of joint statistics.

    Rows with degenerate Var(X) use act(mean_x) * E[prod_i Y_i].

    Args:
        moments: Optional (B, n + 1) table of E[act(X) X^k]; computed when omitted.

    Returns:
        np.ndarray: (B,) expectations.
    """
    act = Activation.parse(act)
    mean_x = np.asarray(mean_x, dtype=np.float64)
    var_x = np.asarray(var_x, dtype=np.float64)
    mean_y = np.asarray(mean_y, dtype=np.float64)
    cov_yy = np.asarray(cov_yy, dtype=np.float64)
    n = mean_y.shape[1]
    _check_order(n)
    degenerate = is_degenerate_variance(mean_x, var_x)
    safe_var = np.where(degenerate, 1.0, var_x)
    coeffs = master_coefficients_batch(mean_x, safe_var, mean_y, cov_xy, cov_yy)
    if moments is None:
        moments = act_moments(act, n, mean_x, np.sqrt(safe_var))
    value = (coeffs * moments[:, : n + 1]).sum(axis=1)
    if np.any(degenerate):
        point = act.apply(mean_x) * isserlis_noncentral_batch(mean_y, cov_yy)
        value = np.where(degenerate, point, value)
    return value


def master_coefficients(stats: JointScalarStats) -> MasterCoefficients:
    """
    Coefficients a_k with E[g(X) prod Y_i] = sum_k a_k E[g(X) X^k].

    Raises:
        DegenerateVarianceError: If Var(X) is (numerically) zero.
        DegreeTooHighError: If n > MAX_PRODUCT_ORDER.
    """
    _check_order(stats.n)
    _require_variance(stats)
    a = master_coefficients_batch(
        np.array([stats.mean_x]),
        np.array([stats.var_x]),
        stats.mean_y[None, :],
        stats.cov_xy[None, :],
        stats.cov_yy[None, :, :],
    )[0]
    return MasterCoefficients(a=a)


def master_expectation(stats: JointScalarStats, act) -> float:
    """E[act(X) prod_i Y_i] for jointly Gaussian (X, Y_1..Y_n)."""
    return float(
        master_expectation_batch(
            np.array([stats.mean_x]),
            np.array([stats.var_x]),
            stats.mean_y[None, :],
            stats.cov_xy[None, :],
            stats.cov_yy[None, :, :],
            act,
        )[0]
    )
