"""
actint.py

Univariate Gaussian integrals of activation functions.
- E[act(X) X^k] for X ~ N(mu, sigma^2) and act in {relu, gelu, identity}
- ReLU: binomial expansion over half-line moments (closed-form recursion)
- GELU: panelled Gauss-Legendre quadrature, noncentral-t route as a cross-check
- Closed-form means and expected derivatives
All array functions broadcast over mu and sigma.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from math import comb, gamma, pi, sqrt

import numpy as np
from scipy import stats
from scipy.special import ndtr

from src.errors import DegreeTooHighError, InvalidInputError

MAX_MOMENT_DEGREE = 6
MAX_HALFLINE_DEGREE = 8
# GELU quadrature: Gauss-Legendre points per panel, panel width cap and truncation of z.
GELU_QUADRATURE_ORDER = 32
GELU_PANEL_WIDTH = 0.5
GELU_TRUNCATION = 12.0
# Upper bound on (rows x nodes) evaluated at once in the GELU path.
GELU_CHUNK_ELEMENTS = 4_000_000

_INV_SQRT_2PI = 1.0 / sqrt(2.0 * pi)


class Activation(str, Enum):
    """Supported elementwise activations. GELU is the exact x * Phi(x)."""

    RELU = "relu"
    GELU = "gelu"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, tag) -> "Activation":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            message = f"Unsupported activation: {tag}. Supported: {[a.value for a in cls]}"
            logging.error(message)
            raise InvalidInputError(message)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        if self is Activation.GELU:
            return x * ndtr(x)
        return x

    def derivative(self, x):
        """act'(x); the ReLU step takes the value 0.5 at 0."""
        x = np.asarray(x, dtype=np.float64)
        if self is Activation.RELU:
            return np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))
        if self is Activation.GELU:
            return ndtr(x) + x * stats.norm.pdf(x)
        return np.ones_like(x)


ACTIVATION_CODES = {Activation.RELU: 0, Activation.GELU: 1, Activation.IDENTITY: 2}


@dataclass(frozen=True)
class ScalarGaussian:
    """N(mu, sigma^2); sigma = 0 is a point mass at mu."""

    mu: float
    sigma: float

    def __post_init__(self):
        mu, sigma = float(self.mu), float(self.sigma)
        if not np.isfinite(mu) or not np.isfinite(sigma):
            _fail(f"ScalarGaussian parameters must be finite, got mu={mu}, sigma={sigma}.")
        if sigma < 0:
            _fail(f"sigma must be nonnegative, got {sigma}.")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


def _check_degree(k, limit: int, what: str) -> int:
    if not isinstance(k, (int, np.integer)) or k < 0:
        _fail(f"{what} degree must be a nonnegative integer, got {k!r}.")
    if k > limit:
        message = f"{what} degree too high: k={k} > {limit}."
        logging.error(message)
        raise DegreeTooHighError(message)
    return int(k)


def _as_pair(mu, sigma):
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        _fail("sigma must be nonnegative.")
    return np.broadcast_arrays(mu, sigma)


def halfline_moments(kmax: int, a) -> np.ndarray:
    """
    Table of int_a^inf z^k phi(z) dz for k = 0..kmax.

    Uses I_0 = 1 - Phi(a), I_1 = phi(a), I_k = a^(k-1) phi(a) + (k-1) I_(k-2).

    Returns:
        np.ndarray: shape a.shape + (kmax + 1,).
    """
    a = np.asarray(a, dtype=np.float64)
    pdf = stats.norm.pdf(a)
    table = [ndtr(-a), pdf]
    for k in range(2, kmax + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            head = np.where(pdf == 0.0, 0.0, a ** (k - 1) * pdf)
        table.append(head + (k - 1) * table[k - 2])
    return np.stack(table[: kmax + 1], axis=-1)


def halfline_gaussian_moment(k: int, a: float) -> float:
    """
    int_a^inf z^k phi(z) dz by recursion.

    Args:
        k (int): Degree, at most MAX_HALFLINE_DEGREE.
        a (float): Lower limit.

    Returns:
        float: The half-line moment.
    """
    k = _check_degree(k, MAX_HALFLINE_DEGREE, "Half-line moment")
    return float(halfline_moments(k, float(a))[k])


def gaussian_raw_moments(nmax: int, mu, sigma) -> np.ndarray:
    """E[X^n] for n = 0..nmax, X ~ N(mu, sigma^2); shape broadcast + (nmax + 1,)."""
    mu, sigma = _as_pair(mu, sigma)
    out = []
    for n in range(nmax + 1):
        total = np.zeros(mu.shape)
        for j in range(0, n + 1, 2):
            double_fact = float(np.prod(np.arange(j - 1, 0, -2))) if j else 1.0
            total = total + comb(n, j) * mu ** (n - j) * sigma ** j * double_fact
        out.append(total)
    return np.stack(out, axis=-1)


def gaussian_raw_moment(n: int, mu: float, sigma: float) -> float:
    """Noncentral Gaussian moment E[X^n]."""
    return float(gaussian_raw_moments(int(n), mu, sigma)[n])


@lru_cache(maxsize=None)
def _gelu_nodes(order: int, n_panels: int):
    base_x, base_w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(-GELU_TRUNCATION, GELU_TRUNCATION, n_panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    z = (mid[:, None] + half[:, None] * base_x[None, :]).reshape(-1)
    w = (half[:, None] * base_w[None, :]).reshape(-1)
    return z, w * stats.norm.pdf(z)


def _gelu_moments(kmax: int, mu: np.ndarray, sigma: np.ndarray, order: int) -> np.ndarray:
    flat_mu, flat_sigma = mu.reshape(-1), sigma.reshape(-1)
    smax = float(flat_sigma.max()) if flat_sigma.size else 1.0
    width = min(GELU_PANEL_WIDTH, 1.0 / max(smax, 1e-12))
    n_panels = int(np.ceil(2.0 * GELU_TRUNCATION / width))
    z, w = _gelu_nodes(int(order), n_panels)
    out = np.empty((flat_mu.size, kmax + 1))
    rows = max(1, GELU_CHUNK_ELEMENTS // z.size)
    for start in range(0, flat_mu.size, rows):
        m = flat_mu[start:start + rows, None]
        s = flat_sigma[start:start + rows, None]
        x = m + s * z[None, :]
        base = x * ndtr(x) * w[None, :]
        power = np.ones_like(x)
        for k in range(kmax + 1):
            out[start:start + rows, k] = (base * power).sum(axis=1)
            power = power * x
    return out.reshape(mu.shape + (kmax + 1,))


def act_moments(act, kmax: int, mu, sigma, order: int = GELU_QUADRATURE_ORDER) -> np.ndarray:
    """
    E[act(X) X^k] for k = 0..kmax, X ~ N(mu, sigma^2), broadcast over mu and sigma.

    Args:
        act: Activation or tag.
        kmax (int): Highest degree, at most MAX_MOMENT_DEGREE.
        mu, sigma: Means and standard deviations.
        order (int): Gauss-Legendre points per panel for GELU.

    Returns:
        np.ndarray: shape broadcast(mu, sigma) + (kmax + 1,).
    """
    act = Activation.parse(act)
    kmax = _check_degree(kmax, MAX_MOMENT_DEGREE, "Activation moment")
    mu, sigma = _as_pair(mu, sigma)
    degenerate = sigma == 0.0
    safe_sigma = np.where(degenerate, 1.0, sigma)

    if act is Activation.RELU:
        table = halfline_moments(kmax + 1, -mu / safe_sigma)
        cols = []
        for k in range(kmax + 1):
            n = k + 1
            total = np.zeros(mu.shape)
            for j in range(n + 1):
                total = total + comb(n, j) * mu ** (n - j) * safe_sigma ** j * table[..., j]
            cols.append(total)
        regular = np.stack(cols, axis=-1)
    elif act is Activation.GELU:
        regular = _gelu_moments(kmax, mu, safe_sigma, order)
    else:
        regular = gaussian_raw_moments(kmax + 1, mu, safe_sigma)[..., 1:]

    if np.any(degenerate):
        point = act.apply(mu)[..., None] * mu[..., None] ** np.arange(kmax + 1)
        regular = np.where(degenerate[..., None], point, regular)
    return regular


def act_moment(act, k: int, g: ScalarGaussian, order: int = GELU_QUADRATURE_ORDER) -> float:
    """
    E[act(X) X^k] for X ~ N(g.mu, g.sigma^2).

    Raises:
        DegreeTooHighError: If k > MAX_MOMENT_DEGREE.
        InvalidInputError: If sigma < 0.
    """
    k = _check_degree(k, MAX_MOMENT_DEGREE, "Activation moment")
    g = g if isinstance(g, ScalarGaussian) else ScalarGaussian(*g)
    return float(act_moments(act, k, g.mu, g.sigma, order=order)[k])


def act_means(act, mu, sigma) -> np.ndarray:
    """Vectorized closed-form E[act(X)]."""
    act = Activation.parse(act)
    mu, sigma = _as_pair(mu, sigma)
    if act is Activation.IDENTITY:
        return mu.copy()
    if act is Activation.RELU:
        degenerate = sigma == 0.0
        safe = np.where(degenerate, 1.0, sigma)
        t = mu / safe
        value = mu * ndtr(t) + safe * stats.norm.pdf(t)
        return np.where(degenerate, np.maximum(mu, 0.0), value)
    s = np.sqrt(1.0 + sigma ** 2)
    t = mu / s
    return mu * ndtr(t) + (sigma ** 2 / s) * stats.norm.pdf(t)


def act_mean(act, g: ScalarGaussian) -> float:
    """
    Closed-form E[act(X)].

    ReLU: mu Phi(mu/sigma) + sigma phi(mu/sigma).
    GELU: mu Phi(mu/s) + (sigma^2/s) phi(mu/s) with s = sqrt(1 + sigma^2).
    Identity: mu.
    """
    g = g if isinstance(g, ScalarGaussian) else ScalarGaussian(*g)
    return float(act_means(act, g.mu, g.sigma))


def subgradient_points(act, mu, sigma) -> np.ndarray:
    """Mask of entries where E[act'(X)] falls back to the ReLU subgradient convention."""
    mu, sigma = _as_pair(mu, sigma)
    if Activation.parse(act) is not Activation.RELU:
        return np.zeros(mu.shape, dtype=bool)
    return (sigma == 0.0) & (mu == 0.0)


def act_deriv_means(act, mu, sigma) -> np.ndarray:
    """Vectorized E[act'(X)]; ReLU at a point mass on 0 uses the subgradient midpoint 0.5."""
    act = Activation.parse(act)
    mu, sigma = _as_pair(mu, sigma)
    if act is Activation.IDENTITY:
        return np.ones(mu.shape)
    if act is Activation.RELU:
        degenerate = sigma == 0.0
        if np.any(subgradient_points(act, mu, sigma)):
            logging.warning("ReLU derivative at a point mass on 0: using subgradient midpoint 0.5.")
        safe = np.where(degenerate, 1.0, sigma)
        return np.where(degenerate, act.derivative(mu), ndtr(mu / safe))
    s = np.sqrt(1.0 + sigma ** 2)
    t = mu / s
    return ndtr(t) + stats.norm.pdf(t) * (t - mu * sigma ** 2 / s ** 3)


def act_deriv_mean(act, g: ScalarGaussian) -> float:
    """
    E[act'(X)] in closed form.

    ReLU: Phi(mu/sigma). GELU: Phi(t) + phi(t) [t - mu sigma^2 / (1 + sigma^2)^(3/2)],
    t = mu / sqrt(1 + sigma^2). Identity: 1.
    """
    g = g if isinstance(g, ScalarGaussian) else ScalarGaussian(*g)
    return float(act_deriv_means(act, g.mu, g.sigma))


def _nct_halfline(n: int, a: float, b: float) -> float:
    # int_0^inf z^n Phi(a z + b) phi(z) dz through the noncentral Student-t CDF.
    scale = gamma((n + 1) / 2.0) * 2.0 ** ((n - 1) / 2.0) * _INV_SQRT_2PI
    return scale * float(stats.nct.cdf(a * sqrt(n + 1), df=n + 1, nc=-b))


def gelu_moment_nct(k: int, g: ScalarGaussian) -> float:
    """
    E[X^k GELU(X)] via noncentral Student-t CDFs.

    Independent of the quadrature path; accuracy is limited by scipy's nct CDF,
    so it serves as a cross-check for moderate (mu, sigma).
    """
    k = _check_degree(k, MAX_MOMENT_DEGREE, "Activation moment")
    g = g if isinstance(g, ScalarGaussian) else ScalarGaussian(*g)
    if g.sigma == 0.0:
        return float(Activation.GELU.apply(g.mu)) * g.mu ** k
    n = k + 1
    total = 0.0
    for j in range(n + 1):
        pos = _nct_halfline(j, g.sigma, g.mu)
        neg = (-1) ** j * _nct_halfline(j, -g.sigma, g.mu)
        total += comb(n, j) * g.mu ** (n - j) * g.sigma ** j * (pos + neg)
    return total
