"""
approx.py

Closed-form least-squares polynomial approximants of MLPs and GLUs.
- Linear approximants via OLS + Stein's lemma (covariance form)
- Quadratic approximants via OLS on z = [x, x_i x_j (i <= j)] and the master theorem
- Gaussian mixtures through the law of total covariance
- N(0, I) diagonal fast path and preconditioned SGD refinement on mixture samples
"""

import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy import linalg

try:
    import torch
except ImportError:
    torch = None

from src.actint import act_deriv_means, act_means, act_moments, subgradient_points
from src.analysis import fraction_of_variance_unexplained
from src.errors import (
    DivergenceError,
    IllConditionedError,
    InvalidInputError,
    ResourceBudgetError,
    UseRefineError,
)
from src.gauss import (
    Gaussian,
    GaussianMixture,
    as_mixture,
    isserlis_noncentral_batch,
    mixture_total_covariance,
    sample,
)
from src.master import master_expectation_batch
from src.net_utils import GluSpec, MlpSpec, network_kind

RIDGE_START = 1e-9
RIDGE_MAX = 1e-3
RIDGE_GROWTH = 10.0
Z_DIM_BUDGET = 20_000
MIXTURE_QUADRATIC_MAX_D = 32
# Rows of z-covariance entries evaluated per Isserlis batch.
Z_MOMENT_CHUNK = 250_000

Network = Union[MlpSpec, GluSpec]
InputDistribution = Union[Gaussian, GaussianMixture]


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


@dataclass
class LinearApproximant:
    """g(x) = beta^T x + alpha."""

    alpha: np.ndarray
    beta: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        self.beta = np.array(self.beta, dtype=np.float64, ndmin=2)
        if self.beta.shape[1] != self.alpha.size:
            _fail(f"beta has shape {self.beta.shape} but alpha has length {self.alpha.size}.")
        if not (np.all(np.isfinite(self.alpha)) and np.all(np.isfinite(self.beta))):
            _fail("LinearApproximant has non-finite coefficients.")

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    @property
    def outputs(self) -> int:
        return self.alpha.size

    def predict(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.beta + self.alpha


@dataclass
class QuadraticApproximant:
    """g_k(x) = x^T q_k x + beta[:, k]^T x + gamma_k."""

    gamma: np.ndarray
    beta: np.ndarray
    q: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gamma = np.array(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.array(self.beta, dtype=np.float64, ndmin=2)
        self.q = np.array(self.q, dtype=np.float64, ndmin=3)
        o, d = self.gamma.size, self.beta.shape[0]
        if self.beta.shape != (d, o) or self.q.shape != (o, d, d):
            _fail(f"Inconsistent shapes: gamma {self.gamma.shape}, beta {self.beta.shape}, q {self.q.shape}.")
        if not all(np.all(np.isfinite(a)) for a in (self.gamma, self.beta, self.q)):
            _fail("QuadraticApproximant has non-finite coefficients.")
        if np.abs(self.q - self.q.transpose(0, 2, 1)).max(initial=0.0) > 1e-10:
            _fail("Quadratic coefficient matrices must be symmetric.")

    @property
    def d(self) -> int:
        return self.beta.shape[0]

    @property
    def outputs(self) -> int:
        return self.gamma.size

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.einsum("ni,kij,nj->nk", x, self.q, x) + x @ self.beta + self.gamma

    def to_z_coefficients(self) -> np.ndarray:
        """(D, o) coefficients on z = [x, x_i x_j (i <= j)]."""
        ii, jj = z_pairs(self.d)
        pair = np.where((ii == jj)[:, None], self.q[:, ii, jj].T, 2.0 * self.q[:, ii, jj].T)
        return np.vstack([self.beta, pair])

    @classmethod
    def from_z_coefficients(cls, coef: np.ndarray, gamma: np.ndarray, d: int, metadata=None) -> "QuadraticApproximant":
        """Repack OLS coefficients on z into (gamma, beta, q); x_i x_j (i < j) splits evenly over q_ij, q_ji."""
        coef = np.asarray(coef, dtype=np.float64)
        ii, jj = z_pairs(d)
        o = coef.shape[1]
        pair = coef[d:]
        q = np.zeros((o, d, d))
        off = ii != jj
        q[:, ii[~off], jj[~off]] = pair[~off].T
        q[:, ii[off], jj[off]] = 0.5 * pair[off].T
        q[:, jj[off], ii[off]] = 0.5 * pair[off].T
        return cls(gamma=gamma, beta=coef[:d], q=q, metadata=dict(metadata or {}))


@dataclass(frozen=True)
class ZMoments:
    """Mean and covariance of z = [x, x_i x_j (i <= j)]."""

    mean_z: np.ndarray
    cov_z: np.ndarray


@dataclass(frozen=True)
class PreactivationStats:
    """Moments of preactivations y = w x + b (and the GLU value branch z = v x + c)."""

    mean: np.ndarray
    cov: np.ndarray
    cross_x: np.ndarray
    value_mean: np.ndarray = None
    value_cov: np.ndarray = None
    value_cross_x: np.ndarray = None
    gate_value_cov: np.ndarray = None


def z_pairs(d: int) -> Tuple[np.ndarray, np.ndarray]:
    """Upper-triangle index pairs (i <= j) in lexicographic order."""
    return np.triu_indices(d)


def z_dimension(d: int) -> int:
    return d + d * (d + 1) // 2


def z_features(x) -> np.ndarray:
    """(n, d) -> (n, D) with x first, then x_i x_j for i <= j."""
    x = np.asarray(x, dtype=np.float64)
    ii, jj = z_pairs(x.shape[1])
    return np.hstack([x, x[:, ii] * x[:, jj]])


def _check_budget(d: int, max_dim: int) -> int:
    dim = z_dimension(d)
    if dim > max_dim:
        message = f"z dimension D={dim} exceeds the budget of {max_dim}."
        logging.error(message)
        raise ResourceBudgetError(message, dim=dim)
    return dim


def _check_dims(net: Network, dist: InputDistribution) -> GaussianMixture:
    network_kind(net)
    mixture = as_mixture(dist)
    if mixture.dim != net.d:
        _fail(f"Input dimension {mixture.dim} does not match network input {net.d}.")
    return mixture


def preactivation_gaussians(net: Network, input: Gaussian) -> PreactivationStats:
    """
    Joint Gaussian statistics of the hidden preactivations.

    Returns mean w mu + b, covariance w Sigma w^T and cross-covariance w Sigma with x;
    for a GLU also the value branch v x + c and its covariance with the gate.
    """
    if not isinstance(input, Gaussian):
        _fail("preactivation_gaussians expects a single Gaussian.")
    if input.dim != net.d:
        _fail(f"Input dimension {input.dim} does not match network input {net.d}.")
    mu, sigma = input.mean, input.cov
    if isinstance(net, MlpSpec):
        cross = net.w1 @ sigma
        return PreactivationStats(mean=net.w1 @ mu + net.b1, cov=cross @ net.w1.T, cross_x=cross)
    if isinstance(net, GluSpec):
        cross = net.w @ sigma
        value_cross = net.v @ sigma
        return PreactivationStats(
            mean=net.w @ mu + net.b,
            cov=cross @ net.w.T,
            cross_x=cross,
            value_mean=net.v @ mu + net.c,
            value_cov=value_cross @ net.v.T,
            value_cross_x=value_cross,
            gate_value_cov=cross @ net.v.T,
        )
    _fail(f"Unsupported network type {type(net).__name__}.")


def _gate_moments(act, stats: PreactivationStats, kmax: int):
    var = np.clip(np.diag(stats.cov), 0.0, None)
    return var, act_moments(act, kmax, stats.mean, np.sqrt(var))


def _linear_moments(net: Network, comp: Gaussian):
    """E[f] (o,), Cov(x, f) (d, o) and the number of ReLU subgradient fallbacks under one component."""
    stats = preactivation_gaussians(net, comp)
    if isinstance(net, MlpSpec):
        sigma = np.sqrt(np.clip(np.diag(stats.cov), 0.0, None))
        mean_act = act_means(net.act, stats.mean, sigma)
        deriv = act_deriv_means(net.act, stats.mean, sigma)
        mean_f = net.w2 @ mean_act + net.b2
        cov_fx = (net.w2 * deriv) @ stats.cross_x
        return mean_f, cov_fx.T, int(np.count_nonzero(subgradient_points(net.act, stats.mean, sigma)))

    h, d = net.hidden, net.d
    var, moments = _gate_moments(net.act, stats, 2)
    value_var = np.diag(stats.value_cov)
    gate_value = np.diag(stats.gate_value_cov)
    mean_glu = master_expectation_batch(
        stats.mean, var, stats.value_mean[:, None], gate_value[:, None], value_var[:, None, None], net.act, moments
    )
    # Rows (i, j): E[act(y_i) z_i x_j].
    i, j = np.repeat(np.arange(h), d), np.tile(np.arange(d), h)
    mu = comp.mean
    cov_yy = np.empty((h * d, 2, 2))
    cov_yy[:, 0, 0] = value_var[i]
    cov_yy[:, 0, 1] = cov_yy[:, 1, 0] = stats.value_cross_x[i, j]
    cov_yy[:, 1, 1] = comp.cov[j, j]
    raw = master_expectation_batch(
        stats.mean[i],
        var[i],
        np.stack([stats.value_mean[i], mu[j]], axis=1),
        np.stack([gate_value[i], stats.cross_x[i, j]], axis=1),
        cov_yy,
        net.act,
        moments[i],
    )
    cov_glu_x = raw.reshape(h, d) - mean_glu[:, None] * mu[None, :]
    mean_f = net.w_out @ mean_glu + net.b_out
    return mean_f, (net.w_out @ cov_glu_x).T, 0


def _pair_moment_cov(comp: Gaussian):
    ii, jj = z_pairs(comp.dim)
    return ii, jj, comp.cov[ii, jj] + comp.mean[ii] * comp.mean[jj]


def _quadratic_cross(net: Network, comp: Gaussian) -> np.ndarray:
    """Cov(x_k x_l, f) for k <= l, shape (P, o)."""
    stats = preactivation_gaussians(net, comp)
    ii, jj, pair_mean = _pair_moment_cov(comp)
    h, p = net.hidden, ii.size
    rows_i = np.repeat(np.arange(h), p)
    k, l = np.tile(ii, h), np.tile(jj, h)
    mu, sigma = comp.mean, comp.cov

    if isinstance(net, MlpSpec):
        var, moments = _gate_moments(net.act, stats, 2)
        cov_yy = np.empty((h * p, 2, 2))
        cov_yy[:, 0, 0] = sigma[k, k]
        cov_yy[:, 0, 1] = cov_yy[:, 1, 0] = sigma[k, l]
        cov_yy[:, 1, 1] = sigma[l, l]
        raw = master_expectation_batch(
            stats.mean[rows_i],
            var[rows_i],
            np.stack([mu[k], mu[l]], axis=1),
            np.stack([stats.cross_x[rows_i, k], stats.cross_x[rows_i, l]], axis=1),
            cov_yy,
            net.act,
            moments[rows_i],
        ).reshape(h, p)
        cov_hidden = raw - moments[:, 0][:, None] * pair_mean[None, :]
        return (net.w2 @ cov_hidden).T

    var, moments = _gate_moments(net.act, stats, 3)
    value_var = np.diag(stats.value_cov)
    gate_value = np.diag(stats.gate_value_cov)
    mean_glu = master_expectation_batch(
        stats.mean, var, stats.value_mean[:, None], gate_value[:, None], value_var[:, None, None], net.act, moments
    )
    cov_yy = np.empty((h * p, 3, 3))
    cov_yy[:, 0, 0] = value_var[rows_i]
    cov_yy[:, 0, 1] = cov_yy[:, 1, 0] = stats.value_cross_x[rows_i, k]
    cov_yy[:, 0, 2] = cov_yy[:, 2, 0] = stats.value_cross_x[rows_i, l]
    cov_yy[:, 1, 1] = sigma[k, k]
    cov_yy[:, 1, 2] = cov_yy[:, 2, 1] = sigma[k, l]
    cov_yy[:, 2, 2] = sigma[l, l]
    raw = master_expectation_batch(
        stats.mean[rows_i],
        var[rows_i],
        np.stack([stats.value_mean[rows_i], mu[k], mu[l]], axis=1),
        np.stack([gate_value[rows_i], stats.cross_x[rows_i, k], stats.cross_x[rows_i, l]], axis=1),
        cov_yy,
        net.act,
        moments[rows_i],
    ).reshape(h, p)
    cov_hidden = raw - mean_glu[:, None] * pair_mean[None, :]
    return (net.w_out @ cov_hidden).T


def ridge_solve(a: np.ndarray, b: np.ndarray, ridge: float = RIDGE_START, ridge_max: float = RIDGE_MAX):
    """
    Solve (a + lam * mean(diag a) * I) x = b, escalating lam on Cholesky failure.

    Returns:
        tuple: (solution, final lam).

    Raises:
        IllConditionedError: If the system stays singular at ridge_max.
    """
    a = 0.5 * (a + a.T)
    scale = float(np.mean(np.diag(a))) if a.size else 1.0
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    eye = np.eye(a.shape[0])
    lam = ridge
    while lam <= ridge_max * (1.0 + 1e-9):
        try:
            factor = linalg.cho_factor(a + lam * scale * eye)
            if lam != ridge:
                logging.warning(f"Ridge escalated to {lam:.1e} to solve the covariance system.")
            return linalg.cho_solve(factor, b), lam
        except linalg.LinAlgError:
            lam *= RIDGE_GROWTH
    condition = float(np.linalg.cond(a))
    message = f"Covariance system is ill-conditioned (condition estimate {condition:.3e}) even with ridge {ridge_max:.1e}."
    logging.error(message)
    raise IllConditionedError(message, condition=condition, ridge=ridge_max)


def _solve_mixture(weights, feature_means, feature_covs, output_means, cross_covs, ridge):
    """OLS of outputs on features under a mixture; returns (coef, intercept, lam)."""
    cov = mixture_total_covariance(feature_means, feature_means, feature_covs, weights)
    cross = mixture_total_covariance(feature_means, output_means, cross_covs, weights)
    coef, lam = ridge_solve(cov, cross, ridge=ridge)
    mean_feat = weights @ np.stack(feature_means)
    mean_out = weights @ np.stack(output_means)
    return coef, mean_out - coef.T @ mean_feat, lam


def linear_approx(net: Network, input: InputDistribution, ridge: float = RIDGE_START) -> LinearApproximant:
    """Least-squares affine approximant of an MLP or GLU."""
    mixture = _check_dims(net, input)
    means, covs, out_means, crosses = [], [], [], []
    subgradient = 0
    for comp in mixture.components:
        mean_f, cov_xf, hits = _linear_moments(net, comp)
        subgradient += hits
        means.append(comp.mean)
        covs.append(comp.cov)
        out_means.append(mean_f)
        crosses.append(cov_xf)
    beta, alpha, lam = _solve_mixture(mixture.weights, means, covs, out_means, crosses, ridge)
    logging.info(f"Fitted linear approximant ({network_kind(net)}, {mixture.n_components} components, ridge {lam:.1e}).")
    return LinearApproximant(
        alpha=alpha,
        beta=beta,
        metadata={
            "kind": "linear",
            "ridge": lam,
            "components": mixture.n_components,
            "relu_subgradient": subgradient,
        },
    )


def linear_approx_mlp(net: MlpSpec, input: InputDistribution, ridge: float = RIDGE_START) -> LinearApproximant:
    """
    beta = Cov[x]^-1 Cov[x, f], alpha = E[f] - beta^T E[x] for an MLP.

    Cov(f, x) per component is w2 diag(E[act'(y)]) w1 Sigma (Stein's lemma).
    """
    if not isinstance(net, MlpSpec):
        raise TypeError("linear_approx_mlp expects an MlpSpec.")
    return linear_approx(net, input, ridge)


def linear_approx_glu(net: GluSpec, input: InputDistribution, ridge: float = RIDGE_START) -> LinearApproximant:
    """Affine approximant of a GLU; entries via the master theorem with n = 1, 2."""
    if not isinstance(net, GluSpec):
        raise TypeError("linear_approx_glu expects a GluSpec.")
    return linear_approx(net, input, ridge)


def z_moments(input: Gaussian, max_dim: int = Z_DIM_BUDGET) -> ZMoments:
    """
    Mean and covariance of z under a Gaussian, from noncentral Isserlis moments.

    Raises:
        ResourceBudgetError: If D = d + d(d+1)/2 exceeds max_dim.
    """
    if not isinstance(input, Gaussian):
        _fail("z_moments expects a single Gaussian.")
    d = input.dim
    dim = _check_budget(d, max_dim)
    ii, jj = z_pairs(d)
    mu, sigma = input.mean, input.cov
    groups = [np.arange(d)[:, None], np.stack([ii, jj], axis=1)]
    mean_z = np.concatenate([mu, sigma[ii, jj] + mu[ii] * mu[jj]])
    offsets = [0, d]
    cov_z = np.empty((dim, dim))
    for ga, oa in zip(groups, offsets):
        for gb, ob in zip(groups, offsets):
            nb = gb.shape[0]
            step = max(1, Z_MOMENT_CHUNK // nb)
            for start in range(0, ga.shape[0], step):
                block = ga[start:start + step]
                idx = np.concatenate(
                    [np.repeat(block, nb, axis=0), np.tile(gb, (block.shape[0], 1))], axis=1
                )
                second = isserlis_noncentral_batch(mu[idx], sigma[idx[:, :, None], idx[:, None, :]])
                rows = slice(oa + start, oa + start + block.shape[0])
                cols = slice(ob, ob + nb)
                cov_z[rows, cols] = second.reshape(block.shape[0], nb) - np.outer(mean_z[rows], mean_z[cols])
    return ZMoments(mean_z=mean_z, cov_z=0.5 * (cov_z + cov_z.T))


def cov_z_standard_fast(d: int) -> np.ndarray:
    """
    Diagonal of Cov[z] under N(0, I): 1 for x_i, 2 for x_i^2, 1 for x_i x_j (i < j).

    Off-diagonal entries are all zero, so the OLS solve is elementwise division.
    """
    if not isinstance(d, (int, np.integer)) or d < 1:
        _fail(f"Dimension must be a positive integer, got {d!r}.")
    ii, jj = z_pairs(d)
    return np.concatenate([np.ones(d), np.where(ii == jj, 2.0, 1.0)])


def quadratic_approx(
    net: Network,
    input: InputDistribution,
    ridge: float = RIDGE_START,
    max_dim: int = Z_DIM_BUDGET,
    mixture_max_d: int = MIXTURE_QUADRATIC_MAX_D,
) -> QuadraticApproximant:
    """Least-squares quadratic approximant of an MLP or GLU."""
    mixture = _check_dims(net, input)
    d = net.d
    _check_budget(d, max_dim)
    if mixture.n_components > 1 and d > mixture_max_d:
        message = (
            f"Closed-form mixture quadratic is limited to d <= {mixture_max_d} (got d={d}); "
            "fit under N(0, I) and use refine_quadratic."
        )
        logging.error(message)
        raise UseRefineError(message, dim=z_dimension(d))

    if mixture.n_components == 1 and mixture.components[0].is_standard():
        comp = mixture.components[0]
        mean_f, cov_xf, subgradient = _linear_moments(net, comp)
        cross = np.vstack([cov_xf, _quadratic_cross(net, comp)])
        coef = cross / cov_z_standard_fast(d)[:, None]
        ii, jj = z_pairs(d)
        mean_z = np.concatenate([np.zeros(d), (ii == jj).astype(np.float64)])
        gamma = mean_f - coef.T @ mean_z
        logging.info(f"Fitted quadratic approximant under N(0, I) with the diagonal fast path (D={coef.shape[0]}).")
        metadata = {
            "kind": "quadratic",
            "fast_path": True,
            "ridge": 0.0,
            "components": 1,
            "relu_subgradient": subgradient,
        }
        return QuadraticApproximant.from_z_coefficients(coef, gamma, d, metadata)

    means, covs, out_means, crosses = [], [], [], []
    subgradient = 0
    for comp in mixture.components:
        zm = z_moments(comp, max_dim=max_dim)
        mean_f, cov_xf, hits = _linear_moments(net, comp)
        subgradient += hits
        means.append(zm.mean_z)
        covs.append(zm.cov_z)
        out_means.append(mean_f)
        crosses.append(np.vstack([cov_xf, _quadratic_cross(net, comp)]))
    coef, gamma, lam = _solve_mixture(mixture.weights, means, covs, out_means, crosses, ridge)
    logging.info(
        f"Fitted quadratic approximant ({network_kind(net)}, {mixture.n_components} components, "
        f"D={coef.shape[0]}, ridge {lam:.1e})."
    )
    metadata = {
        "kind": "quadratic",
        "fast_path": False,
        "ridge": lam,
        "components": mixture.n_components,
        "relu_subgradient": subgradient,
    }
    return QuadraticApproximant.from_z_coefficients(coef, gamma, d, metadata)


def quadratic_approx_mlp(net: MlpSpec, input: InputDistribution, **kwargs) -> QuadraticApproximant:
    """
    Quadratic approximant of an MLP; Cov(z, f) entries E[act(y_i) x_k x_l] come from
    the master theorem with n = 2.
    """
    if not isinstance(net, MlpSpec):
        raise TypeError("quadratic_approx_mlp expects an MlpSpec.")
    return quadratic_approx(net, input, **kwargs)


def quadratic_approx_glu(net: GluSpec, input: InputDistribution, **kwargs) -> QuadraticApproximant:
    """Quadratic approximant of a GLU; entries E[act(y_i) z_i x_k x_l] use n = 3."""
    if not isinstance(net, GluSpec):
        raise TypeError("quadratic_approx_glu expects a GluSpec.")
    return quadratic_approx(net, input, **kwargs)


def mlp_mean_standard(net: MlpSpec) -> np.ndarray:
    """E[f(z)] for z ~ N(0, I): w2 E[act(b1 + s u)] + b2 with s the row norms of w1."""
    s = np.linalg.norm(net.w1, axis=1)
    return net.w2 @ act_means(net.act, net.b1, s) + net.b2


def _whitening(z: np.ndarray):
    mean = z.mean(axis=0)
    cov = np.cov(z, rowvar=False)
    cov = 0.5 * (cov + cov.T) + RIDGE_START * max(float(np.mean(np.diag(cov))), 1e-12) * np.eye(cov.shape[0])
    return mean, np.linalg.cholesky(cov)


def refine_quadratic(
    init: QuadraticApproximant,
    net: Network,
    input: InputDistribution,
    steps: int = 2000,
    batch: int = 256,
    seed: int = 0,
    step_size: float = 0.05,
    momentum: float = 0.9,
    pilot: int = None,
    holdout: int = 20_000,
) -> QuadraticApproximant:
    """
    Stochastic least-squares refinement of a quadratic approximant on mixture samples.

    Minibatch SGD with momentum on 0.5 * E||f(x) - g(x)||^2 in whitened z coordinates
    (whitening estimated once from a pilot sample), averaging iterates over the final
    half of the steps. The objective is convex in the coefficients, so the fixed point
    is the least-squares quadratic for the mixture.

    Args:
        init (QuadraticApproximant): Starting coefficients, e.g. the N(0, I) closed form.
        net: MlpSpec or GluSpec being approximated.
        input: Target distribution.
        steps (int): Gradient steps.
        batch (int): Minibatch size.
        seed (int): Seed for pilot, minibatch and held-out samples.
        step_size (float): SGD learning rate.
        momentum (float): SGD momentum.
        pilot (int): Pilot sample size for whitening; default max(20 D, 4096).
        holdout (int): Held-out sample size for the FVU guard.

    Returns:
        QuadraticApproximant: Refined coefficients (the initial ones if refinement did not
        improve held-out FVU by more than noise).

    Raises:
        DivergenceError: If the loss stays above 10x its initial value for 100 steps.
    """
    if torch is None:
        logging.error("PyTorch is required for refine_quadratic.")
        raise ImportError("PyTorch is not installed.")
    mixture = _check_dims(net, input)
    if init.d != net.d or init.outputs != net.outputs:
        _fail(f"Approximant shape (d={init.d}, o={init.outputs}) does not match network (d={net.d}, o={net.outputs}).")
    if steps < 0 or batch < 1 or step_size <= 0:
        _fail(f"Invalid refinement settings: steps={steps}, batch={batch}, step_size={step_size}.")

    d = net.d
    pilot = pilot or max(20 * z_dimension(d), 4096)
    z_mean, chol = _whitening(z_features(sample(mixture, pilot, seed=[seed, 0])))

    def whiten(x):
        return linalg.solve_triangular(chol, (z_features(x) - z_mean).T, lower=True).T

    coef = init.to_z_coefficients()
    a = torch.tensor(chol.T @ coef, dtype=torch.float64, requires_grad=True)
    c = torch.tensor(init.gamma + coef.T @ z_mean, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.SGD([a, c], lr=step_size, momentum=momentum)

    avg_a = torch.zeros_like(a)
    avg_c = torch.zeros_like(c)
    n_avg = 0
    first_loss = None
    strikes = 0
    for step in range(steps):
        x = sample(mixture, batch, seed=[seed, 1, step])
        u = torch.from_numpy(whiten(x))
        target = torch.from_numpy(net.forward(x))
        loss = 0.5 * ((u @ a + c - target) ** 2).sum(dim=1).mean()
        value = float(loss.item())
        if not np.isfinite(value):
            message = f"Refinement loss became non-finite at step {step}; reduce the step size."
            logging.error(message)
            raise DivergenceError(message)
        if first_loss is None:
            first_loss = max(value, 1e-300)
        strikes = strikes + 1 if value > 10.0 * first_loss else 0
        if strikes >= 100:
            message = f"Refinement diverged (loss {value:.3e} vs initial {first_loss:.3e}); reduce the step size."
            logging.error(message)
            raise DivergenceError(message)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step >= steps // 2:
            n_avg += 1
            with torch.no_grad():
                avg_a += (a - avg_a) / n_avg
                avg_c += (c - avg_c) / n_avg
        if step % 500 == 0:
            logging.debug(f"refine step {step}: loss {value:.6e}")

    if n_avg == 0:
        return QuadraticApproximant(init.gamma.copy(), init.beta.copy(), init.q.copy(), dict(init.metadata))

    a_hat = avg_a.detach().numpy()
    coef_hat = linalg.solve_triangular(chol.T, a_hat, lower=False)
    gamma_hat = avg_c.detach().numpy() - coef_hat.T @ z_mean
    refined = QuadraticApproximant.from_z_coefficients(coef_hat, gamma_hat, d, dict(init.metadata))

    x_hold = sample(mixture, holdout, seed=[seed, 2])
    f_hold = net.forward(x_hold)
    fvu_init = fraction_of_variance_unexplained(f_hold, init.predict(x_hold))
    fvu_refined = fraction_of_variance_unexplained(f_hold, refined.predict(x_hold))
    logging.info(f"Refinement: held-out FVU {fvu_init:.4e} -> {fvu_refined:.4e} over {steps} steps.")
    if fvu_refined > fvu_init + 1e-3:
        logging.warning("Refinement did not improve held-out FVU; keeping the initial coefficients.")
        kept = QuadraticApproximant(init.gamma.copy(), init.beta.copy(), init.q.copy(), dict(init.metadata))
        kept.metadata.update({"refined": False, "holdout_fvu": fvu_init})
        return kept
    refined.metadata.update(
        {"refined": True, "steps": steps, "batch": batch, "seed": seed, "holdout_fvu": fvu_refined}
    )
    return refined
