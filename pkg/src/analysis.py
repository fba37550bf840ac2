"""
analysis.py

Monte-Carlo evaluation and inspection of polynomial approximants.
- FVU, KL(net || approximant) and accuracy on seeded samples
- Eigendecomposition of quadratic interaction matrices
- SVD projections that ablate the top directions of a linear approximant
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import linalg
from scipy.special import log_softmax

from src.errors import FVUUndefinedError, InvalidInputError
from src.gauss import Gaussian, GaussianMixture, as_mixture, sample

DEFAULT_EVAL_SAMPLES = 200_000
MIN_EVAL_SAMPLES = 1_000
JACKKNIFE_SPLITS = 10
PROJECTION_ATOL = 1e-10

# Column order of a metrics CSV row.
METRICS_COLUMNS = ("step", "kind", "fvu", "kl", "acc_net", "acc_approx", "n", "seed")


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


@dataclass(frozen=True)
class EvalReport:
    fvu: float
    kl: float
    accuracy_net: float
    accuracy_approx: float
    n_samples: int
    seed: int
    fvu_se: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv_row(self, step: int, kind: str) -> list:
        return [step, kind, self.fvu, self.kl, self.accuracy_net, self.accuracy_approx, self.n_samples, self.seed]


@dataclass(frozen=True)
class Spectrum:
    """Eigenpairs of q_k; eigenvectors are the columns, ordered by |eigenvalue| descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    class_index: int

    def top(self, k: int) -> "Spectrum":
        return Spectrum(self.eigenvalues[:k].copy(), self.eigenvectors[:, :k].copy(), self.class_index)

    def reconstruct(self) -> np.ndarray:
        return (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T


@dataclass(frozen=True)
class AttackProjection:
    """P_k = I - U_k U_k^T with U_k the ablated input-space singular directions (columns)."""

    matrix: np.ndarray
    k: int
    directions: np.ndarray


def _totals(f: np.ndarray, g: np.ndarray):
    err = ((f - g) ** 2).sum(axis=1)
    centered = ((f - f.mean(axis=0)) ** 2).sum(axis=1)
    return err, centered


def _check_variance(f: np.ndarray):
    if f.shape[0] == 0 or np.all(f == f[:1]):
        message = "Network outputs have zero variance on the evaluation sample; FVU is undefined."
        logging.error(message)
        raise FVUUndefinedError(message)


def fraction_of_variance_unexplained(f, g) -> float:
    """sum ||f - g||^2 / sum ||f - mean f||^2 over rows."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape or f.ndim != 2:
        _fail(f"Output arrays must share a 2-D shape, got {f.shape} and {g.shape}.")
    _check_variance(f)
    err, centered = _totals(f, g)
    return float(err.sum() / centered.sum())


def fvu_jackknife_se(f, g, splits: int = JACKKNIFE_SPLITS) -> float:
    """Delete-one-group jackknife standard error of the FVU over contiguous splits."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    groups = np.array_split(np.arange(f.shape[0]), splits)
    estimates = []
    for held in groups:
        keep = np.ones(f.shape[0], dtype=bool)
        keep[held] = False
        estimates.append(fraction_of_variance_unexplained(f[keep], g[keep]))
    estimates = np.asarray(estimates)
    return float(np.sqrt((splits - 1) / splits * ((estimates - estimates.mean()) ** 2).sum()))


def kl_per_sample(f, g) -> np.ndarray:
    """KL(softmax(f) || softmax(g)) per row, natural log."""
    log_p = log_softmax(np.asarray(f, dtype=np.float64), axis=1)
    log_q = log_softmax(np.asarray(g, dtype=np.float64), axis=1)
    return (np.exp(log_p) * (log_p - log_q)).sum(axis=1)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        _fail(f"accuracy expects (n, o) logits and n labels, got {logits.shape} and {labels.shape}.")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _resolve_labels(labels, x: np.ndarray, components: np.ndarray) -> np.ndarray:
    if labels is None:
        return components
    if callable(labels):
        return np.asarray(labels(x))
    return np.asarray(labels)


def evaluate(
    net,
    approx,
    dist: Union[Gaussian, GaussianMixture],
    n: int = DEFAULT_EVAL_SAMPLES,
    seed: int = 0,
    labels: Optional[Union[Callable, np.ndarray]] = None,
) -> EvalReport:
    """
    Compare a network with an approximant on n seeded samples from dist.

    Args:
        net: MlpSpec or GluSpec.
        approx: LinearApproximant or QuadraticApproximant.
        dist: Gaussian or GaussianMixture to sample from.
        n (int): Sample count, at least MIN_EVAL_SAMPLES.
        seed (int): Sampling seed.
        labels: Class labels for the accuracies; an array of n labels or a callable on
            the samples. Defaults to the mixture component index.

    Returns:
        EvalReport: FVU (with jackknife SE), KL(net || approx) and accuracies.

    Raises:
        InvalidInputError: If n is too small or shapes disagree.
        FVUUndefinedError: If the network output is constant on the sample.
    """
    if not isinstance(n, (int, np.integer)) or n < MIN_EVAL_SAMPLES:
        _fail(f"Evaluation needs at least {MIN_EVAL_SAMPLES} samples, got {n!r}.")
    mixture = as_mixture(dist)
    if mixture.dim != net.d or approx.d != net.d:
        _fail(f"Dimension mismatch: dist {mixture.dim}, net {net.d}, approximant {approx.d}.")
    x, components = sample(mixture, int(n), seed=seed, return_labels=True)
    f = net.forward(x)
    g = approx.predict(x)
    if f.shape != g.shape:
        _fail(f"Network outputs {f.shape} and approximant outputs {g.shape} differ.")
    target = _resolve_labels(labels, x, components)

    fvu = fraction_of_variance_unexplained(f, g)
    report = EvalReport(
        fvu=fvu,
        kl=float(kl_per_sample(f, g).mean()),
        accuracy_net=accuracy(f, target),
        accuracy_approx=accuracy(g, target),
        n_samples=int(n),
        seed=int(seed),
        fvu_se=fvu_jackknife_se(f, g),
    )
    logging.info(f"Evaluated on {n} samples (seed {seed}): FVU {report.fvu:.4e} +/- {report.fvu_se:.1e}, KL {report.kl:.4e}")
    return report


def quadratic_spectrum(approx, class_index: int) -> Spectrum:
    """
    Symmetric eigendecomposition of q[class_index].

    Eigenvalues are sorted by magnitude (descending); each eigenvector's first
    nonzero component is positive.
    """
    q = np.asarray(approx.q, dtype=np.float64)
    if not isinstance(class_index, (int, np.integer)) or not 0 <= class_index < q.shape[0]:
        _fail(f"class_index {class_index!r} out of range for {q.shape[0]} outputs.")
    matrix = q[class_index]
    if not np.all(np.isfinite(matrix)):
        _fail(f"q[{class_index}] has non-finite entries.")
    values, vectors = linalg.eigh(0.5 * (matrix + matrix.T))
    order = np.argsort(-np.abs(values), kind="stable")
    values, vectors = values[order], vectors[:, order]
    for i in range(vectors.shape[1]):
        nonzero = np.flatnonzero(np.abs(vectors[:, i]) > 1e-12)
        if nonzero.size and vectors[nonzero[0], i] < 0:
            vectors[:, i] = -vectors[:, i]
    return Spectrum(eigenvalues=values, eigenvectors=vectors, class_index=int(class_index))


def coefficient_rank(beta: np.ndarray, rtol: Optional[float] = None) -> int:
    s = np.linalg.svd(beta, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    rtol = max(beta.shape) * np.finfo(np.float64).eps if rtol is None else rtol
    return int(np.sum(s > rtol * s[0]))


def svd_attack_projection(approx, k: int) -> AttackProjection:
    """
    Projection removing the top-k left singular directions of beta.

    k = 0 returns the identity.

    Raises:
        InvalidInputError: If k is negative or exceeds rank(beta).
    """
    beta = np.asarray(approx.beta, dtype=np.float64)
    d = beta.shape[0]
    rank = coefficient_rank(beta)
    if not isinstance(k, (int, np.integer)) or k < 0 or k > rank:
        _fail(f"k={k!r} must be between 0 and rank(beta)={rank}.")
    u, _, _ = np.linalg.svd(beta, full_matrices=False)
    directions = u[:, :k]
    matrix = np.eye(d) - directions @ directions.T
    matrix = 0.5 * (matrix + matrix.T)
    return AttackProjection(matrix=matrix, k=int(k), directions=directions)


def apply_attack(inputs, proj: AttackProjection) -> np.ndarray:
    """Replace every row x with P_k x."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != proj.matrix.shape[0]:
        _fail(f"Inputs of shape {x.shape} do not match a {proj.matrix.shape[0]}-dim projection.")
    return x @ proj.matrix


def attack_accuracy_curve(
    net,
    linear,
    dist: Union[Gaussian, GaussianMixture],
    ks: Sequence[int],
    n: int = 20_000,
    seed: int = 0,
    approximants: Optional[Dict[str, object]] = None,
    labels=None,
) -> List[dict]:
    """
    Accuracy of the network (and approximants) under P_k built from the linear approximant.

    All k share one seeded sample. Returns one row per k with keys "k", "net",
    "linear" and one key per extra approximant.
    """
    models = {"linear": linear}
    models.update(approximants or {})
    x, components = sample(as_mixture(dist), int(n), seed=seed, return_labels=True)
    target = _resolve_labels(labels, x, components)
    rows = []
    for k in ks:
        attacked = apply_attack(x, svd_attack_projection(linear, int(k)))
        row = {"k": int(k), "net": accuracy(net.forward(attacked), target)}
        for name, model in models.items():
            row[name] = accuracy(model.predict(attacked), target)
        logging.info(f"Attack k={k}: " + ", ".join(f"{key} {value:.3f}" for key, value in row.items() if key != "k"))
        rows.append(row)
    return rows
