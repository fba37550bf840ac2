"""
harness.py

Desk-scale training-dynamics experiments on synthetic Gaussian-mixture classification.
- Seeded reference task (simplex class means, well-conditioned covariances)
- Mixture fitting from labelled data with covariance shrinkage
- Tiny ReLU MLP training (torch, SGD with momentum and decoupled weight decay)
- Per-checkpoint linear/quadratic approximants, FVU/KL sweep, CSV output
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

try:
    import torch
    import torch.nn as nn
except ImportError:
    torch = None

from src.actint import Activation
from src.analysis import DEFAULT_EVAL_SAMPLES, METRICS_COLUMNS, EvalReport, evaluate
from src.approx import (
    MIXTURE_QUADRATIC_MAX_D,
    linear_approx,
    quadratic_approx,
    refine_quadratic,
)
from src.errors import InvalidInputError, TrainingDivergedError
from src.gauss import Gaussian, GaussianMixture, sample
from src.net_utils import MlpSpec, mlp_from_torch

SHRINKAGE_TAU = 0.01
MAX_TASK_DIM = 64


def _fail(message: str):
    logging.error(message)
    raise InvalidInputError(message)


@dataclass(frozen=True)
class TaskSpec:
    """One mixture component per class; train_size = 0 means fresh samples every step."""

    d: int
    classes: int
    mixture: GaussianMixture
    train_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mixture.n_components != self.classes:
            _fail(f"Task has {self.classes} classes but {self.mixture.n_components} mixture components.")
        if self.mixture.dim != self.d:
            _fail(f"Task dimension {self.d} does not match mixture dimension {self.mixture.dim}.")
        if self.d > MAX_TASK_DIM:
            logging.warning(f"Task dimension {self.d} exceeds {MAX_TASK_DIM}; quadratic fits will be slow.")
        if self.train_size < 0:
            _fail(f"train_size must be nonnegative, got {self.train_size}.")


@dataclass(frozen=True)
class TrainConfig:
    hidden: int
    batch: int
    steps: int
    step_size: float
    weight_decay: float
    checkpoint_steps: Tuple[int, ...]
    seed: int = 0
    momentum: float = 0.9
    act: Activation = Activation.RELU
    init_scale: float = 1.0

    def __post_init__(self):
        steps = tuple(int(s) for s in self.checkpoint_steps)
        if self.hidden < 1 or self.batch < 1 or self.steps < 0:
            _fail(f"Invalid training sizes: hidden={self.hidden}, batch={self.batch}, steps={self.steps}.")
        if not self.init_scale > 0.0:
            _fail(f"init_scale must be positive, got {self.init_scale}.")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            _fail(f"checkpoint_steps must be strictly increasing, got {list(steps)}.")
        if steps and (steps[0] < 0 or steps[-1] > self.steps):
            _fail(f"checkpoint_steps must lie in [0, {self.steps}], got {list(steps)}.")
        object.__setattr__(self, "checkpoint_steps", steps)
        object.__setattr__(self, "act", Activation.parse(self.act))


@dataclass(frozen=True)
class Checkpoint:
    step: int
    net: MlpSpec


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    kind: str
    report: EvalReport

    def to_row(self) -> list:
        return self.report.to_csv_row(self.step, self.kind)


def log_spaced_steps(steps: int) -> List[int]:
    """0, then powers of two up to steps, then steps itself."""
    out = [0]
    p = 1
    while p <= steps:
        out.append(p)
        p *= 2
    if out[-1] != steps:
        out.append(steps)
    return out


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def make_reference_task(
    d: int = 16,
    classes: int = 4,
    separation: float = 4.0,
    train_size: int = 0,
    seed: int = 0,
    max_condition: float = 10.0,
) -> TaskSpec:
    """
    Seeded synthetic classification task.

    Class means are the vertices of a regular simplex (pairwise distance separation)
    in a random orientation. Class covariances are the identity outside the span of the
    means; inside it each class gets a random rotation of log-uniform eigenvalues in
    [max_condition^-1/2, max_condition^1/2], so every condition number is at most
    max_condition and all class information lives in the mean span.
    """
    if classes < 1 or classes > d:
        _fail(f"Need 1 <= classes <= d, got classes={classes}, d={d}.")
    if max_condition < 1.0:
        _fail(f"max_condition must be at least 1, got {max_condition}.")
    rng = np.random.default_rng(seed)
    vertices = np.eye(classes) - 1.0 / classes
    basis = _random_orthogonal(rng, d)[:, :classes]
    means = separation / np.sqrt(2.0) * vertices @ basis.T
    m = classes - 1
    span = basis @ np.linalg.qr(vertices[:, :m])[0] if m else np.zeros((d, 0))
    half_log = 0.5 * np.log(max_condition)
    components = []
    for c in range(classes):
        block = np.eye(m)
        if m:
            rot = _random_orthogonal(rng, m)
            block = (rot * np.exp(rng.uniform(-half_log, half_log, size=m))) @ rot.T
        cov = np.eye(d) + span @ (block - np.eye(m)) @ span.T
        components.append(Gaussian(means[c], 0.5 * (cov + cov.T)))

    mixture = GaussianMixture(np.full(classes, 1.0 / classes), tuple(components))
    return TaskSpec(d=d, classes=classes, mixture=mixture, train_size=train_size, seed=seed)


def fit_mixture_from_data(features, labels, tau: float = SHRINKAGE_TAU, classes: Optional[int] = None) -> GaussianMixture:
    """
    Per-class Gaussian fit with shrinkage (1 - tau) S + tau * trace(S) / d * I.

    A class with zero scatter shrinks toward the pooled trace instead.

    Raises:
        InvalidInputError: On shape mismatch or a class without samples.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],) or x.shape[0] == 0:
        _fail(f"Expected (n, d) features and n labels, got {x.shape} and {y.shape}.")
    if not np.issubdtype(y.dtype, np.integer) or np.any(y < 0):
        _fail("Labels must be nonnegative integers.")
    classes = int(y.max()) + 1 if classes is None else int(classes)
    d = x.shape[1]
    pooled = float(np.trace(np.atleast_2d(np.cov(x, rowvar=False, bias=True))))
    weights, components = [], []
    for c in range(classes):
        rows = x[y == c]
        if rows.shape[0] == 0:
            _fail(f"Class {c} has no samples.")
        if rows.shape[0] < d + 1:
            logging.info(f"Class {c} has {rows.shape[0]} samples for d={d}; relying on shrinkage.")
        mean = rows.mean(axis=0)
        centered = rows - mean
        scatter = centered.T @ centered / rows.shape[0]
        trace = float(np.trace(scatter))
        if trace <= 0.0:
            trace = pooled if pooled > 0.0 else 1.0
        cov = (1.0 - tau) * scatter + tau * trace / d * np.eye(d)
        weights.append(rows.shape[0] / x.shape[0])
        components.append(Gaussian(mean, 0.5 * (cov + cov.T)))
    weights = np.asarray(weights)
    return GaussianMixture(weights / weights.sum(), tuple(components))


def _build_module(d: int, cfg: TrainConfig, classes: int) -> "nn.Module":
    acts = {Activation.RELU: nn.ReLU, Activation.GELU: nn.GELU, Activation.IDENTITY: nn.Identity}
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        module = nn.Sequential(nn.Linear(d, cfg.hidden), acts[cfg.act](), nn.Linear(cfg.hidden, classes)).double()
    # First-layer weights only; biases keep the default range.
    with torch.no_grad():
        module[0].weight.mul_(cfg.init_scale)
    return module


def train_mlp(task: TaskSpec, cfg: TrainConfig) -> List[Checkpoint]:
    """
    Train a single-hidden-layer MLP on the task with softmax cross-entropy.

    Args:
        task (TaskSpec): Data distribution and class count.
        cfg (TrainConfig): Architecture, optimizer and checkpoint schedule.

    Returns:
        list[Checkpoint]: Snapshots at cfg.checkpoint_steps (step 0 is the initialization).

    Raises:
        TrainingDivergedError: If the loss becomes non-finite.
    """
    if torch is None:
        logging.error("PyTorch is required for train_mlp.")
        raise ImportError("PyTorch is not installed.")
    model = _build_module(task.d, cfg, task.classes)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.step_size, momentum=cfg.momentum)
    loss_fn = nn.CrossEntropyLoss()

    pool = None
    if task.train_size > 0:
        pool = sample(task.mixture, task.train_size, seed=task.seed, return_labels=True)
    index_rng = np.random.default_rng([cfg.seed, 1])

    wanted = set(cfg.checkpoint_steps)
    checkpoints = []
    for step in range(cfg.steps + 1):
        if step in wanted:
            checkpoints.append(Checkpoint(step=step, net=mlp_from_torch(model, cfg.act)))
        if step == cfg.steps:
            break
        if pool is None:
            x, y = sample(task.mixture, cfg.batch, seed=[cfg.seed, 2, step], return_labels=True)
        else:
            idx = index_rng.integers(task.train_size, size=cfg.batch)
            x, y = pool[0][idx], pool[1][idx]
        logits = model(torch.from_numpy(x))
        loss = loss_fn(logits, torch.from_numpy(y.astype(np.int64)))
        value = float(loss.item())
        if not np.isfinite(value):
            message = f"Training loss became non-finite at step {step}."
            logging.error(message)
            raise TrainingDivergedError(message, step=step)
        optimizer.zero_grad()
        loss.backward()
        with torch.no_grad():
            for p in model.parameters():
                p.mul_(1.0 - cfg.step_size * cfg.weight_decay)
        optimizer.step()
        if step + 1 in wanted:
            logging.info(f"step {step + 1}: loss {value:.4f}")
    return checkpoints


def _checkpoint_metrics(
    task: TaskSpec,
    ckpt: Checkpoint,
    eval_n: int,
    seed: int,
    mixture_max_d: int,
    refine_steps: int,
) -> List[MetricsRecord]:
    net = ckpt.net
    linear = linear_approx(net, task.mixture)
    if task.d <= mixture_max_d:
        quadratic = quadratic_approx(net, task.mixture, mixture_max_d=mixture_max_d)
    else:
        init = quadratic_approx(net, Gaussian.standard(task.d))
        quadratic = refine_quadratic(init, net, task.mixture, steps=refine_steps, seed=seed)
    records = [
        MetricsRecord(ckpt.step, "linear", evaluate(net, linear, task.mixture, n=eval_n, seed=seed)),
        MetricsRecord(ckpt.step, "quadratic", evaluate(net, quadratic, task.mixture, n=eval_n, seed=seed)),
    ]
    logging.info(
        f"checkpoint {ckpt.step}: linear FVU {records[0].report.fvu:.4e}, quadratic FVU {records[1].report.fvu:.4e}"
    )
    return records


def complexity_sweep(
    task: TaskSpec,
    checkpoints: Sequence[Checkpoint],
    eval_n: int = DEFAULT_EVAL_SAMPLES,
    seed: int = 0,
    workers: int = 1,
    mixture_max_d: int = MIXTURE_QUADRATIC_MAX_D,
    refine_steps: int = 2000,
) -> List[MetricsRecord]:
    """
    Fit linear and quadratic approximants per checkpoint and evaluate them on the task mixture.

    Checkpoints are processed by a thread pool; results come back in checkpoint order.

    Returns:
        list[MetricsRecord]: Two records (linear, quadratic) per checkpoint.
    """
    if not checkpoints:
        _fail("complexity_sweep needs at least one checkpoint.")

    def run(ckpt):
        return _checkpoint_metrics(task, ckpt, eval_n, seed, mixture_max_d, refine_steps)

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        results = list(pool.map(run, checkpoints))
    return [record for records in results for record in records]


def find_phase_transition(records: Sequence[MetricsRecord], linear_ratio: float = 2.0, quadratic_ratio: float = 1.3):
    """
    Earliest checkpoint range over which linear FVU grows by linear_ratio while quadratic
    FVU changes by at most quadratic_ratio (either direction) between the range endpoints.

    Returns:
        tuple | None: (start_step, end_step) or None.
    """
    linear = {r.step: r.report.fvu for r in records if r.kind == "linear"}
    quadratic = {r.step: r.report.fvu for r in records if r.kind == "quadratic"}
    steps = sorted(set(linear) & set(quadratic))
    for i, start in enumerate(steps):
        if linear[start] <= 0.0 or quadratic[start] <= 0.0:
            continue
        for end in steps[i + 1:]:
            change = quadratic[end] / quadratic[start]
            if change <= 0.0 or max(change, 1.0 / change) > quadratic_ratio:
                continue
            if linear[end] / linear[start] >= linear_ratio:
                return start, end
    return None



def load_experiment_config(path: str):
    """
    Read a JSON experiment config with sections task, train and sweep.

    Returns:
        tuple: (TaskSpec, TrainConfig, sweep settings dict).
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        logging.error(f"Failed to read experiment config {path}: {e}")
        raise InvalidInputError(f"Failed to read experiment config {path}: {e}")
    for section in ("task", "train"):
        if section not in config:
            _fail(f"Experiment config {path} is missing the '{section}' section.")
    task_cfg, train_cfg = dict(config["task"]), dict(config["train"])
    task = make_reference_task(**task_cfg)
    checkpoints = train_cfg.pop("checkpoint_steps", "log2")
    if checkpoints == "log2":
        checkpoints = log_spaced_steps(int(train_cfg["steps"]))
    train = TrainConfig(checkpoint_steps=tuple(checkpoints), **train_cfg)
    return task, train, dict(config.get("sweep", {}))


def write_metrics_csv(path: str, records: Sequence[MetricsRecord]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for record in records:
            writer.writerow(record.to_row())
    logging.info(f"Wrote {len(records)} metrics rows to {path}")


def run_sweep(config_path: str, out_dir: str, workers: Optional[int] = None) -> List[MetricsRecord]:
    """
    Train on the configured task, save checkpoint bundles and write metrics.csv to out_dir.
    """
    from src.bundle_io import save_distribution, save_net

    task, train, sweep = load_experiment_config(config_path)
    os.makedirs(out_dir, exist_ok=True)
    logging.info(f"Training d={task.d}, classes={task.classes}, hidden={train.hidden} for {train.steps} steps.")
    checkpoints = train_mlp(task, train)
    for ckpt in checkpoints:
        save_net(os.path.join(out_dir, f"checkpoint_{ckpt.step:06d}.bin"), ckpt.net)
    save_distribution(os.path.join(out_dir, "task_mixture.bin"), task.mixture)

    records = complexity_sweep(
        task,
        checkpoints,
        eval_n=int(sweep.get("eval_n", DEFAULT_EVAL_SAMPLES)),
        seed=int(sweep.get("seed", 0)),
        workers=int(workers or sweep.get("workers", 1)),
        mixture_max_d=int(sweep.get("mixture_max_d", MIXTURE_QUADRATIC_MAX_D)),
        refine_steps=int(sweep.get("refine_steps", 2000)),
    )
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records)
    window = find_phase_transition(records)
    if window:
        logging.info(f"Linear FVU rises at least 2x between steps {window[0]} and {window[1]} with quadratic FVU flat.")
    else:
        logging.info("No phase-transition window found in this sweep.")
    return records
