"""Weighted cross-entropy training of a flow with a score-mismatch penalty.

The training objective on a batch with weights w_i (renormalized to sum to
one within the batch) is

    -sum_i w_i log p(y_i) + beta * sqrt(sum_i w_i |grad log rho(y_i) - grad log p(y_i)|^2)

with rho the standard normal reference density. The second term is
differentiated through the input gradient of the model, so its parameter
gradient is a second-order quantity computed on the autodiff tape.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .flow import FlowModel, log_density_tape, tape_parameters

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class Objective:
    """Cross entropy plus ``beta`` times the score-mismatch penalty.

    The reference density is the standard normal, whose score is -y.
    """

    beta: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")

    @staticmethod
    def reference_log_density(y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        return -0.5 * np.sum(y * y, axis=1) - 0.5 * y.shape[1] * np.log(2 * np.pi)

    @staticmethod
    def reference_score(y: np.ndarray) -> np.ndarray:
        return -np.asarray(y, dtype=np.float64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    epochs: int = 100
    n_batches: int = 23
    K: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0 or self.n_batches < 1 or self.K < 1:
            raise ValueError("epochs >= 0, n_batches >= 1 and K >= 1 are required")


@dataclass
class EpochRecord:
    epoch: int
    cross_entropy: float
    penalty_value: float
    wall_time: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def cross_entropy(self) -> np.ndarray:
        return np.array([r.cross_entropy for r in self.records])

    @property
    def penalty(self) -> np.ndarray:
        return np.array([r.penalty_value for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "cross_entropy", "penalty", "wall_time_seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.cross_entropy), repr(r.penalty_value),
                            f"{r.wall_time:.3f}"])

    @classmethod
    def from_csv(cls, path) -> "TrainHistory":
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.append(EpochRecord(int(row["epoch"]), float(row["cross_entropy"]),
                                     float(row["penalty"]), float(row["wall_time_seconds"])))
        return h


def _normalized(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    s = w.sum()
    if not s > 0:
        raise ValueError("batch weights sum to zero")
    return w / s


def weighted_cross_entropy(model: FlowModel, y, weights) -> float:
    from .flow import log_density

    w = _normalized(weights)
    return float(-np.dot(w, log_density(model, y)))


def _score_mismatch(model: FlowModel, y: np.ndarray, params=None, create_graph=False):
    Y = ad.Tensor(y, requires_grad=True)
    lp = log_density_tape(model, Y, params)
    (gy,) = ad.grad(ad.sum(lp), [Y], create_graph=create_graph)
    # reference score is -y
    return lp, ad.Tensor(-y) - gy


def penalty(model: FlowModel, y, weights, objective: Objective) -> float:
    if objective.beta == 0:
        return 0.0
    w = _normalized(weights)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    _, d = _score_mismatch(model, y)
    return float(objective.beta * np.sqrt(np.dot(w, np.sum(d.value ** 2, axis=1))))


def objective_and_gradient(model: FlowModel, y, weights, objective: Objective):
    """Value of cross entropy + penalty and its exact parameter gradient.

    Returns ``(value, grads, parts)`` where ``grads`` is a list aligned with
    ``model.parameters()`` and ``parts`` maps "cross_entropy"/"penalty" to
    their values.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if y.shape[1] != model.n:
        raise ValueError(f"batch dimension {y.shape[1]} does not match model {model.n}")
    w = _normalized(weights)
    params = tape_parameters(model)
    W = ad.Tensor(w)
    if objective.beta > 0:
        lp, d = _score_mismatch(model, y, params, create_graph=True)
        inner = ad.sum(W * ad.sum(d * d, axis=1))
        pen = ad.sqrt(inner) * objective.beta
    else:
        lp = log_density_tape(model, ad.Tensor(y), params)
        pen = None
    bad = ~np.isfinite(lp.value)
    if bad.any():
        raise FloatingPointError(f"non-finite log-density at sample {int(np.argmax(bad))}")
    ce = -ad.sum(W * lp)
    total = ce if pen is None else ce + pen
    value = float(total.value)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite objective value")
    leaves = [t for layer in params for t in layer.values()]
    grads = [g.value for g in ad.grad(total, leaves)]
    parts = {"cross_entropy": float(ce.value),
             "penalty": 0.0 if pen is None else float(pen.value)}
    return value, grads, parts


def stratified_batches(g_coarse, eps_max_neg: float, K: int, n_batches: int,
                       rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches with every g-bin represented in each batch.

    Samples are grouped into K equal bins of [-eps_max_neg, 0) plus one group
    for g >= 0; each group is shuffled and cut into ``n_batches`` slices, and
    batch j collects slice j of every group.
    """
    g = np.asarray(g_coarse, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty dataset")
    groups = []
    neg = np.flatnonzero(g < 0)
    if neg.size:
        if eps_max_neg > 0:
            k = np.floor((g[neg] + eps_max_neg) / eps_max_neg * K).astype(int)
            k = np.clip(k, 0, K - 1)
        else:
            k = np.zeros(neg.size, dtype=int)
        for b in range(K):
            groups.append(neg[k == b])
    groups.append(np.flatnonzero(g >= 0))
    slices = []
    for idx in groups:
        idx = idx.copy()
        rng.shuffle(idx)
        slices.append(np.array_split(idx, n_batches))
    return [np.concatenate([s[j] for s in slices]) for j in range(n_batches)]


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def full_data_metrics(model: FlowModel, y, weights, objective: Objective,
                      chunk: int = 4096) -> tuple[float, float]:
    """Cross entropy and penalty over the whole dataset (chunked)."""
    from .flow import log_density

    w = _normalized(weights)
    y = np.atleast_2d(y)
    lp = np.concatenate([log_density(model, y[i:i + chunk]) for i in range(0, len(y), chunk)])
    ce = float(-np.dot(w, lp))
    if objective.beta == 0:
        return ce, 0.0
    sq = []
    for i in range(0, len(y), chunk):
        with ad.no_grad():
            _, d = _score_mismatch(model, y[i:i + chunk])
        sq.append(np.sum(d.value ** 2, axis=1))
    return ce, float(objective.beta * np.sqrt(np.dot(w, np.concatenate(sq))))


def train(model: FlowModel, dataset, objective: Objective, config: TrainConfig,
          callback: Callable[[int, FlowModel], None] | None = None):
    """Run ADAM over stratified minibatches; the model is updated in place.

    ``dataset`` is a :class:`~romflow.weighting.WeightedDataset` (anything
    with ``y``, ``weight``, ``g_coarse`` and ``eps_max_neg``).
    ``callback(epoch, model)`` is invoked after each epoch. On a non-finite
    objective the parameters are restored to the last good step and
    :class:`TrainingDiverged` is raised carrying the history so far.
    """
    y = np.atleast_2d(np.asarray(dataset.y, dtype=np.float64))
    weights = np.asarray(dataset.weight, dtype=np.float64)
    g_coarse, eps_max_neg = dataset.g_coarse, dataset.eps_max_neg
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    history = TrainHistory()
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        for idx in stratified_batches(g_coarse, eps_max_neg, config.K, config.n_batches, rng):
            if idx.size == 0 or weights[idx].sum() == 0:
                continue
            backup = [p.copy() for p in params]
            try:
                _, grads, _ = objective_and_gradient(model, y[idx], weights[idx], objective)
            except (FloatingPointError, ValueError) as exc:
                for p, b in zip(params, backup):
                    p[...] = b
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            opt.step(grads)
        try:
            ce, pen = full_data_metrics(model, y, weights, objective)
            if not (np.isfinite(ce) and np.isfinite(pen)):
                raise FloatingPointError("non-finite full-data objective")
        except (FloatingPointError, ValueError) as exc:
            for p, b in zip(params, backup):
                p[...] = b
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        history.append(EpochRecord(epoch, ce, pen, time.perf_counter() - t0))
        log.debug("epoch %d  cross entropy %.6f  penalty %.6f", epoch, ce, pen)
        if callback is not None:
            callback(epoch, model)
    return model, history
