"""Weighted empirical distribution built from reduced-order model samples.

Samples with g_coarse >= 0 share a constant weight c2 carrying total mass
theta. Samples in the acceptance band [-eps_max, 0) get a half-normal weight
c1 * f(g; sigma) carrying mass 1 - theta, with c1 chosen so the weight is
continuous at g = 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .roots import BracketError, bisect


@dataclass
class RawSamples:
    """Struct-of-arrays of reduced-order model evaluations.

    ``error_estimate`` is g_coarse - g_fine when the fine model is used as
    the reference, and NaN when no estimate is available.
    """

    y: np.ndarray
    g_coarse: np.ndarray
    error_estimate: np.ndarray

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        self.g_coarse = np.asarray(self.g_coarse, dtype=np.float64).ravel()
        self.error_estimate = np.asarray(self.error_estimate, dtype=np.float64).ravel()
        n = self.y.shape[0]
        if self.g_coarse.size != n or self.error_estimate.size != n:
            raise ValueError("y, g_coarse and error_estimate must have the same length")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.g_coarse))):
            raise ValueError("non-finite sample values")

    def __len__(self):
        return self.y.shape[0]

    @property
    def g_fine(self) -> np.ndarray:
        return self.g_coarse - self.error_estimate

    def subset(self, idx) -> "RawSamples":
        return RawSamples(self.y[idx], self.g_coarse[idx], self.error_estimate[idx])


@dataclass
class WeightedDataset:
    y: np.ndarray
    g_coarse: np.ndarray
    error_estimate: np.ndarray
    weight: np.ndarray
    theta: float
    c1: float
    c2: float
    sigma: float
    eps_max_neg: float
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.y.shape[0]

    def constants(self) -> dict:
        return {"theta": self.theta, "c1": self.c1, "c2": self.c2, "sigma": self.sigma,
                "eps_max_neg": self.eps_max_neg, "n_samples": len(self),
                "n_positive": int(np.sum(self.g_coarse >= 0)), **self.extra}


def eps_max_neg(samples: RawSamples) -> float:
    """Largest |error estimate| among samples with g_coarse < 0 (0 if none)."""
    neg = samples.g_coarse < 0
    if not neg.any():
        return 0.0
    e = np.abs(samples.error_estimate[neg])
    if np.any(np.isnan(e)):
        raise ValueError("error estimates are missing for samples with g_coarse < 0")
    return float(e.max())


def accept(samples: RawSamples, eps_max: float) -> RawSamples:
    if eps_max < 0:
        raise ValueError("eps_max must be non-negative")
    return samples.subset(np.flatnonzero(samples.g_coarse >= -eps_max))


def truncate_negative(samples: RawSamples, q: float) -> RawSamples:
    """Keep the fraction ``q`` of g_coarse < 0 samples closest to zero."""
    if not 0 < q <= 1:
        raise ValueError(f"truncation fraction must be in (0, 1], got {q}")
    if q == 1:
        return samples
    neg = np.flatnonzero(samples.g_coarse < 0)
    keep_n = int(math.floor(q * neg.size))
    order = neg[np.argsort(-samples.g_coarse[neg], kind="stable")]
    keep = np.sort(np.concatenate([np.flatnonzero(samples.g_coarse >= 0), order[:keep_n]]))
    return samples.subset(keep)


def half_normal_pdf(tau, sigma: float):
    return math.sqrt(2.0) / (sigma * math.sqrt(math.pi)) * np.exp(-np.square(tau) / (2 * sigma**2))


def sigma_bracket(tau_neg: np.ndarray, theta: float, n_total: int, c2: float) -> float:
    """Upper end of the interval (0, alpha * max|tau|] that contains sigma."""
    ratio = (1 - theta) / (n_total * c2 - theta)
    if not 0 < ratio < 1:
        raise BracketError(
            f"no sigma can put mass {1 - theta:.6g} on {tau_neg.size} negative samples "
            f"(c2 = {c2:.6g}); theta must exceed the fraction of non-negative samples")
    alpha = math.sqrt(-0.5 / math.log(ratio))
    return alpha * float(np.max(np.abs(tau_neg)))


def fit_weights(samples: RawSamples, theta: float, eps_max: float | None = None,
                tol: float = 1e-12, maxiter: int = 200) -> WeightedDataset:
    """Assign the constant / half-normal weights and solve for (c1, c2, sigma).

    ``samples`` should already be filtered by :func:`accept`. ``eps_max`` is
    only recorded (it defaults to :func:`eps_max_neg` of the samples). When
    no sample has g_coarse < 0, theta is forced to 1 and the weights are
    uniform, with sigma and c1 recorded as 0.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must be in (0, 1], got {theta}")
    g = samples.g_coarse
    pos = g >= 0
    n_pos, n = int(pos.sum()), g.size
    if n_pos == 0:
        raise ValueError("no samples with g_coarse >= 0")
    eps = eps_max_neg(samples) if eps_max is None else float(eps_max)
    tau = g[~pos]
    if tau.size == 0:
        w = np.full(n, 1.0 / n)
        return WeightedDataset(samples.y, g, samples.error_estimate, w, 1.0, 0.0, 1.0 / n,
                               0.0, eps)
    if theta == 1:
        raise ValueError("theta = 1 leaves no mass for the samples with g_coarse < 0")

    c2 = theta / n_pos
    tau2 = tau * tau
    target = 1.0 - theta

    def excess(sigma):
        return c2 * np.sum(np.exp(-tau2 / (2 * sigma * sigma))) - target

    hi = sigma_bracket(tau, theta, n, c2)
    # excess is increasing in sigma and tends to -target as sigma -> 0+
    lo = hi * 1e-12
    while excess(lo) > 0:
        lo *= 1e-3
    # excess(hi) >= 0 analytically, with equality when all |tau| coincide;
    # a non-positive value there is round-off at the root itself
    if excess(hi) <= 0:
        sigma = hi
    else:
        sigma = bisect(excess, lo, hi, tol=tol, maxiter=maxiter, relative=True)
    c1 = c2 * sigma * math.sqrt(math.pi) / math.sqrt(2.0)
    w = np.empty(n)
    w[pos] = c2
    w[~pos] = c1 * half_normal_pdf(tau, sigma)
    s = w.sum()
    w /= s
    return WeightedDataset(samples.y, g, samples.error_estimate, w, theta, c1 / s, c2 / s,
                           sigma, eps)


def mixture_gamma(N1: int, pi1: float) -> float:
    """Optimal mixture coefficient for a two-group weighted empirical measure."""
    gamma = N1 * pi1
    if not 0 <= gamma <= 1:
        raise ValueError(f"N1 * pi1 must lie in [0, 1], got {gamma}")
    return gamma


# --- files -----------------------------------------------------------------

def write_samples_csv(path, samples: RawSamples, weight: np.ndarray | None = None) -> None:
    n = samples.y.shape[1]
    header = [f"y_{i + 1}" for i in range(n)] + ["g_coarse", "error_estimate"]
    if weight is not None:
        header.append("weight")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(samples)):
            row = [repr(float(v)) for v in samples.y[i]]
            row += [repr(float(samples.g_coarse[i])), repr(float(samples.error_estimate[i]))]
            if weight is not None:
                row.append(repr(float(weight[i])))
            w.writerow(row)


def read_samples_csv(path) -> tuple[RawSamples, np.ndarray | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=np.float64)
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not ycols or "g_coarse" not in header or "error_estimate" not in header:
        raise ValueError(f"{path}: expected columns y_1..y_n, g_coarse, error_estimate")
    data = data.reshape(-1, len(header))
    samples = RawSamples(data[:, ycols], data[:, header.index("g_coarse")],
                         data[:, header.index("error_estimate")])
    weight = data[:, header.index("weight")] if "weight" in header else None
    return samples, weight


def save_dataset(dataset: WeightedDataset, csv_path, json_path) -> None:
    samples = RawSamples(dataset.y, dataset.g_coarse, dataset.error_estimate)
    write_samples_csv(csv_path, samples, dataset.weight)
    Path(json_path).write_text(json.dumps(dataset.constants(), indent=2, sort_keys=True))


def load_dataset(csv_path, json_path) -> WeightedDataset:
    samples, weight = read_samples_csv(csv_path)
    if weight is None:
        raise ValueError(f"{csv_path} has no weight column")
    c = json.loads(Path(json_path).read_text())
    known = {"theta", "c1", "c2", "sigma", "eps_max_neg", "n_samples", "n_positive"}
    extra = {k: v for k, v in c.items() if k not in known}
    return WeightedDataset(samples.y, samples.g_coarse, samples.error_estimate, weight,
                           c["theta"], c["c1"], c["c2"], c["sigma"], c["eps_max_neg"], extra)


def uniform_dataset(y: np.ndarray) -> WeightedDataset:
    """Equal weights with every sample treated as g >= 0 (for plain density fits)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    n = y.shape[0]
    zeros = np.zeros(n)
    return WeightedDataset(y, zeros, zeros.copy(), np.full(n, 1.0 / n), 1.0, 0.0, 1.0 / n,
                           0.0, 0.0)


__all__ = [
    "RawSamples", "WeightedDataset", "eps_max_neg", "accept", "truncate_negative",
    "fit_weights", "mixture_gamma", "half_normal_pdf", "sigma_bracket",
    "write_samples_csv", "read_samples_csv", "save_dataset", "load_dataset",
    "uniform_dataset",
]
