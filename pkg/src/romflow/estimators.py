"""Monte Carlo and importance-sampling estimators of P(Y in B), Y ~ N(0, I).

Also holds the Table-1 style fidelity counts and the two analytic 2D toys
(a rotated Gaussian and the exterior of a rotated ellipse).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .flow import FlowModel, inverse, std_normal_logpdf

Z95 = 1.96
MAX_EXCLUDED_FRACTION = 1e-3


@dataclass(frozen=True)
class TargetProblem:
    n: int
    indicator: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    def log_reference(self, y: np.ndarray) -> np.ndarray:
        return std_normal_logpdf(y)


@dataclass
class EstimatorReport:
    estimate: float
    std: float
    n: int
    ci_halfwidth: float
    excluded: int = 0
    ratio: float | None = None
    failed: bool = False
    method: str = "mc"

    @classmethod
    def from_values(cls, values: np.ndarray, method: str, excluded: int = 0) -> "EstimatorReport":
        values = np.asarray(values, dtype=np.float64)
        n = values.size
        if n < 2:
            raise ValueError("need at least two finite values for a standard deviation")
        est = float(np.mean(values))
        std = float(np.std(values, ddof=1))
        total = n + excluded
        return cls(est, std, n, Z95 * std / math.sqrt(n), excluded, None,
                   excluded > MAX_EXCLUDED_FRACTION * total, method)

    @property
    def standard_error(self) -> float:
        return self.std / math.sqrt(self.n)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["ratio"] is None:
            del d["ratio"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def mc_estimate(problem: TargetProblem, N: int, rng: np.random.Generator) -> EstimatorReport:
    if N < 2:
        raise ValueError("N must be at least 2")
    y = rng.standard_normal((N, problem.n))
    ind = np.asarray(problem.indicator(y), dtype=np.float64)
    return EstimatorReport.from_values(ind, "mc")


def importance_weights(problem: TargetProblem, model: FlowModel, N: int,
                       rng: np.random.Generator, chunk: int = 20_000):
    """Likelihood ratios I_B(y) rho(y) / p_Y(y) for y drawn from the model.

    Returns ``(w, y)``; entries whose ratio is not finite are NaN.
    """
    if model.n != problem.n:
        raise ValueError(f"model dimension {model.n} differs from problem dimension {problem.n}")
    if N < 1:
        raise ValueError("N must be positive")
    ws, ys = [], []
    for s in range(0, N, chunk):
        z = rng.standard_normal((min(chunk, N - s), problem.n))
        y, logdet = inverse(model, z, return_logdet=True)
        log_p = std_normal_logpdf(z) + logdet
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp(problem.log_reference(y) - log_p)
        ind = np.asarray(problem.indicator(y), dtype=np.float64)
        w = np.where(ind > 0, ratio, 0.0)
        w[~np.isfinite(w)] = np.nan
        ws.append(w)
        ys.append(y)
    return np.concatenate(ws), np.concatenate(ys)


def is_estimate(problem: TargetProblem, model: FlowModel, N: int,
                rng: np.random.Generator) -> EstimatorReport:
    w, _ = importance_weights(problem, model, N, rng)
    ok = np.isfinite(w)
    return EstimatorReport.from_values(w[ok], "is", excluded=int(np.sum(~ok)))


def variance_ratio(sigma_w: float, sigma_mc: float) -> float:
    """Sample-size ratio N_IS / N_MC needed for equal estimator variance."""
    if not sigma_mc > 0:
        raise ValueError("sigma_mc must be positive")
    return (sigma_w / sigma_mc) ** 2


def paired(is_report: EstimatorReport, mc_report: EstimatorReport) -> EstimatorReport:
    is_report.ratio = variance_ratio(is_report.std, mc_report.std)
    return is_report


def fidelity_report(g_coarse, g_fine, eps_max: float) -> dict:
    """Counts comparing the coarse and fine exceedance indicators."""
    gc = np.asarray(g_coarse, dtype=np.float64)
    gf = np.asarray(g_fine, dtype=np.float64)
    if gc.shape != gf.shape:
        raise ValueError("g_coarse and g_fine must have the same shape")
    neg = gc < 0
    return {
        "n": int(gc.size),
        "coarse_nonnegative": int(np.sum(~neg)),
        "fine_nonnegative": int(np.sum(gf >= 0)),
        "accepted_band": int(np.sum(neg & (gc >= -eps_max))),
        "missed_by_coarse": int(np.sum(neg & (gf >= 0))),
        "eps_max_neg": float(eps_max),
    }


# --- toys ------------------------------------------------------------------

ROTATION_MATRIX = np.array([[-math.sqrt(2) / 2, math.sqrt(2) / 2],
                            [math.sqrt(2) / 2, math.sqrt(2) / 2]])
GAUSSIAN_ENTROPY_2D = math.log(2 * math.pi * math.e)


def toy_rotation_data(N: int, rng: np.random.Generator) -> np.ndarray:
    if N < 1:
        raise ValueError("N must be positive")
    return rng.standard_normal((N, 2)) @ ROTATION_MATRIX.T


@dataclass(frozen=True)
class EllipseToy:
    alpha: float = 2.0
    angle: float = math.pi / 4
    C: float = 3.0

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.diag([self.alpha, 1.0]) @ np.array([[c, -s], [s, c]])

    def inside_b(self, y) -> np.ndarray:
        q = np.atleast_2d(y) @ self.matrix.T
        return np.sum(q * q, axis=1) >= self.C ** 2

    def target(self) -> TargetProblem:
        return TargetProblem(2, self.inside_b, "ellipse")


def toy_ellipse_data(N: int, rng: np.random.Generator, params: EllipseToy = EllipseToy(),
                     batch: int = 100_000, min_acceptance: float = 1e-6) -> tuple[np.ndarray, float]:
    """Rejection-sample N standard-normal points outside the ellipse.

    Returns ``(points, acceptance_rate)``.
    """
    if N < 1:
        raise ValueError("N must be positive")
    kept, drawn, have = [], 0, 0
    while have < N:
        y = rng.standard_normal((batch, 2))
        drawn += batch
        y = y[params.inside_b(y)]
        kept.append(y)
        have += len(y)
        if have / drawn < min_acceptance and drawn >= 10 * batch:
            raise RuntimeError(f"acceptance rate {have / drawn:.3g} below {min_acceptance:g}")
    return np.concatenate(kept)[:N], have / drawn


def alpha_mixture_weights(indicator, ell: float, alpha: float, N: int, n: int,
                          rng: np.random.Generator, batch: int = 100_000) -> np.ndarray:
    """Likelihood ratios under eta = alpha rho|B + (1 - alpha) rho|B^c.

    On B the ratio is ell / alpha and it vanishes elsewhere, so the variance
    is ell^2 / alpha - ell^2. Draws are made by rejection from rho.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    n_in = int(rng.binomial(N, alpha))
    inside, outside = [], []
    got_in = got_out = 0
    while got_in < n_in or got_out < N - n_in:
        y = rng.standard_normal((batch, n))
        m = np.asarray(indicator(y), dtype=bool)
        inside.append(y[m])
        outside.append(y[~m])
        got_in += m.sum()
        got_out += (~m).sum()
    y = np.concatenate([np.concatenate(inside)[:n_in], np.concatenate(outside)[:N - n_in]])
    return np.where(np.asarray(indicator(y), dtype=bool), ell / alpha, 0.0)


def elliptic_target(problem) -> TargetProblem:
    """Fine-model indicator of an :class:`~romflow.elliptic.EllipticProblem`."""
    return TargetProblem(problem.M, problem.indicator, "elliptic")
