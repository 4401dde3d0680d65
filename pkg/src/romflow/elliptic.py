"""1D elliptic problem -(e^a u')' = 1 on [0, 1], u(0) = u(1) = 0.

The log-coefficient a is a Karhunen-Loeve expansion of a zero-mean Gaussian
field with exponential covariance exp(-|x1 - x2| / l_c). The solution has the
closed form

    u(x) = int_0^x (gamma - s) e^{-a(s)} ds,
    gamma = int_0^1 s e^{-a} ds / int_0^1 e^{-a} ds,

so the coarse and fine models differ only in how a is represented and how
the integrals are evaluated: a left-endpoint rectangle rule on a uniform
mesh (coarse) or composite Gauss-Lobatto-Legendre quadrature (fine).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial import legendre as leg

from . import _kernels
from .roots import BracketError, bisect, sign_changes
from .weighting import RawSamples


class QoIOverflowError(FloatingPointError):
    def __init__(self, indices):
        super().__init__(f"exp(-a) overflowed for {len(indices)} sample(s), first at {indices[0]}")
        self.indices = list(indices)


# --- Karhunen-Loeve expansion ----------------------------------------------

@dataclass(frozen=True)
class KLExpansion:
    l_c: float
    roots: np.ndarray
    eigenvalues: np.ndarray
    norms: np.ndarray
    sigma_std: float = 1.0

    @property
    def M(self) -> int:
        return self.roots.size

    @property
    def eps(self) -> float:
        return 1.0 / self.l_c

    def eigenfunctions(self, x) -> np.ndarray:
        """Normalized eigenfunctions at points ``x``; shape (len(x), M)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        v = self.roots
        return (v * np.cos(v * x) + self.eps * np.sin(v * x)) / self.norms

    def modes(self, x) -> np.ndarray:
        """sigma * sqrt(lambda_i) * theta_i(x); a(x) = modes(x) @ xi."""
        return self.sigma_std * self.eigenfunctions(x) * np.sqrt(self.eigenvalues)

    def field(self, xi, x) -> np.ndarray:
        xi = np.atleast_2d(xi)
        return xi @ self.modes(x).T


def _transcendental(v, eps):
    # (v^2 - eps^2) tan v - 2 eps v multiplied through by cos v
    return (v * v - eps * eps) * np.sin(v) - 2.0 * eps * v * np.cos(v)


def kl_eigenpairs(l_c: float, M: int, probes: int = 10_000, delta: float = 1e-9) -> KLExpansion:
    """The M largest eigenpairs of the exponential kernel on [0, 1].

    Roots of (v^2 - eps^2) tan v = 2 eps v, eps = 1/l_c, are located by a
    sign scan of the cosine-multiplied form over (k pi, (k+1) pi) followed
    by bisection; the eigenvalues are 2 eps / (v^2 + eps^2).
    """
    if not l_c > 0:
        raise ValueError(f"correlation length must be positive, got {l_c}")
    if M < 1:
        raise ValueError(f"M must be at least 1, got {M}")
    eps = 1.0 / l_c
    f = lambda v: _transcendental(v, eps)  # noqa: E731
    roots: list[float] = []
    k = 0
    while len(roots) < M:
        a, b = k * math.pi + delta, (k + 1) * math.pi - delta
        brackets = sign_changes(f, a, b, probes)
        for lo, hi in brackets:
            roots.append(bisect(f, lo, hi, tol=1e-15, maxiter=200))
        k += 1
        if k > 10 * M + 100:
            raise BracketError(f"found only {len(roots)} of {M} roots below {b:.6g}")
    v = np.array(sorted(roots)[:M])
    lam = 2.0 * eps / (v * v + eps * eps)
    # normalization of v cos(vx) + eps sin(vx) on [0, 1]
    norms = np.sqrt(0.5 * (eps**2 + v**2) + (v**2 - eps**2) * np.sin(2 * v) / (4 * v)
                    + 0.5 * eps * (1 - np.cos(2 * v)))
    return KLExpansion(float(l_c), v, lam, norms)


def eigenfunction(expansion: KLExpansion, i: int, x):
    """theta_i(x) for 1-based index ``i``."""
    if not 1 <= i <= expansion.M:
        raise IndexError(f"eigenfunction index {i} outside 1..{expansion.M}")
    out = expansion.eigenfunctions(x)[:, i - 1]
    return out[0] if np.ndim(x) == 0 else out


def write_kl_csv(path, expansion: KLExpansion) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "v_i", "lambda_i"])
        for i, (v, lam) in enumerate(zip(expansion.roots, expansion.eigenvalues), 1):
            w.writerow([i, repr(float(v)), repr(float(lam))])


# --- quadrature ------------------------------------------------------------

def gll_nodes_weights(P: int) -> tuple[np.ndarray, np.ndarray]:
    """P Gauss-Lobatto-Legendre points and weights on [-1, 1]."""
    if P < 2:
        raise ValueError("GLL rule needs at least 2 points")
    c = np.zeros(P)
    c[-1] = 1.0
    inner = leg.legroots(leg.legder(c)) if P > 2 else np.array([])
    x = np.concatenate([[-1.0], np.sort(inner), [1.0]])
    w = 2.0 / (P * (P - 1) * leg.legval(x, c) ** 2)
    return x, w


def gll_integration_matrix(x: np.ndarray) -> np.ndarray:
    """S[j, k] = int_{-1}^{x_j} l_k(s) ds for the Lagrange basis on nodes x."""
    P = x.size
    V = leg.legvander(x, P - 1)
    coef = np.linalg.inv(V)  # column k: Legendre coefficients of l_k
    out = np.empty((P, P))
    for k in range(P):
        out[:, k] = leg.legval(x, leg.legint(coef[:, k], lbnd=-1))
    return out


@dataclass(frozen=True)
class FineMesh:
    n_elements: int = 64
    points: int = 8

    def __post_init__(self):
        if self.n_elements < 1 or self.points < 2:
            raise ValueError("fine mesh needs >= 1 element and >= 2 GLL points")

    @cached_property
    def _rule(self):
        xr, wr = gll_nodes_weights(self.points)
        S = gll_integration_matrix(xr)
        h = 1.0 / self.n_elements
        nodes = np.arange(self.n_elements)[:, None] * h + (xr[None, :] + 1.0) * (h / 2)
        return nodes, wr * (h / 2), S * (h / 2)

    @property
    def nodes(self) -> np.ndarray:
        return self._rule[0]

    @property
    def weights(self) -> np.ndarray:
        return self._rule[1]

    @property
    def integration_matrix(self) -> np.ndarray:
        return self._rule[2]


@dataclass(frozen=True)
class CoarseMesh:
    n_elements: int = 10

    def __post_init__(self):
        if self.n_elements < 1:
            raise ValueError("coarse mesh needs at least one element")

    @property
    def h(self) -> float:
        return 1.0 / self.n_elements

    @property
    def left_endpoints(self) -> np.ndarray:
        return np.arange(self.n_elements) * self.h


@dataclass(frozen=True)
class DiscretizationConfig:
    coarse: CoarseMesh = field(default_factory=CoarseMesh)
    fine: FineMesh = field(default_factory=FineMesh)


@dataclass(frozen=True)
class QoIResult:
    h1_norm: np.ndarray
    g: np.ndarray
    model: str


NORMS = ("semi", "full")


class EllipticProblem:
    """Threshold exceedance ||u||_{H1} >= C for the KL-driven elliptic problem.

    ``norm="semi"`` uses |u|_{H1} = ||u'||_{L2}; ``norm="full"`` adds ||u||_{L2}^2
    under the square root.
    """

    def __init__(self, expansion: KLExpansion, C: float,
                 disc: DiscretizationConfig | None = None, norm: str = "semi"):
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {norm!r}")
        self.expansion = expansion
        self.C = float(C)
        self.disc = disc or DiscretizationConfig()
        self.norm = norm
        fine = self.disc.fine
        self._fine_modes = expansion.modes(fine.nodes.ravel())  # (E*P, M)
        # the piecewise-linear interpolant equals theta_i at the mesh nodes,
        # which are the only points the rectangle rule touches
        self._coarse_modes = expansion.modes(self.disc.coarse.left_endpoints)

    @property
    def M(self) -> int:
        return self.expansion.M

    def _combine(self, l2, d2):
        return np.sqrt(d2 + l2) if self.norm == "full" else np.sqrt(d2)

    def _check(self, xi):
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        if xi.shape[1] != self.M:
            raise ValueError(f"xi has {xi.shape[1]} components, expected {self.M}")
        if not np.all(np.isfinite(xi)):
            raise ValueError("non-finite xi")
        return xi

    @staticmethod
    def _overflow_guard(a):
        bad = np.flatnonzero(np.any(-a > 700.0, axis=tuple(range(1, a.ndim))))
        if bad.size:
            raise QoIOverflowError(bad)

    def qoi_fine(self, xi, chunk: int = 20_000) -> QoIResult:
        xi = self._check(xi)
        fine = self.disc.fine
        E, P = fine.nodes.shape
        norms = np.empty(xi.shape[0])
        for s in range(0, xi.shape[0], chunk):
            a = (xi[s:s + chunk] @ self._fine_modes.T).reshape(-1, E, P)
            self._overflow_guard(a)
            l2, d2 = _kernels.fine_norms(a, fine.nodes, fine.weights, fine.integration_matrix)
            norms[s:s + chunk] = self._combine(l2, d2)
        return QoIResult(norms, norms - self.C, "fine")

    def qoi_coarse(self, xi, chunk: int = 50_000) -> QoIResult:
        xi = self._check(xi)
        mesh = self.disc.coarse
        norms = np.empty(xi.shape[0])
        for s in range(0, xi.shape[0], chunk):
            a = xi[s:s + chunk] @ self._coarse_modes.T
            self._overflow_guard(a)
            l2, d2 = _kernels.coarse_norms(a, mesh.left_endpoints, mesh.h)
            norms[s:s + chunk] = self._combine(l2, d2)
        return QoIResult(norms, norms - self.C, "coarse")

    def g_fine(self, xi) -> np.ndarray:
        return self.qoi_fine(xi).g

    def indicator(self, xi) -> np.ndarray:
        """Fine-model indicator of the event g >= 0."""
        return self.qoi_fine(xi).g >= 0

    def sample_rom(self, N: int, rng: np.random.Generator, with_fine: bool = True) -> RawSamples:
        """Draw xi ~ N(0, I) and evaluate the coarse model (and the fine one for errors)."""
        if N < 1:
            raise ValueError("N must be positive")
        xi = rng.standard_normal((N, self.M))
        gc = self.qoi_coarse(xi).g
        err = gc - self.qoi_fine(xi).g if with_fine else np.full(N, np.nan)
        return RawSamples(xi, gc, err)

