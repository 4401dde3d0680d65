"""Per-sample QoI kernels for the elliptic testbed.

Both kernels take the log-coefficient a(x) already evaluated at the
quadrature nodes of every sample and return the squared L2 and squared
derivative parts of the H1 norm of the closed-form solution.

When numba is importable the njit versions are used; set
``ROMFLOW_DISABLE_NUMBA=1`` to force the pure-numpy path.
"""
from __future__ import annotations

import os

import numpy as np

# the tbb layer on this kind of image is often too old and warns on first use
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAS_NUMBA = numba is not None
USE_NUMBA = HAS_NUMBA and os.environ.get("ROMFLOW_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


# --- numpy reference -------------------------------------------------------

def fine_norms_numpy(a, x, w, S):
    """a: (N, E, P) log-coefficient at GLL nodes; x: (E, P) node positions;
    w: (P,) element quadrature weights; S: (P, P) element integration matrix
    (S[j, k] integrates the k-th Lagrange basis from the element start to node j)."""
    e = np.exp(-a)
    i0 = np.einsum("p,nep->n", w, e)
    i1 = np.einsum("p,nep->n", w, x * e)
    gamma = i1 / i0
    du = (gamma[:, None, None] - x) * e
    loc = np.einsum("jk,nek->nej", S, du)
    start = np.cumsum(loc[:, :, -1], axis=1) - loc[:, :, -1]
    u = loc + start[:, :, None]
    return np.einsum("p,nep->n", w, u * u), np.einsum("p,nep->n", w, du * du)


def coarse_norms_numpy(a, x, h):
    """a: (N, J) log-coefficient at left endpoints x: (J,) of a uniform mesh."""
    e = np.exp(-a)
    gamma = (e @ x) / e.sum(axis=1)
    du = (gamma[:, None] - x) * e
    u = h * (np.cumsum(du, axis=1) - du)
    return h * np.sum(u * u, axis=1), h * np.sum(du * du, axis=1)


# --- numba -----------------------------------------------------------------

if HAS_NUMBA:
    @numba.njit(cache=True, parallel=True, fastmath=False)
    def _fine_norms_nb(a, x, w, S):
        N, E, P = a.shape
        l2 = np.empty(N)
        d2 = np.empty(N)
        for n in numba.prange(N):
            e = np.empty((E, P))
            i0 = 0.0
            i1 = 0.0
            for k in range(E):
                for p in range(P):
                    v = np.exp(-a[n, k, p])
                    e[k, p] = v
                    i0 += w[p] * v
                    i1 += w[p] * x[k, p] * v
            gamma = i1 / i0
            start = 0.0
            sl2 = 0.0
            sd2 = 0.0
            du = np.empty(P)
            for k in range(E):
                for p in range(P):
                    du[p] = (gamma - x[k, p]) * e[k, p]
                last = 0.0
                for j in range(P):
                    acc = 0.0
                    for q in range(P):
                        acc += S[j, q] * du[q]
                    u = start + acc
                    sl2 += w[j] * u * u
                    sd2 += w[j] * du[j] * du[j]
                    if j == P - 1:
                        last = acc
                start += last
            l2[n] = sl2
            d2[n] = sd2
        return l2, d2

    @numba.njit(cache=True, parallel=True)
    def _coarse_norms_nb(a, x, h):
        N, J = a.shape
        l2 = np.empty(N)
        d2 = np.empty(N)
        for n in numba.prange(N):
            s0 = 0.0
            s1 = 0.0
            for j in range(J):
                v = np.exp(-a[n, j])
                s0 += v
                s1 += x[j] * v
            gamma = s1 / s0
            u = 0.0
            sl2 = 0.0
            sd2 = 0.0
            for j in range(J):
                du = (gamma - x[j]) * np.exp(-a[n, j])
                sl2 += u * u
                sd2 += du * du
                u += h * du
            l2[n] = h * sl2
            d2[n] = h * sd2
        return l2, d2


def fine_norms(a, x, w, S, use_numba: bool | None = None):
    if USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA):
        return _fine_norms_nb(np.ascontiguousarray(a), np.ascontiguousarray(x),
                              np.ascontiguousarray(w), np.ascontiguousarray(S))
    return fine_norms_numpy(a, x, w, S)


def coarse_norms(a, x, h, use_numba: bool | None = None):
    if USE_NUMBA if use_numba is None else (use_numba and HAS_NUMBA):
        return _coarse_norms_nb(np.ascontiguousarray(a), np.ascontiguousarray(x), float(h))
    return coarse_norms_numpy(a, x, h)


def set_threads(n: int) -> None:
    if HAS_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
