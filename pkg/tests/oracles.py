"""Independent reference implementations used as test oracles.

Nothing here imports emforge; each function is a direct, slow restatement
of the quantity it checks.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = out.dtype.type(0)
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def info_nce_per_query(q: np.ndarray, t: np.ndarray, tau: float, hard: np.ndarray | None = None) -> float:
    """Per-query scalar evaluation of the mean InfoNCE loss with plain loops."""
    def cos(u, v):
        return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))

    total = 0.0
    B = len(q)
    for i in range(B):
        pos = math.exp(cos(q[i], t[i]) / tau)
        neg = sum(math.exp(cos(q[i], t[j]) / tau) for j in range(B) if j != i)
        if hard is not None:
            neg += sum(math.exp(cos(q[i], h) / tau) for h in hard[i])
        total += -math.log(pos / (pos + neg))
    return total / B


def brute_force_rank(query: np.ndarray, candidates: np.ndarray) -> int:
    best, best_score = 0, None
    for j, c in enumerate(candidates):
        s = sum(float(x) * float(y) for x, y in zip(query, c))
        if best_score is None or s > best_score:
            best, best_score = j, s
    return best
