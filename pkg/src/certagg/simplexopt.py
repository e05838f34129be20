"""Least-squares matching of a target label distribution by a simplex mixture.

Solves ``min_alpha ||p - D alpha||_2`` subject to ``alpha`` on the probability
simplex with projected gradient descent. The problem is tiny (tens of
candidates, tens of classes), so a fixed 1/L step with exact projection is
enough, and optimality is checked after the fact through the KKT conditions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .core import (
    DimensionError,
    LabelDistribution,
    SimplexWeights,
    ValidationError,
    _check_classes,
    residual,
)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class SolveReport:
    weights: SimplexWeights
    residual: float
    iterations: int
    converged: bool


def _project(v: np.ndarray) -> np.ndarray:
    # sort-and-threshold: find the largest k with u_k - (sum_{i<=k} u_i - 1)/k > 0
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def project_simplex(v) -> SimplexWeights:
    """Euclidean projection of ``v`` onto ``{a : a >= 0, sum(a) = 1}``."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("cannot project an empty vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("cannot project a vector with non-finite entries")
    w = _project(arr)
    # absorb the last-ulp error so the sum invariant holds tightly
    w /= w.sum()
    return SimplexWeights(np.minimum(w, 1.0))


@njit(cache=True)
def _project_jit(v):
    n = v.size
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(n):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0.0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        out[i] = max(v[i] - theta, 0.0)
    return out


@njit(cache=True)
def _descend(G, b, L, a, tol, max_iter):
    step = 1.0 / L
    k = a.size
    it = 0
    while it < max_iter:
        z = np.empty(k)
        for i in range(k):
            g = 0.0
            for j in range(k):
                g += G[i, j] * a[j]
            z[i] = a[i] - step * 2.0 * (g - b[i])
        nxt = _project_jit(z)
        it += 1
        sq = 0.0
        for i in range(k):
            d = nxt[i] - a[i]
            sq += d * d
        a = nxt
        if L * np.sqrt(sq) <= tol:
            return a, it, True
    return a, it, False


@njit(cache=True)
def _power_iteration(G, iters):
    k = G.shape[0]
    x = np.full(k, 1.0 / np.sqrt(k))
    lam = 0.0
    for _ in range(iters):
        y = G @ x
        norm = np.sqrt(np.sum(y * y))
        if norm == 0.0:
            return 0.0
        x = y / norm
        new = np.sum(x * (G @ x))
        if abs(new - lam) <= 1e-12 * max(new, 1.0):
            return new
        lam = new
    return lam


def _lipschitz(G: np.ndarray, iters: int = 500) -> float:
    """Upper estimate of 2 * lambda_max(G) for the Gram matrix ``G = D^T D``."""
    lam = _power_iteration(G, iters)
    if lam <= 0.0:
        return 1.0
    # power iteration approaches from below; the Frobenius norm bounds from above
    return 2.0 * min(lam * (1.0 + 1e-6) + 1e-12, float(np.sqrt(np.sum(G * G))) + 1e-12)


def _equality_solve(G: np.ndarray, b: np.ndarray, support: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimize over weights on ``support`` that sum to one, ignoring the sign constraints."""
    s = support.size
    K = np.zeros((s + 1, s + 1))
    K[:s, :s] = 2.0 * G[np.ix_(support, support)]
    K[:s, s] = 1.0
    K[s, :s] = 1.0
    rhs = np.concatenate([2.0 * b[support], [1.0]])
    # lstsq copes with a singular system (duplicate or collinear candidates)
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:s], -sol[s]


def _polish(D: np.ndarray, p: np.ndarray, G: np.ndarray, b: np.ndarray, a: np.ndarray,
            max_rounds: int = 200) -> np.ndarray:
    """Primal active-set refinement started from the projected gradient solution.

    Projected gradient usually finds the right support long before the
    weights settle, and on badly conditioned problems it may not settle at
    all. On a support the optimum solves a small linear KKT system; blocked
    coordinates leave the support and coordinates with a lower partial
    derivative than the multiplier join it. The refined point is kept only
    if it is not worse.
    """
    x = a.copy()
    support = np.nonzero(x > 0)[0]
    scale = max(1.0, float(np.abs(G).max()))
    for _ in range(max_rounds):
        y, _ = _equality_solve(G, b, support)
        if not np.all(np.isfinite(y)):
            break
        if np.any(y < 0):
            # walk from x towards y until the first coordinate hits zero
            cur = x[support]
            neg = y < 0
            steps = cur[neg] / (cur[neg] - y[neg])
            t = float(steps.min())
            cur = cur + t * (y - cur)
            blocked = cur <= 1e-15
            blocked[np.flatnonzero(neg)[np.argmin(steps)]] = True
            cur[blocked] = 0.0
            x = np.zeros_like(x)
            x[support] = cur
            support = support[~blocked]
            if support.size == 0:
                break
            continue
        x = np.zeros_like(x)
        x[support] = y
        g = 2.0 * (G @ x - b)
        mu = float(g[support].mean())
        outside = np.setdiff1d(np.arange(x.size), support)
        if outside.size == 0:
            break
        j = outside[np.argmin(g[outside])]
        if g[j] >= mu - 1e-12 * scale:
            break
        support = np.sort(np.append(support, j))
    x = np.clip(x, 0.0, None)
    if x.sum() <= 0:
        return a
    x /= x.sum()

    def gap(v):
        return np.linalg.norm(D @ v - p)

    return x if gap(x) <= gap(a) else a


def kkt_gap(D: np.ndarray, target: np.ndarray, alphas: np.ndarray) -> float:
    """Largest violation of the simplex KKT conditions for ``||target - D a||^2``.

    At an optimum every coordinate in the support has the same partial
    derivative ``mu`` and every coordinate outside it has derivative ``>= mu``.
    """
    g = 2.0 * D.T @ (D @ alphas - target)
    support = alphas > 0
    mu = g[support].mean()
    gap = float(np.max(np.abs(g[support] - mu)))
    if np.any(~support):
        gap = max(gap, float(np.max(mu - g[~support], initial=0.0)))
    return gap


def solve_simplex_ls(
    target: LabelDistribution,
    dists: Sequence[LabelDistribution],
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SolveReport:
    """Find simplex weights whose mixture of ``dists`` is closest to ``target``.

    Iterates ``a <- P(a - grad / L)`` from uniform weights until the gradient
    mapping ``L * ||a - P(a - grad / L)||`` drops to ``tol`` or ``max_iter`` is
    hit; ``converged`` reports which. The final support is then solved
    exactly, which matters when the target is reachable with zero residual.
    """
    m = _check_classes(list(dists))
    if target.num_classes != m:
        raise DimensionError(f"target has {target.num_classes} classes, candidates have {m}")
    if tol <= 0 or max_iter < 1:
        raise ValidationError("tol must be positive and max_iter at least 1")

    k = len(dists)
    if k == 1:
        w = SimplexWeights(np.ones(1))
        return SolveReport(w, residual(target, w, dists), 0, True)

    D = np.stack([d.probs for d in dists], axis=1)
    p = target.probs
    G = D.T @ D
    b = D.T @ p
    L = _lipschitz(G)
    a, it, converged = _descend(G, b, L, np.full(k, 1.0 / k), float(tol), int(max_iter))
    a = _polish(D, p, G, b, a)

    a = np.clip(a, 0.0, 1.0)
    a /= a.sum()
    weights = SimplexWeights(a)
    return SolveReport(weights, residual(target, weights, dists), it, converged)
