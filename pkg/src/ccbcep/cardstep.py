"""Separable minimisation over the cardinality-constrained box.

Each link's piece is strongly convex in y_a on [0, umax_a]. The optimum over
{y : |supp y| <= tau} keeps the tau links whose one-dimensional minimum
improves most on y_a = 0, and zeroes the rest.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar


@dataclass(frozen=True)
class CardinalityBudget:
    tau: int
    umax: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "umax", np.asarray(self.umax, dtype=float))
        if not 0 <= self.tau <= len(self.umax):
            raise ValueError(f"tau must lie in [0, {len(self.umax)}], got {self.tau}")
        if np.any(self.umax < 0):
            raise ValueError("umax must be nonnegative")


@dataclass(frozen=True)
class ScalarPiece:
    fun: Callable[[float], float]
    grad: Callable[[float], float]
    modulus: float = 0.0


class VectorPieces:
    """All links' pieces evaluated at once: fun(y) and grad(y) map arrays to arrays."""

    def __init__(self, fun, grad, n):
        self.fun = fun
        self.grad = grad
        self.n = n

    @classmethod
    def from_scalar(cls, pieces):
        pieces = list(pieces)
        fun = lambda y: np.array([p.fun(float(t)) for p, t in zip(pieces, y)])
        grad = lambda y: np.array([p.grad(float(t)) for p, t in zip(pieces, y)])
        return cls(fun, grad, len(pieces))


def is_member(y, budget, zero_tol=0.0):
    y = np.asarray(y, dtype=float)
    if y.shape != budget.umax.shape:
        return False
    if np.any(y < 0) or np.any(y > budget.umax):
        return False
    return int(np.count_nonzero(y > zero_tol)) <= budget.tau


def support(y, zero_tol=0.0):
    return np.flatnonzero(np.asarray(y) > zero_tol)


def _bisect(grad, umax, tol):
    """Vectorised bisection on the derivative sign over [0, umax]."""
    umax = np.asarray(umax, dtype=float)
    lo = np.zeros_like(umax)
    hi = umax.copy()
    g0 = grad(lo)
    g1 = grad(hi)
    at_lo = g0 >= 0
    at_hi = (g1 <= 0) & ~at_lo
    active = ~(at_lo | at_hi)
    tol = np.broadcast_to(np.asarray(tol, dtype=float), umax.shape)
    while True:
        open_ = active & (hi - lo > tol)
        if not open_.any():
            break
        mid = 0.5 * (lo + hi)
        g = grad(mid)
        up = open_ & (g < 0)
        down = open_ & (g >= 0)
        lo = np.where(up, mid, lo)
        hi = np.where(down, mid, hi)
    out = 0.5 * (lo + hi)
    out[at_lo] = 0.0
    out[at_hi] = umax[at_hi]
    return out


def solve_scalar(piece, umax, tol=None):
    """Minimiser and value of one strongly convex piece on [0, umax]."""
    if tol is None:
        tol = 1e-10 * max(umax, 1e-300)
    if not tol > 0:
        raise ValueError("tol must be positive")
    grad = lambda y: np.array([piece.grad(float(t)) for t in np.atleast_1d(y)])
    y = float(_bisect(grad, np.array([float(umax)]), tol)[0])
    return y, float(piece.fun(y))


def cardinality_scores(pieces, umax, tol=None):
    """Per-link (y*, score) with score = psi(y*) - psi(0) <= 0."""
    if not isinstance(pieces, VectorPieces):
        pieces = VectorPieces.from_scalar(pieces)
    umax = np.asarray(umax, dtype=float)
    if tol is None:
        tol = 1e-10 * np.maximum(umax, 1e-300)
    ystar = _bisect(pieces.grad, umax, tol)
    f0 = pieces.fun(np.zeros_like(umax))
    score = np.minimum(pieces.fun(ystar) - f0, 0.0)
    return ystar, score, f0


def select_support(score, tau, delta_zero):
    """Indices of the tau most negative scores, ties by ascending link id;
    scores >= -delta_zero never qualify."""
    order = np.lexsort((np.arange(len(score)), score))
    chosen = [int(a) for a in order[:tau] if score[a] < -delta_zero]
    return np.array(sorted(chosen), dtype=np.int64)


def solve_cardinality_step(pieces, budget, tol=None, delta_zero=None):
    """Exact minimiser of a separable strongly convex sum over the budget set."""
    ystar, score, f0 = cardinality_scores(pieces, budget.umax, tol)
    if delta_zero is None:
        delta_zero = 1e-12 * max(1.0, float(np.max(np.abs(f0))) if len(f0) else 1.0)
    keep = select_support(score, budget.tau, delta_zero)
    y = np.zeros_like(ystar)
    y[keep] = ystar[keep]
    return y


def exhaustive_cardinality_oracle(pieces, budget, grid=2001):
    """Enumerate every support of size <= tau; minimise each active piece by
    a grid scan followed by bounded local refinement. Test oracle only."""
    pieces = list(pieces)
    n = len(pieces)
    if n > 20 or budget.tau > 3:
        raise ValueError("oracle limited to at most 20 links and tau <= 3")
    if n != len(budget.umax):
        raise ValueError("one piece per link required")
    best_y = np.zeros(n)
    best_val = np.zeros(n)
    zero_val = np.array([p.fun(0.0) for p in pieces])
    for a, p in enumerate(pieces):
        u = float(budget.umax[a])
        if u <= 0:
            best_val[a] = zero_val[a]
            continue
        ys = np.linspace(0.0, u, grid)
        vals = np.array([p.fun(float(t)) for t in ys])
        k = int(np.argmin(vals))
        lo, hi = ys[max(k - 1, 0)], ys[min(k + 1, grid - 1)]
        res = minimize_scalar(p.fun, bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12 * max(u, 1.0)})
        cand = [(vals[k], ys[k]), (float(res.fun), float(res.x))]
        best_val[a], best_y[a] = min(cand)
    total0 = float(zero_val.sum())
    best = (total0, ())
    for size in range(1, budget.tau + 1):
        for supp in itertools.combinations(range(n), size):
            val = total0 + sum(best_val[a] - zero_val[a] for a in supp)
            if val < best[0]:
                best = (val, supp)
    y = np.zeros(n)
    for a in best[1]:
        y[a] = best_y[a]
    return y
