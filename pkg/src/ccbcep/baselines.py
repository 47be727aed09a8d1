"""Reference points and comparison methods.

All methods here work on the reduced objective F*(y) = F(y, v*(y)), where
v*(y) is the user equilibrium at expansion y. Derivatives of F* come from
central finite differences over warm-started equilibrium solves; an
adjoint alternative is available for wide supports.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import costs
from .assign import solve_so_assignment, solve_ue
from .cardstep import _bisect

FD_UE_TOL = 1e-12
GRAD_METHODS = ("fd", "adjoint")


@dataclass(frozen=True)
class ReferencePoints:
    f0: float
    fso: float

    def __post_init__(self):
        if self.f0 < self.fso:
            raise ValueError(f"f0 ({self.f0}) below fso ({self.fso})")


@dataclass
class AlphaSearchLog:
    entries: list = field(default_factory=list)

    def add(self, alpha, supp_size, accepted, phase):
        self.entries.append((float(alpha), int(supp_size), bool(accepted), phase))

    def phase(self, name):
        return [e for e in self.entries if e[3] == name]

    def __len__(self):
        return len(self.entries)


class BcepResult(NamedTuple):
    y: np.ndarray
    objective: float
    converged: bool
    iters: int


class M1Result(NamedTuple):
    y: np.ndarray
    objective: float
    support: tuple
    scores: np.ndarray


class M2Result(NamedTuple):
    y: np.ndarray
    objective: float
    support: tuple
    alpha: float
    log: AlphaSearchLog
    ok: bool


class OracleResult(NamedTuple):
    y: np.ndarray
    objective: float
    support: tuple
    n_evals: int


def default_zero_tol(net):
    return 1e-6 * float(np.max(net.cap))


def equilibrium_objective(net, demand, eta, y, tol=FD_UE_TOL, warm=None):
    """F*(y) and the equilibrium solve behind it."""
    y = np.asarray(y, dtype=float)
    res = solve_ue(net, demand, y, tol=tol, warm=warm)
    return costs.designer_objective(net, y, res.v, eta), res


def _so_ystep(net, v, eta):
    grad = lambda y: costs.bpr_dy(net, y, v) * v + eta * costs.expansion_cost_grad(net, y)
    return _bisect(grad, net.umax, 1e-12 * np.maximum(net.umax, 1e-300))


class SoSolution(NamedTuple):
    y: np.ndarray
    v: np.ndarray
    objective: float
    iters: int
    converged: bool


def solve_so(net, demand, eta, tol=1e-8, max_iters=10000):
    """Alternate system-optimal flow steps and exact per-link expansion steps
    until the objective changes by at most ``tol`` (relative)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    y = np.zeros(net.n_links)
    warm = None
    prev = math.inf
    F = math.inf
    for it in range(1, max_iters + 1):
        so = solve_so_assignment(net, demand, y, tol=min(0.01 * tol, 1e-10), warm=warm)
        warm = so.flow
        y = _so_ystep(net, so.v, eta)
        F = costs.designer_objective(net, y, so.v, eta)
        if abs(prev - F) <= tol * abs(F):
            return SoSolution(y, so.v, F, it, True)
        prev = F
    return SoSolution(y, warm.v, F, max_iters, False)


def compute_references(net, demand, eta, tol=1e-8, max_iters=10000):
    """f0 at no expansion and fso from the relaxed joint problem."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    f0, _ = equilibrium_objective(net, demand, eta, np.zeros(net.n_links), tol=min(tol, 1e-10))
    return ReferencePoints(f0, solve_so(net, demand, eta, tol, max_iters).objective)


def relative_scale(f, refs):
    span = refs.f0 - refs.fso
    if not span > 0:
        raise ValueError("degenerate instance: f0 <= fso")
    return (f - refs.fso) / span


# ---------------------------------------------------------------- gradients

def _fd_steps(net, coords, rel):
    return rel * net.cap[coords]


def fd_gradient(net, demand, eta, y, coords, rel_step=1e-4, tol=FD_UE_TOL, warm=None):
    """Central differences of F* over ``coords``; one-sided at the box ends."""
    y = np.asarray(y, dtype=float)
    out = np.zeros(len(coords))
    for i, (a, h) in enumerate(zip(coords, _fd_steps(net, coords, rel_step))):
        lo, hi = max(y[a] - h, 0.0), min(y[a] + h, net.umax[a])
        if hi <= lo:
            continue
        yp, ym = y.copy(), y.copy()
        yp[a], ym[a] = hi, lo
        fp, rp = equilibrium_objective(net, demand, eta, yp, tol, warm)
        fm, _ = equilibrium_objective(net, demand, eta, ym, tol, rp.flow)
        out[i] = (fp - fm) / (hi - lo)
    return out


def adjoint_gradient(net, eta, y, res, used_tol=1e-12):
    """Exact gradient of F* from the route-flow equilibrium in ``res``.

    With basic route b(w) carrying the largest flow of each OD and B the
    rows (route - basic) over used nonbasic routes, the equilibrium moves as
    dv/dy = -B' (B T_v B')^+ B T_y, so only one reduced solve is needed.
    """
    y = np.asarray(y, dtype=float)
    flow = res.flow
    v = flow.v
    inc = flow.paths.incidence()
    od = flow.paths.od_array()
    h = flow.h
    n_od = flow.paths.n_od
    order = np.lexsort((-h, od))
    basic = np.full(n_od, -1)
    first = np.r_[True, od[order][1:] != od[order][:-1]]
    basic[od[order][first]] = order[first]
    scale = max(float(np.max(h, initial=0.0)), 1e-300)
    nb = np.flatnonzero((h > used_tol * scale) & (np.arange(len(h)) != basic[od]))
    t_y = costs.bpr_dy(net, y, v)
    g = t_y * v + eta * costs.expansion_cost_grad(net, y)
    if len(nb) == 0:
        return g
    B = (inc[nb] - inc[basic[od[nb]]]).toarray()
    t_v = costs.bpr_dv(net, y, v)
    H = (B * t_v) @ B.T
    marg = costs.bpr_time(net, y, v) + v * t_v
    lam = np.linalg.lstsq(H, B @ marg, rcond=None)[0]
    return g - t_y * (B.T @ lam)


# ------------------------------------------------------------- descent core

def _descent(net, demand, eta, coords, y0, alpha, tol, max_iters, grad, rel_step):
    """Projected spectral gradient on F* + alpha * sum(y) over the box,
    moving only ``coords``. Returns (y, F*, converged, iters)."""
    coords = np.asarray(coords, dtype=np.int64)
    y = np.clip(np.asarray(y0, dtype=float), 0.0, net.umax)
    mask = np.zeros(net.n_links, dtype=bool)
    mask[coords] = True
    y[~mask] = 0.0
    F, res = equilibrium_objective(net, demand, eta, y)
    if len(coords) == 0:
        return y, F, True, 0
    lo, hi = np.zeros(len(coords)), net.umax[coords]

    def gradient(y, res):
        if grad == "adjoint":
            return adjoint_gradient(net, eta, y, res)[coords] + alpha
        return fd_gradient(net, demand, eta, y, coords, rel_step, warm=res.flow) + alpha

    g = gradient(y, res)
    step = 0.1 * float(np.max(net.cap[coords])) / max(float(np.max(np.abs(g))), 1e-300)
    obj = F + alpha * float(np.sum(y))
    for it in range(1, max_iters + 1):
        x = y[coords]
        pg = x - np.clip(x - g, lo, hi)
        if np.max(np.abs(pg)) <= tol * (1.0 + np.max(np.abs(x))):
            return y, F, True, it - 1
        accepted = False
        s = step
        for _ in range(60):
            xn = np.clip(x - s * g, lo, hi)
            d = xn - x
            if not np.any(d):
                break
            yn = y.copy()
            yn[coords] = xn
            Fn, rn = equilibrium_objective(net, demand, eta, yn, warm=res.flow)
            objn = Fn + alpha * float(np.sum(yn))
            if objn <= obj + 1e-4 * float(np.dot(g, d)):
                accepted = True
                break
            s *= 0.5
        if not accepted:
            return y, F, True, it
        gn = gradient(yn, rn)
        dg = gn - g
        curv = float(np.dot(d, dg))
        step = float(np.dot(d, d)) / curv if curv > 0 else 2.0 * s
        step = min(max(step, 1e-12), 1e12)
        small = abs(obj - objn) <= 1e-14 * abs(obj) and np.max(np.abs(d)) <= tol
        y, F, res, g, obj = yn, Fn, rn, gn, objn
        if small:
            return y, F, True, it
    return y, F, False, max_iters


def _grid_seed(net, demand, eta, coords, points):
    """Best point of a coarse grid over the support box (screening solves)."""
    axes = [np.linspace(0.0, net.umax[a], points) for a in coords]
    best, warm = (math.inf, None), None
    for p in _snake(axes):
        y = np.zeros(net.n_links)
        y[coords] = p
        F, res = equilibrium_objective(net, demand, eta, y, 1e-8, warm)
        warm = res.flow
        if F < best[0]:
            best = (F, y)
    return best[1]


def solve_restricted_bcep(net, demand, eta, support, tol=1e-6, max_iters=500, y_init=None,
                          grad="fd", rel_step=1e-4, seed_grid=9):
    """Minimise F* over the box with y fixed to zero off ``support``.

    F* is not convex, so for supports of at most three links the descent is
    also started from the best point of a ``seed_grid``-per-axis grid and
    the better end point is returned.
    """
    if grad not in GRAD_METHODS:
        raise ValueError(f"grad must be one of {GRAD_METHODS}")
    coords = np.array(sorted(int(a) for a in support), dtype=np.int64)
    starts = [np.zeros(net.n_links) if y_init is None else np.asarray(y_init, dtype=float)]
    if seed_grid and 0 < len(coords) <= 3:
        starts.append(_grid_seed(net, demand, eta, coords, seed_grid))
    best = None
    for y0 in starts:
        y, F, ok, it = _descent(net, demand, eta, coords, y0, 0.0, tol, max_iters, grad, rel_step)
        if best is None or F < best.objective:
            best = BcepResult(y, F, ok, it)
    return best


# ----------------------------------------------------------------- methods

def sensitivity_scores(net, demand, eta, fd_step=None, tol=FD_UE_TOL):
    """e_a = -(F*(delta e_a) - F*(0)) / delta by forward differences."""
    steps = 1e-4 * net.cap if fd_step is None else np.broadcast_to(np.asarray(fd_step, float), net.cap.shape)
    if np.any(steps <= 0):
        raise ValueError("fd_step must be positive")
    F0, r0 = equilibrium_objective(net, demand, eta, np.zeros(net.n_links), tol)
    out = np.full(net.n_links, -np.inf)
    for a in range(net.n_links):
        if net.umax[a] <= 0:
            continue
        delta = min(float(steps[a]), float(net.umax[a]))
        y = np.zeros(net.n_links)
        y[a] = delta
        Fa, _ = equilibrium_objective(net, demand, eta, y, tol, r0.flow)
        out[a] = -(Fa - F0) / delta
    return out


def top_links(scores, tau):
    order = np.lexsort((np.arange(len(scores)), -scores))
    return tuple(sorted(int(a) for a in order[:tau] if np.isfinite(scores[a])))


def run_m1(net, demand, eta, tau, tol=1e-6, max_iters=500, grad="fd"):
    scores = sensitivity_scores(net, demand, eta)
    supp = top_links(scores, tau)
    res = solve_restricted_bcep(net, demand, eta, supp, tol, max_iters, grad=grad)
    return M1Result(res.y, res.objective, supp, scores)


def _support(y, zero_tol):
    return tuple(int(a) for a in np.flatnonzero(y > zero_tol))


def run_m2(net, demand, eta, tau, alpha0=0.1, gamma_c=2.0, gamma_r=0.95, tol=1e-6,
           max_iters=200, grad="fd", zero_tol=None, debias_iters=500):
    """l1-regularised search for a sparse support, then debiasing."""
    if not alpha0 > 0:
        raise ValueError("alpha0 must be positive")
    if not gamma_c > 1:
        raise ValueError("gamma_c must exceed 1")
    if not 0 < gamma_r < 1:
        raise ValueError("gamma_r must lie in (0, 1)")
    zero_tol = default_zero_tol(net) if zero_tol is None else zero_tol
    coords = np.flatnonzero(net.umax > 0)
    log = AlphaSearchLog()

    def attempt(alpha):
        y, _, _, _ = _descent(net, demand, eta, coords, np.zeros(net.n_links), alpha, tol,
                              max_iters, grad, 1e-4)
        return y, _support(y, zero_tol)

    alpha = alpha0
    while True:
        y, supp = attempt(alpha)
        ok = len(supp) <= tau
        log.add(alpha, len(supp), ok, "coarse")
        if ok:
            break
        alpha *= gamma_c
        if alpha > 1e6 * alpha0:
            F, _ = equilibrium_objective(net, demand, eta, np.zeros(net.n_links))
            return M2Result(np.zeros(net.n_links), F, (), alpha, log, False)
    best_alpha, best_y, best_supp = alpha, y, supp
    if log.entries[0][2] is False:
        while True:
            alpha *= gamma_r
            y, supp = attempt(alpha)
            ok = len(supp) <= tau
            log.add(alpha, len(supp), ok, "refine")
            if not ok:
                break
            best_alpha, best_y, best_supp = alpha, y, supp
    deb = solve_restricted_bcep(net, demand, eta, best_supp, tol, debias_iters, y_init=best_y, grad=grad)
    return M2Result(deb.y, deb.objective, best_supp, best_alpha, log, True)


def _snake(axes):
    """Grid points in boustrophedon order so neighbours share warm starts."""
    if len(axes) == 1:
        return [(t,) for t in axes[0]]
    out = []
    for i, t in enumerate(axes[0]):
        rest = _snake(axes[1:])
        if i % 2:
            rest = rest[::-1]
        out.extend((t,) + r for r in rest)
    return out


def brute_force_ccbcep(net, demand, eta, tau, grid=25, tol=1e-6, refine=5, screen_tol=1e-8):
    """Enumerate supports of size <= tau, grid their levels, refine the best."""
    cand = np.flatnonzero(net.umax > 0)
    if tau > 2 or math.comb(len(cand), tau) > 10 ** 4:
        raise ValueError("brute force limited to tau <= 2 and C(|A|, tau) <= 1e4")
    y = np.zeros(net.n_links)
    F0, res0 = equilibrium_objective(net, demand, eta, y, screen_tol)
    ranked = [(F0, (), y.copy())]
    evals = 1
    for k in range(1, tau + 1):
        for supp in itertools.combinations(cand.tolist(), k):
            axes = [np.linspace(0.0, net.umax[a], grid)[1:] for a in supp]
            warm = res0.flow
            best = (math.inf, None)
            for point in _snake(axes):
                y = np.zeros(net.n_links)
                y[list(supp)] = point
                F, res = equilibrium_objective(net, demand, eta, y, screen_tol, warm)
                warm = res.flow
                evals += 1
                if F < best[0]:
                    best = (F, y)
            ranked.append((best[0], supp, best[1]))
    ranked.sort(key=lambda r: (r[0], len(r[1]), r[1]))
    top = (math.inf, (), None)
    for F, supp, y0 in ranked[:max(refine, 1)]:
        if not supp:
            F, _ = equilibrium_objective(net, demand, eta, y0)
            cand_res = (F, supp, y0)
        else:
            r = solve_restricted_bcep(net, demand, eta, supp, tol, y_init=y0)
            cand_res = (r.objective, supp, r.y)
        if cand_res[0] < top[0]:
            top = cand_res
    return OracleResult(top[2], top[0], tuple(top[1]), evals)
