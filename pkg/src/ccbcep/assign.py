"""Path-based equilibrium assignment with column generation.

Solves min over feasible link flows of a separable convex potential whose
link marginal is a strictly increasing cost. UE, system-optimal and the
proximal inner problem all use the same engine through ``BprCost``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import costs
from .network import InfeasibleError


class BprCost:
    """Generalised BPR link cost with fixed expansion ``y``.

    cost(v) = alpha t(v) + gamma v t'(v) + kappa (v - v_anchor), whose
    antiderivative is (alpha - gamma) int t + gamma v t + kappa/2 (v - v_anchor)^2.
    (1, 0, 0) is user equilibrium, (1, 1, 0) system optimum.
    """

    def __init__(self, net, y, alpha=1.0, gamma=0.0, kappa=0.0, v_anchor=None):
        self.t0 = net.t0
        self.cap = net.cap
        self.y = np.zeros(net.n_links) if y is None else np.asarray(y, dtype=float)
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.kappa = float(kappa)
        self.v_anchor = np.zeros(net.n_links) if v_anchor is None else np.asarray(v_anchor, dtype=float)
        if self.alpha <= 0 or self.gamma < 0 or self.kappa < 0:
            raise ValueError("cost must be strictly increasing in flow")

    def cost(self, v):
        c = self.cap + self.y
        r4 = (v / c) ** 4
        out = self.alpha * self.t0 * (1.0 + costs.BPR_A * r4)
        if self.gamma:
            out = out + self.gamma * 0.6 * self.t0 * r4
        if self.kappa:
            out = out + self.kappa * (v - self.v_anchor)
        return out

    def dcost(self, v):
        c = self.cap + self.y
        out = (0.6 * self.alpha + 2.4 * self.gamma) * self.t0 * v ** 3 / c ** 4
        if self.kappa:
            out = out + self.kappa
        return out

    def potential(self, v):
        c = self.cap + self.y
        integ = self.t0 * v + 0.03 * self.t0 * v ** 5 / c ** 4
        total = self.alpha * integ
        if self.gamma:
            # v t - int t = 0.12 t0 v^5 / c^4
            total = total + self.gamma * 0.12 * self.t0 * v ** 5 / c ** 4
        if self.kappa:
            total = total + 0.5 * self.kappa * (v - self.v_anchor) ** 2
        return float(np.sum(total))


class PathSet:
    """Working routes per OD pair; rows of the path-link incidence."""

    def __init__(self, n_links, n_od):
        self.n_links = n_links
        self.n_od = n_od
        self.routes = []
        self.od = []
        self._lookup = {}
        self._inc = None

    def __len__(self):
        return len(self.routes)

    def add(self, w, route):
        key = (w, route)
        pid = self._lookup.get(key)
        if pid is not None:
            return pid, False
        pid = len(self.routes)
        self.routes.append(route)
        self.od.append(w)
        self._lookup[key] = pid
        self._inc = None
        return pid, True

    def find(self, w, route):
        return self._lookup.get((w, route))

    def incidence(self):
        if self._inc is None:
            rows = np.repeat(np.arange(len(self.routes)), [len(r) for r in self.routes])
            cols = np.fromiter((a for r in self.routes for a in r), dtype=np.int64, count=len(rows))
            self._inc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                      shape=(len(self.routes), self.n_links))
        return self._inc

    def od_array(self):
        return np.asarray(self.od, dtype=np.int64)

    def copy(self):
        new = PathSet(self.n_links, self.n_od)
        new.routes = list(self.routes)
        new.od = list(self.od)
        new._lookup = dict(self._lookup)
        new._inc = self._inc
        return new


@dataclass
class FlowState:
    """Route flows ``h`` on ``paths``; ``v`` is always recomputed as Delta h."""

    paths: PathSet
    h: np.ndarray
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.v = self.paths.incidence().T @ self.h

    def od_flows(self):
        return np.bincount(self.paths.od_array(), weights=self.h, minlength=self.paths.n_od)

    def copy(self):
        return FlowState(self.paths.copy(), self.h.copy())


@dataclass
class AssignProblem:
    net: object
    demand: object
    cost: object


@dataclass
class AssignResult:
    flow: FlowState
    rel_gap: float
    iters: int
    potential_value: float
    converged: bool
    history: list = field(default_factory=list)

    @property
    def v(self):
        return self.flow.v


class NegativeCycleError(RuntimeError):
    pass


def _trees(net, c, origins):
    if np.all(c > 0):
        return net.shortest_trees(c, origins)
    return _label_correcting(net, c, origins)


def _label_correcting(net, c, origins):
    # zero or negative arc costs can appear in the proximal inner problem
    n = net.n_nodes
    dist = np.full((len(origins), n), np.inf)
    pred = np.full((len(origins), n), -1, dtype=np.int64)
    heads = net.head.tolist()
    cl = c.tolist()
    for k, o in enumerate(np.asarray(origins).tolist()):
        d = dist[k]
        d[o] = 0.0
        queue = deque([o])
        inq = [False] * n
        inq[o] = True
        count = [0] * n
        while queue:
            u = queue.popleft()
            inq[u] = False
            du = d[u]
            for a in net.adjacency[u]:
                j = heads[a]
                nd = du + cl[a]
                if nd < d[j] - 1e-15 * abs(nd):
                    d[j] = nd
                    pred[k, j] = a
                    if not inq[j]:
                        count[j] += 1
                        if count[j] > n:
                            raise NegativeCycleError("negative cycle in assignment costs")
                        inq[j] = True
                        queue.append(j)
    return dist, pred


class _Engine:
    def __init__(self, problem):
        self.net = problem.net
        self.dem = problem.demand
        self.model = problem.cost
        origins = self.dem.origins()
        self.origins = origins
        row = {int(o): i for i, o in enumerate(origins)}
        self.orow = np.array([row[int(o)] for o in self.dem.orig], dtype=np.int64)
        self.dest = self.dem.dest
        self.d = self.dem.d
        self.eps_den = 1e-12 * self.dem.total * float(np.min(self.net.t0))

    def shortest(self, c):
        try:
            dist, pred = _trees(self.net, c, self.origins)
            pi = dist[self.orow, self.dest]
        except NegativeCycleError:
            # shortest simple routes are out of reach; take the cheapest
            # routes under clipped costs and price them at the true costs
            floor = 1e-12 * max(float(np.max(np.abs(c))), 1e-300)
            dist, pred = self.net.shortest_trees(np.maximum(c, floor), self.origins)
            pi = dist[self.orow, self.dest]
            for w in np.flatnonzero(np.isfinite(pi)).tolist():
                route = self.net.trace_route(pred[self.orow[w]], int(self.dem.orig[w]), int(self.dest[w]))
                pi[w] = float(np.sum(c[list(route)]))
        if not np.all(np.isfinite(pi)):
            w = int(np.argmin(np.isfinite(pi)))
            lab = self.net.labels
            raise InfeasibleError(f"OD {lab[self.dem.orig[w]]}->{lab[self.dest[w]]} is disconnected")
        return pi, pred

    def gap(self, v, c, pi):
        low = float(np.dot(self.d, pi))
        return max(float(np.dot(v, c)) - low, 0.0) / max(abs(low), self.eps_den)

    def shortest_routes(self, paths, pred, pi=None, cp=None):
        """Shortest route index per OD, adding new columns as needed.

        With the current route costs ``cp`` given, ODs whose cheapest working
        route already attains ``pi`` skip the tree walk.
        """
        n_od = len(self.d)
        s_idx = np.empty(n_od, dtype=np.int64)
        todo = np.arange(n_od)
        if cp is not None and len(cp):
            od = paths.od_array()
            order = np.lexsort((cp, od))
            first = np.r_[True, od[order][1:] != od[order][:-1]]
            best = np.full(n_od, -1, dtype=np.int64)
            best[od[order][first]] = order[first]
            have = best >= 0
            ok = np.zeros(n_od, dtype=bool)
            ok[have] = cp[best[have]] <= pi[have] + 1e-13 * np.abs(pi[have])
            s_idx[ok] = best[ok]
            todo = np.flatnonzero(~ok)
        added = False
        orig = self.dem.orig
        for w in todo.tolist():
            route = self.net.trace_route(pred[self.orow[w]], int(orig[w]), int(self.dest[w]))
            s_idx[w], new = paths.add(w, route)
            added |= new
        return s_idx, added


def _initial_state(eng, paths, c):
    pi, pred = eng.shortest(c)
    s_idx, _ = eng.shortest_routes(paths, pred)
    h = np.zeros(len(paths))
    np.add.at(h, s_idx, eng.d)
    return FlowState(paths, h)


def solve_assignment(problem, tol=1e-8, max_iters=500, warm_start=None, record=False,
                     newton_cap=2000):
    """Equilibrate to relative gap ``tol``.

    The relative gap is (sum v c - sum d pi) / max(sum d pi, eps_den) with pi
    the current shortest route costs. On iteration budget exhaustion the last
    iterate is returned with ``converged=False``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    eng = _Engine(problem)
    model = problem.cost
    n_od = len(eng.d)
    n_links = problem.net.n_links
    if n_od == 0:
        empty = FlowState(PathSet(n_links, 0), np.zeros(0))
        return AssignResult(empty, 0.0, 0, model.potential(empty.v), True)

    if warm_start is not None:
        paths = warm_start.paths.copy()
        if paths.n_od != n_od:
            raise ValueError("warm start belongs to a different demand table")
        h = warm_start.h.copy()
        wsum = np.bincount(paths.od_array(), weights=h, minlength=n_od)
        if not np.allclose(wsum, eng.d, rtol=1e-9, atol=1e-12 * eng.dem.total):
            raise ValueError("warm start does not conserve the demand")
        state = FlowState(paths, h)
    else:
        paths = PathSet(n_links, n_od)
        state = _initial_state(eng, paths, model.cost(np.zeros(n_links)))

    history = []
    it = 0
    rel_gap = np.inf
    converged = False
    while True:
        v = state.v
        c = model.cost(v)
        pi, pred = eng.shortest(c)
        cp = paths.incidence() @ c
        if len(cp):
            # no-op for exact labels; caps the fallback ones
            low = np.full(n_od, np.inf)
            np.minimum.at(low, paths.od_array(), cp)
            pi = np.minimum(pi, low)
        rel_gap = eng.gap(v, c, pi)
        if record:
            history.append((rel_gap, model.potential(v)))
        if rel_gap <= tol:
            converged = True
            break
        if it >= max_iters:
            break
        it += 1

        s_idx, added = eng.shortest_routes(paths, pred, pi, cp)
        if added:
            state.h = np.concatenate([state.h, np.zeros(len(paths) - len(state.h))])
        inc = paths.incidence()
        od = paths.od_array()
        h = state.h
        dc = model.dcost(v)
        if added:
            cp = inc @ c
        new_h = None
        step = _newton_step(inc, od, n_od, h, cp, dc, newton_cap)
        if step is not None:
            new_h = _projected_search(model, inc, od, n_od, eng.d, h, v, c, *step)
        if new_h is None:
            delta = _jacobi_step(inc, od, n_od, h, cp, pi, dc, s_idx)
            alpha = _line_search(model, v, inc.T @ delta)
            if alpha <= 0:
                # no improvement left at floating point resolution
                break
            new_h = np.maximum(h + alpha * delta, 0.0)
            new_h[s_idx] = 0.0
            new_h[s_idx] = eng.d - np.bincount(od, weights=new_h, minlength=n_od)
        state = FlowState(paths, new_h)

    pot = model.potential(state.v)
    return AssignResult(state, rel_gap, it, pot, converged, history)


def _basic_routes(od, h, n_od):
    """Index of the largest-flow route of each OD pair."""
    order = np.lexsort((-h, od))
    first = np.ones(len(order), dtype=bool)
    first[1:] = od[order[1:]] != od[order[:-1]]
    out = np.empty(n_od, dtype=np.int64)
    out[od[order[first]]] = order[first]
    return out


def _newton_step(inc, od, n_od, h, cp, dc, cap):
    """Projected Newton direction in the space of nonbasic route flows.

    Routes at zero flow with a nonnegative reduced cost stay fixed. Returns
    (free route indices, their direction, basic routes) or None when no
    usable direction exists.
    """
    basic = _basic_routes(od, h, n_od)
    b_of = basic[od]
    g = cp - cp[b_of]
    nonbasic = np.ones(len(h), dtype=bool)
    nonbasic[basic] = False
    free = nonbasic & ((h > 0) | (g < 0))
    if not free.any():
        return None
    for _ in range(5):
        idx = np.flatnonzero(free)
        if len(idx) > cap:
            return None
        B = (inc[idx] - inc[b_of[idx]]).toarray()
        # H = M M' with M = B diag(sqrt dc) has rank <= |A| and is singular
        # whenever overlapping routes share link flows; a thin-SVD
        # pseudo-inverse keeps roundoff out of that null space
        try:
            U, S, _ = np.linalg.svd(B * np.sqrt(dc), full_matrices=False)
        except np.linalg.LinAlgError:
            return None
        lam = S * S
        if not len(lam) or lam[0] <= 0:
            return None
        keep = lam > 1e-10 * lam[0]
        dh = -(U[:, keep] @ ((U[:, keep].T @ g[idx]) / lam[keep]))
        blocked = (h[idx] <= 0) & (dh < 0)
        if not blocked.any():
            break
        free[idx[blocked]] = False
        if not free.any():
            return None
    else:
        return None
    if float(np.dot(dh, g[idx])) >= 0:
        return None
    return idx, dh, basic


def _projected_search(model, inc, od, n_od, d, h, v, c, idx, dh, basic):
    """Armijo backtracking along the projection arc h(a) = [h + a dh]_+.

    Nonbasic route flows are clamped at zero and each OD's basic route takes
    up the remainder, so many routes can leave the active set in one step.
    """
    pot0 = model.potential(v)
    # below this predicted decrease potential differences are roundoff, so
    # the test switches to the directional derivative at the trial point
    noise = 1e-11 * abs(pot0)
    alpha = 1.0
    for _ in range(40):
        new_h = h.copy()
        new_h[idx] = np.maximum(h[idx] + alpha * dh, 0.0)
        new_h[basic] = 0.0
        new_h[basic] = d - np.bincount(od, weights=new_h, minlength=n_od)
        if np.all(new_h[basic] >= 0):
            dv = inc.T @ new_h - v
            lin = float(np.dot(c, dv))
            if lin < 0:
                if -lin > noise:
                    if model.potential(v + dv) <= pot0 + 1e-4 * lin:
                        return new_h
                elif abs(float(np.dot(model.cost(v + dv), dv))) <= 0.5 * -lin:
                    return new_h
        alpha *= 0.5
    return None


def _jacobi_step(inc, od, n_od, h, cp, pi, dc, s_idx):
    """Simultaneous per-OD Newton shifts towards the shortest route."""
    s_of = s_idx[od]
    dp = inc @ dc
    overlap = inc.multiply(inc[s_of]).tocsr() @ dc
    curv = dp + dp[s_of] - 2.0 * overlap
    diff = np.maximum(cp - pi[od], 0.0)
    tiny = 1e-12 * max(float(np.max(dp)), 1e-300)
    step = np.where(curv > tiny, diff / np.maximum(curv, tiny), np.inf)
    delta = -np.minimum(h, step)
    delta[s_idx] = 0.0
    delta[s_idx] = -np.bincount(od, weights=delta, minlength=n_od)
    return delta


def _line_search(model, v, dv):
    """Exact minimiser of the convex potential along v + a dv on [0, 1]."""
    d1 = float(np.dot(model.cost(v + dv), dv))
    if d1 <= 0:
        return 1.0
    d0 = float(np.dot(model.cost(v), dv))
    if d0 >= 0:
        return 0.0
    f = lambda a: float(np.dot(model.cost(v + a * dv), dv))
    return brentq(f, 0.0, 1.0, xtol=1e-15, rtol=1e-13)


def solve_ue(net, demand, y=None, tol=1e-8, warm=None, max_iters=500):
    model = BprCost(net, y)
    return solve_assignment(AssignProblem(net, demand, model), tol, max_iters, warm)


def solve_so_assignment(net, demand, y=None, tol=1e-8, warm=None, max_iters=500):
    model = BprCost(net, y, gamma=1.0)
    return solve_assignment(AssignProblem(net, demand, model), tol, max_iters, warm)


def inner_cost_model(net, params, y_fixed):
    return BprCost(net, y_fixed, alpha=1.0 + params.rho, gamma=1.0,
                   kappa=2.0 * params.rho * params.beta, v_anchor=params.v_anchor)


def solve_inner_v(net, demand, params, y_fixed, tol=1e-10, warm=None, max_iters=500):
    """Minimise the inner objective over flows with y held fixed."""
    model = inner_cost_model(net, params, y_fixed)
    return solve_assignment(AssignProblem(net, demand, model), tol, max_iters, warm)
