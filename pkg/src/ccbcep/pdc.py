"""Penalised difference-of-convex method and its alternating inner solver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import costs
from .assign import solve_inner_v
from .cardstep import CardinalityBudget, VectorPieces, is_member, solve_cardinality_step

BETA_RULES = ("midpoint", "paper_sum")


@dataclass
class PdcConfig:
    tau: int
    eta: float = 1.0
    eps1: float = 1e-3
    eps2: float = 1e-3
    eps3: float = 1e-3
    rho0: float = 1.0
    sigma: float = 1.25
    theta_l: float = 10.0
    theta_u: float = 20.0
    beta_rule: str = "midpoint"
    inner_tol: float = 1e-8
    assign_tol: float = 1e-10
    max_outer: int = 1000
    max_inner: int = 500
    zero_tol: float | None = None

    def __post_init__(self):
        if min(self.eps1, self.eps2, self.eps3) <= 0:
            raise ValueError("eps1, eps2, eps3 must be positive")
        if not self.sigma > 1:
            raise ValueError("sigma must exceed 1")
        if not 0 < self.theta_l < self.theta_u:
            raise ValueError("need 0 < theta_l < theta_u")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.beta_rule not in BETA_RULES:
            raise ValueError(f"beta_rule must be one of {BETA_RULES}")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def beta(self, rho):
        if self.beta_rule == "paper_sum":
            return (self.theta_l + self.theta_u) / rho
        return 0.5 * (self.theta_l + self.theta_u) / rho


def theorem2_tolerances(eps, theta_u):
    """(eps2, eps3) calibrated so that e1, e2, e3 certify an eps-KKT point."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not theta_u > 0:
        raise ValueError("theta_u must be positive")
    return eps / (2.0 * math.sqrt(2.0) * theta_u), eps


def merit(net, demand, y, v, rho, eta, ue_tol=1e-10, g=None):
    """F(y, v) + rho * gap(y, v); pass ``g`` to reuse a known g(y)."""
    F = costs.designer_objective(net, y, v, eta)
    if rho == 0:
        return F
    if g is None:
        g = costs.value_function(net, demand, y, ue_tol)[0]
    return F + rho * (costs.beckmann_potential(net, y, v) - g)


@dataclass
class AmaResult:
    y: np.ndarray
    v: np.ndarray
    flow: object
    sweeps: int
    psi: list
    converged: bool


def _pieces(net, params, v):
    fun = lambda y: costs.psi_link(net, params, y, v)
    grad = lambda y: costs.psi_link_dy(net, params, y, v)
    return VectorPieces(fun, grad, net.n_links)


def ama_solve(net, demand, config, params, init_y, warm=None, budget=None):
    """Alternate exact flow and expansion steps on the inner objective.

    Stops when successive iterates agree to ``config.inner_tol`` (relative,
    sup-norm) in both blocks. ``psi`` lists the inner objective at the start
    and after every sweep.
    """
    if budget is None:
        budget = CardinalityBudget(config.tau, net.umax)
    y = np.asarray(init_y, dtype=float).copy()
    v = params.v_anchor.copy()
    flow = warm
    psi = [costs.inner_objective(net, params, y, v)]
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_inner + 1):
        res = solve_inner_v(net, demand, params, y, tol=config.assign_tol, warm=flow)
        flow = res.flow
        v_new = flow.v
        y_new = solve_cardinality_step(_pieces(net, params, v_new), budget)
        # the bisection is exact only to its tolerance; never accept an increase
        if costs.inner_objective(net, params, y_new, v_new) > costs.inner_objective(net, params, y, v_new):
            y_new = y
        dy = np.max(np.abs(y_new - y), initial=0.0)
        dv = np.max(np.abs(v_new - v), initial=0.0)
        small = (dy <= config.inner_tol * (1.0 + np.max(np.abs(y), initial=0.0))
                 and dv <= config.inner_tol * (1.0 + np.max(np.abs(v), initial=0.0)))
        y, v = y_new, v_new
        psi.append(costs.inner_objective(net, params, y, v))
        if small:
            converged = True
            break
    return AmaResult(y, v, flow, sweeps, psi, converged)


@dataclass
class TraceRow:
    k: int
    rho: float
    beta: float
    e1: float
    e2: float
    e3: float
    merit: float
    merit_prev: float
    F: float
    phi: float
    supp_size: int
    elapsed_s: float
    sweeps: int
    psi: list
    y_anchor: np.ndarray
    v_anchor: np.ndarray
    g_anchor: float
    grad_anchor: np.ndarray
    y: np.ndarray
    v: np.ndarray

    CSV_FIELDS = ("k", "rho", "beta", "e1", "e2", "e3", "merit", "F", "supp_size", "elapsed_s")

    def csv_row(self):
        return [getattr(self, f) for f in self.CSV_FIELDS]

    def to_dict(self):
        out = {}
        for key, val in self.__dict__.items():
            out[key] = val.tolist() if isinstance(val, np.ndarray) else val
        return out


@dataclass
class PdcTrace:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)


@dataclass
class KktCertificate:
    eps_feasibility: float
    eps1: float
    eps2: float
    mu: float
    converged: bool
    phi_final: float
    iterations: int


def recompute_e3(row, net):
    """Majorant value rebuilt from the logged anchor data."""
    lin = row.g_anchor + float(np.dot(row.grad_anchor, np.asarray(row.y) - np.asarray(row.y_anchor)))
    return costs.beckmann_potential(net, row.y, row.v) - lin


def pdc_solve(net, demand, config, y0=None, callback=None):
    """Run the outer penalty loop from ``y0`` (default: no expansion).

    Returns (y, FlowState, KktCertificate, PdcTrace).
    """
    budget = CardinalityBudget(config.tau, net.umax)
    zero_tol = config.zero_tol if config.zero_tol is not None else 1e-6 * float(np.max(net.cap))
    y = np.zeros(net.n_links) if y0 is None else np.asarray(y0, dtype=float).copy()
    if not is_member(y, budget, 0.0):
        raise ValueError("y0 violates the box or the cardinality budget")
    anchor_tol = 0.01 * config.assign_tol
    start = time.perf_counter()
    g, grad, ue = costs.value_and_grad_g(net, demand, y, anchor_tol)
    flow = ue.flow
    v = flow.v.copy()
    rho = config.rho0
    beta = config.beta(rho)
    trace = PdcTrace()
    converged = False
    e1 = e2 = e3 = math.inf
    phi = 0.0
    for k in range(config.max_outer):
        params = costs.InnerObjectiveParams(rho, beta, y, v, grad, g, config.eta)
        ama = ama_solve(net, demand, config, params, y, warm=flow, budget=budget)
        y_new, v_new = ama.y, ama.v
        e1 = float(np.linalg.norm(y_new - y))
        e2 = float(np.linalg.norm(v_new - v))
        e3 = costs.majorant_phi(net, params, y_new, v_new)
        # g and its gradient at the new point: gap for the merit, and next anchor
        g_new, grad_new, ue = costs.value_and_grad_g(net, demand, y_new, anchor_tol, warm=ue.flow)
        phi = costs.beckmann_potential(net, y_new, v_new) - g_new
        F_new = costs.designer_objective(net, y_new, v_new, config.eta)
        merit_prev = costs.designer_objective(net, y, v, config.eta) + rho * (
            costs.beckmann_potential(net, y, v) - g)
        row = TraceRow(k, rho, beta, e1, e2, e3, F_new + rho * phi, merit_prev, F_new, phi,
                       int(np.count_nonzero(y_new > zero_tol)), time.perf_counter() - start,
                       ama.sweeps, ama.psi, y, v, g, grad, y_new, v_new)
        trace.rows.append(row)
        if callback is not None:
            callback(row)
        y, v, flow = y_new, v_new, ama.flow
        g, grad = g_new, grad_new
        if e1 <= config.eps1 and e2 <= config.eps2 and e3 <= config.eps3:
            converged = True
            break
        if e3 > config.eps3:
            rho *= config.sigma
        beta = config.beta(rho)
    cert = KktCertificate(e3, e1, e2, rho, converged, phi, len(trace))
    return y, flow, cert, trace


def final_gap(net, demand, y, v, ue_tol=1e-12):
    """Independent UE solve at ``y``: returns (phi, g, rel_gap)."""
    return costs.gap_function(net, demand, y, v, ue_tol)
