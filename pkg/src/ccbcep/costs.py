"""Closed-form BPR objects and the scalar functions built on them.

Every function takes ``link`` as anything with ``t0``/``cap`` (and ``bcoef``
where needed): a single Link, or a whole Network for vectorised evaluation
over all links at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

BPR_A = 0.15
BPR_P = 4


def bpr_time(link, y, v):
    return link.t0 * (1.0 + BPR_A * (v / (link.cap + y)) ** BPR_P)


def bpr_dv(link, y, v):
    """Flow derivative of the link time."""
    c = link.cap + y
    return 0.6 * link.t0 * v ** 3 / c ** 4


def bpr_dvv(link, y, v):
    c = link.cap + y
    return 1.8 * link.t0 * v ** 2 / c ** 4


def bpr_dy(link, y, v):
    """Capacity derivative of the link time."""
    c = link.cap + y
    return -0.6 * link.t0 * v ** 4 / c ** 5


def bpr_integral(link, y, v):
    """Antiderivative of bpr_time in v, from 0."""
    c = link.cap + y
    return link.t0 * v + 0.03 * link.t0 * v ** 5 / c ** 4


def bpr_dy_integral(link, y, v):
    """y-derivative of bpr_integral."""
    c = link.cap + y
    return -0.12 * link.t0 * v ** 5 / c ** 5


def expansion_cost(link, y):
    return link.bcoef * y * y


def expansion_cost_grad(link, y):
    return 2.0 * link.bcoef * y


def designer_objective(net, y, v, eta):
    """Total travel time plus eta times total expansion cost."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.sum(bpr_time(net, y, v) * v) + eta * np.sum(expansion_cost(net, y)))


def beckmann_potential(net, y, v):
    return float(np.sum(bpr_integral(net, np.asarray(y, float), np.asarray(v, float))))


class GapValue(NamedTuple):
    gap: float
    g: float
    rel_gap: float


def value_function(net, demand, y, ue_tol=1e-8, warm=None):
    """g(y) = min Beckmann potential; returns (g, AssignResult)."""
    from .assign import solve_ue

    res = solve_ue(net, demand, y, tol=ue_tol, warm=warm)
    return res.potential_value, res


def gap_function(net, demand, y, v, ue_tol=1e-8, warm=None):
    g, res = value_function(net, demand, y, ue_tol, warm)
    return GapValue(beckmann_potential(net, y, v) - g, g, res.rel_gap)


def gap_slack(g, ue_tol):
    return 10.0 * ue_tol * abs(g)


def value_and_grad_g(net, demand, y, ue_tol=1e-8, warm=None):
    """(g(y), grad g(y), AssignResult) from one UE solve."""
    from .assign import solve_ue

    y = np.asarray(y, dtype=float)
    res = solve_ue(net, demand, y, tol=ue_tol, warm=warm)
    return res.potential_value, bpr_dy_integral(net, y, res.flow.v), res


def grad_g(net, demand, y, ue_tol=1e-8, warm=None):
    return value_and_grad_g(net, demand, y, ue_tol, warm)[1]


@dataclass
class InnerObjectiveParams:
    rho: float
    beta: float
    y_anchor: np.ndarray
    v_anchor: np.ndarray
    grad_g_anchor: np.ndarray
    g_anchor: float
    eta: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        self.y_anchor = np.asarray(self.y_anchor, dtype=float)
        self.v_anchor = np.asarray(self.v_anchor, dtype=float)
        self.grad_g_anchor = np.asarray(self.grad_g_anchor, dtype=float)

    @property
    def rb(self):
        return self.rho * self.beta

    def at(self, a):
        """Scalar view of the anchor data for link ``a``."""
        return _LinkParams(self.rho, self.beta, self.y_anchor[a], self.v_anchor[a],
                           self.grad_g_anchor[a], self.eta)


class _LinkParams(NamedTuple):
    rho: float
    beta: float
    y_anchor: float
    v_anchor: float
    grad_g_anchor: float
    eta: float


def majorant_phi(net, params, y, v):
    """Linearised upper bound on the gap function."""
    y = np.asarray(y, dtype=float)
    lin = params.g_anchor + float(np.dot(params.grad_g_anchor, y - params.y_anchor))
    return beckmann_potential(net, y, v) - lin


def psi_link(link, params, y, v):
    """Separable piece of the inner objective (without the aggregate constant).

    ``params`` is either the full InnerObjectiveParams (with ``link`` a
    Network) or a per-link view from ``params.at(a)``.
    """
    rb = params.rho * params.beta
    dy = y - params.y_anchor
    dv = v - params.v_anchor
    return (bpr_time(link, y, v) * v + params.eta * expansion_cost(link, y)
            + params.rho * bpr_integral(link, y, v) - params.rho * params.grad_g_anchor * y
            + rb * dy * dy + rb * dv * dv)


def psi_link_dy(link, params, y, v):
    rb = params.rho * params.beta
    return (bpr_dy(link, y, v) * v + params.eta * expansion_cost_grad(link, y)
            + params.rho * (bpr_dy_integral(link, y, v) - params.grad_g_anchor)
            + 2.0 * rb * (y - params.y_anchor))


def psi_constant(params):
    return -params.rho * params.g_anchor + params.rho * float(np.dot(params.grad_g_anchor, params.y_anchor))


def inner_objective(net, params, y, v):
    """F + rho Phi + rho beta ||(y - y^k, v - v^k)||^2."""
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.sum(psi_link(net, params, y, v))) + psi_constant(params)


def assignment_cost(link, params, y, v):
    """Partial derivative of psi_link in v."""
    return ((1.0 + params.rho) * bpr_time(link, y, v) + v * bpr_dv(link, y, v)
            + 2.0 * params.rho * params.beta * (v - params.v_anchor))
