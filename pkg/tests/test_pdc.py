import math

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from ccbcep import costs
from ccbcep.assign import solve_ue
from ccbcep.network import DemandTable, Link, Network
from ccbcep.pdc import (PdcConfig, ama_solve, final_gap, merit, pdc_solve, recompute_e3,
                        theorem2_tolerances)


def toy():
    links = [Link(0, 0, 1, 3.0, 1.0, 4.0, 0.5), Link(1, 0, 1, 4.0, 2.0, 4.0, 2.0)]
    return Network(links), DemandTable([(0, 1, 5.0)])


def anchor_params(net, dem, y, rho, beta, eta=1.0):
    g, grad, res = costs.value_and_grad_g(net, dem, y, 1e-12)
    return costs.InnerObjectiveParams(rho, beta, y, res.v, grad, g, eta), res.flow


@pytest.mark.parametrize("kw", [dict(eps1=0), dict(sigma=1.0), dict(theta_l=3, theta_u=2),
                                dict(theta_l=0), dict(rho0=0), dict(beta_rule="x"), dict(tau=-1)])
def test_config_validation(kw):
    kw = {"tau": 1, **kw}
    with pytest.raises(ValueError):
        PdcConfig(**kw)


def test_beta_rules():
    c = PdcConfig(tau=1, theta_l=10, theta_u=20)
    assert c.beta(4.0) == 3.75
    assert 10 <= 4.0 * c.beta(4.0) <= 20
    assert PdcConfig(tau=1, beta_rule="paper_sum").beta(4.0) == 7.5


def test_theorem2_tolerances():
    eps2, eps3 = theorem2_tolerances(1e-3, 20)
    assert eps2 == pytest.approx(1e-3 / (40 * math.sqrt(2)), rel=1e-15)
    assert eps2 == pytest.approx(1.7678e-5, rel=1e-4)
    assert eps3 == 1e-3
    assert theorem2_tolerances(1.0, 1 / (2 * math.sqrt(2)))[0] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        theorem2_tolerances(0.0, 20)


def test_merit_at_equilibrium(hearn):
    net, dem = hearn
    y = 0.2 * net.cap
    v = solve_ue(net, dem, y, tol=1e-12).v
    F = costs.designer_objective(net, y, v, 1.0)
    assert merit(net, demand=dem, y=y, v=v, rho=0.0, eta=1.0) == F
    assert merit(net, dem, y, v, 5.0, 1.0, ue_tol=1e-12) == pytest.approx(F, rel=1e-10)


def test_ama_fixed_point_on_toy():
    net, dem = toy()
    cfg = PdcConfig(tau=1, eta=1.0, inner_tol=1e-12, assign_tol=1e-13, max_inner=2000)
    p, flow = anchor_params(net, dem, np.zeros(2), 2.0, 0.3)
    out = ama_solve(net, dem, cfg, p, np.zeros(2), warm=flow)
    assert out.converged
    y, v = out.y, out.v
    assert np.count_nonzero(y) <= 1
    # v-block: minimiser along the split with y fixed
    split = minimize_scalar(lambda x: costs.inner_objective(net, p, y, np.array([x, 5 - x])),
                            bounds=(0, 5), method="bounded", options={"xatol": 1e-12})
    assert v[0] == pytest.approx(split.x, abs=1e-5)
    # y-block: every single-link support on a fine grid
    best = costs.inner_objective(net, p, np.zeros(2), v)
    for a in range(2):
        grid = np.linspace(0, 4, 40001)
        for t in grid:
            z = np.zeros(2)
            z[a] = t
            best = min(best, costs.inner_objective(net, p, z, v))
    assert costs.inner_objective(net, p, y, v) <= best + 1e-8


def test_ama_restart_at_fixed_point_returns_it():
    net, dem = toy()
    cfg = PdcConfig(tau=1, inner_tol=1e-10, assign_tol=1e-13, max_inner=2000)
    p, flow = anchor_params(net, dem, np.zeros(2), 2.0, 0.3)
    first = ama_solve(net, dem, cfg, p, np.zeros(2), warm=flow)
    # v restarts at the anchor, so one sweep recovers it and one confirms
    again = ama_solve(net, dem, cfg, p, first.y, warm=first.flow)
    assert again.converged and again.sweeps <= 2
    assert again.y == pytest.approx(first.y, abs=1e-8)
    assert again.v == pytest.approx(first.v, abs=1e-8)


def test_ama_psi_nonincreasing(hearn):
    net, dem = hearn
    cfg = PdcConfig(tau=2)
    p, flow = anchor_params(net, dem, np.zeros(net.n_links), 1.0, 15.0)
    out = ama_solve(net, dem, cfg, p, np.zeros(net.n_links), warm=flow)
    psi = out.psi
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(psi, psi[1:]))


def test_pdc_tau_zero(hearn):
    net, dem = hearn
    y, flow, cert, trace = pdc_solve(net, dem, PdcConfig(tau=0))
    assert np.all(y == 0)
    assert cert.converged and cert.eps_feasibility <= 1e-3
    # e3 bounds the true gap, and the flows sit near UE(0)
    assert final_gap(net, dem, y, flow.v).gap <= cert.eps_feasibility + 1e-9
    v0 = solve_ue(net, dem, None, tol=1e-10).v
    assert flow.v == pytest.approx(v0, abs=0.05)


def test_pdc_rejects_bad_start(hearn):
    net, dem = hearn
    y0 = np.full(net.n_links, 0.1)
    with pytest.raises(ValueError):
        pdc_solve(net, dem, PdcConfig(tau=2), y0=y0)


def test_pdc_short_run_invariants(hearn):
    net, dem = hearn
    cfg = PdcConfig(tau=2, max_outer=12)
    rows = []
    y, flow, cert, trace = pdc_solve(net, dem, cfg, callback=rows.append)
    assert len(rows) == len(trace) == cert.iterations == 12
    rhos = [r.rho for r in trace]
    assert all(b >= a for a, b in zip(rhos, rhos[1:]))
    for r in trace:
        assert cfg.theta_l - 1e-12 <= r.rho * r.beta <= cfg.theta_u + 1e-12
        assert np.count_nonzero(r.y) <= 2
        assert recompute_e3(r, net) == pytest.approx(r.e3, rel=1e-9, abs=1e-12)
        # sufficient decrease of the merit at fixed rho
        step = np.sum((r.y - r.y_anchor) ** 2) + np.sum((r.v - r.v_anchor) ** 2)
        slack = 10 * cfg.assign_tol * abs(r.merit)
        assert r.merit <= r.merit_prev - r.rho * r.beta * step + slack
        assert r.psi[-1] <= r.psi[0]
    assert set(trace.rows[0].to_dict()) >= set(r.CSV_FIELDS)
    assert len(trace.rows[0].csv_row()) == len(r.CSV_FIELDS)


def test_final_gap_at_ue(hearn):
    net, dem = hearn
    y = 0.1 * net.cap
    v = solve_ue(net, dem, y, tol=1e-12).v
    gv = final_gap(net, dem, y, v)
    assert abs(gv.gap) <= costs.gap_slack(gv.g, 1e-12) + 1e-12
