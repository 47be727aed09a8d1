import numpy as np
import pytest
from scipy.integrate import quad

from ccbcep import costs
from ccbcep.assign import solve_ue
from ccbcep.network import Link, shortest_path

L1 = Link(0, 0, 1, 5.0, 1.2, 12.0, 5.0)


@pytest.mark.parametrize("y,v,expected", [(0, 0, 5.0), (0, 1.2, 5.75), (1.2, 2.4, 5.75)])
def test_bpr_time(y, v, expected):
    assert costs.bpr_time(L1, y, v) == pytest.approx(expected, rel=1e-15)


def test_bpr_integral_closed_form():
    assert costs.bpr_integral(L1, 0.0, 1.2) == pytest.approx(6.18, rel=1e-14)
    assert costs.bpr_integral(L1, 0.3, 0.0) == 0.0


def test_bpr_dy_integral_closed_form():
    assert costs.bpr_dy_integral(L1, 0.0, 1.2) == pytest.approx(-0.6, rel=1e-14)
    assert costs.bpr_dy_integral(L1, 1.0, 0.0) == 0.0


def test_integral_matches_quadrature(rng):
    for _ in range(50):
        y, v = rng.uniform(0, 5), rng.uniform(0, 6)
        ref = quad(lambda w: costs.bpr_time(L1, y, w), 0.0, v, epsabs=0, epsrel=1e-13)[0]
        assert costs.bpr_integral(L1, y, v) == pytest.approx(ref, rel=1e-10)


def test_derivatives_match_fd(rng):
    h = 1e-5
    for _ in range(50):
        y, v = rng.uniform(0, 5), rng.uniform(0.1, 6)
        fd_y = (costs.bpr_integral(L1, y + h, v) - costs.bpr_integral(L1, y - h, v)) / (2 * h)
        assert costs.bpr_dy_integral(L1, y, v) == pytest.approx(fd_y, rel=1e-6, abs=1e-9)
        fd_v = (costs.bpr_time(L1, y, v + h) - costs.bpr_time(L1, y, v - h)) / (2 * h)
        assert costs.bpr_dv(L1, y, v) == pytest.approx(fd_v, rel=1e-6, abs=1e-9)
        fd_ty = (costs.bpr_time(L1, y + h, v) - costs.bpr_time(L1, y - h, v)) / (2 * h)
        assert costs.bpr_dy(L1, y, v) == pytest.approx(fd_ty, rel=1e-6, abs=1e-9)
        fd_vv = (costs.bpr_dv(L1, y, v + h) - costs.bpr_dv(L1, y, v - h)) / (2 * h)
        assert costs.bpr_dvv(L1, y, v) == pytest.approx(fd_vv, rel=1e-6, abs=1e-9)


def test_expansion_cost():
    assert costs.expansion_cost(L1, 2.0) == 20.0
    assert costs.expansion_cost(L1, 0.0) == 0.0
    assert costs.expansion_cost(Link(0, 0, 1, 2.67, 1.1, 11, 5.33), 1.0) == pytest.approx(5.33)
    assert costs.expansion_cost_grad(L1, 2.0) == 20.0


def test_designer_objective_trivial(hearn):
    net, _ = hearn
    z = np.zeros(net.n_links)
    assert costs.designer_objective(net, z, z, 1.0) == 0.0
    assert costs.beckmann_potential(net, z, z) == 0.0
    v = np.zeros(net.n_links)
    v[0] = 1.2
    assert costs.beckmann_potential(net, z, v) == pytest.approx(6.18)
    y = np.zeros(net.n_links)
    y[0] = 0.5
    assert costs.designer_objective(net, y, v, 2.0) == pytest.approx(
        costs.bpr_time(L1, 0.5, 1.2) * 1.2 + 2.0 * 5.0 * 0.25)


def test_designer_objective_hearn_f0(hearn):
    net, dem = hearn
    res = solve_ue(net, dem, None, tol=1e-10)
    z = np.zeros(net.n_links)
    assert costs.designer_objective(net, z, res.v, 1.0) == pytest.approx(245.6, abs=0.5)


def _random_feasible(net, dem, rng, y_scale=1.0):
    """Random route mix of two UE solutions (different y) plus a random y."""
    y1 = rng.uniform(0, y_scale, net.n_links) * net.cap
    a = solve_ue(net, dem, None, tol=1e-6).v
    b = solve_ue(net, dem, 3 * y1, tol=1e-6).v
    lam = rng.uniform()
    return rng.uniform(0, y_scale, net.n_links) * net.cap, lam * a + (1 - lam) * b


def test_joint_convexity(hearn, rng):
    net, dem = hearn
    for _ in range(20):
        y1, v1 = _random_feasible(net, dem, rng)
        y2, v2 = _random_feasible(net, dem, rng)
        ym, vm = 0.5 * (y1 + y2), 0.5 * (v1 + v2)
        for fn in (lambda y, v: costs.designer_objective(net, y, v, 1.0),
                   lambda y, v: costs.beckmann_potential(net, y, v)):
            assert fn(ym, vm) <= 0.5 * (fn(y1, v1) + fn(y2, v2)) + 1e-12


def test_gap_zero_at_ue_and_positive_at_aon(hearn):
    net, dem = hearn
    y = np.zeros(net.n_links)
    res = solve_ue(net, dem, y, tol=1e-10)
    gv = costs.gap_function(net, dem, y, res.v, ue_tol=1e-10)
    assert abs(gv.gap) <= costs.gap_slack(gv.g, 1e-10)
    # all-or-nothing at free-flow times
    aon = np.zeros(net.n_links)
    for o, d, q in dem.entries:
        route = shortest_path(net, net.t0, o, [d])[d][1]
        aon[list(route)] += q
    assert costs.gap_function(net, dem, y, aon, 1e-10).gap > 1.0


def test_grad_g_sign_and_zero_flow(hearn):
    net, dem = hearn
    y = np.zeros(net.n_links)
    g, grad, res = costs.value_and_grad_g(net, dem, y, 1e-10)
    assert np.all(grad <= 0)
    idle = res.v < 1e-12
    assert np.all(grad[idle] == 0)
    assert g == pytest.approx(costs.beckmann_potential(net, y, res.v))


def test_grad_g_matches_fd(hearn):
    net, dem = hearn
    y0 = 0.3 * net.cap
    grad = costs.grad_g(net, dem, y0, 1e-12)
    h = 1e-4 * net.cap
    for a in range(net.n_links):
        e = np.zeros(net.n_links)
        e[a] = h[a]
        gp = costs.value_function(net, dem, y0 + e, 1e-12)[0]
        gm = costs.value_function(net, dem, y0 - e, 1e-12)[0]
        fd = (gp - gm) / (2 * h[a])
        assert abs(grad[a] - fd) <= 1e-3 * max(abs(fd), 1e-3)


def _params(net, dem, rng, rho=2.0, beta=0.7):
    ya = rng.uniform(0, 1, net.n_links) * net.cap
    g, grad, res = costs.value_and_grad_g(net, dem, ya, 1e-10)
    return costs.InnerObjectiveParams(rho, beta, ya, res.v, grad, g, 1.0)


def test_majorant_zero_at_anchor_and_upper_bound(hearn, rng):
    net, dem = hearn
    p = _params(net, dem, rng)
    assert abs(costs.majorant_phi(net, p, p.y_anchor, p.v_anchor)) <= 1e-9 * abs(p.g_anchor)
    for _ in range(10):
        y, v = _random_feasible(net, dem, rng)
        phi = costs.gap_function(net, dem, y, v, 1e-10).gap
        Phi = costs.majorant_phi(net, p, y, v)
        assert Phi - phi >= -1e-6 * abs(phi) - 1e-9


def test_params_validation(hearn):
    net, _ = hearn
    z = np.zeros(net.n_links)
    with pytest.raises(ValueError):
        costs.InnerObjectiveParams(0.0, 1.0, z, z, z, 0.0, 1.0)
    with pytest.raises(ValueError):
        costs.InnerObjectiveParams(1.0, -1.0, z, z, z, 0.0, 1.0)


def test_inner_objective_aggregate(hearn, rng):
    net, dem = hearn
    p = _params(net, dem, rng)
    for _ in range(10):
        y, v = _random_feasible(net, dem, rng)
        lhs = costs.inner_objective(net, p, y, v)
        rhs = (costs.designer_objective(net, y, v, p.eta) + p.rho * costs.majorant_phi(net, p, y, v)
               + p.rb * (np.sum((y - p.y_anchor) ** 2) + np.sum((v - p.v_anchor) ** 2)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_psi_link_pieces(hearn, rng):
    net, dem = hearn
    p = _params(net, dem, rng)
    a = 5
    q = p.at(a)
    ln = net.links[a]
    base = (costs.bpr_time(ln, q.y_anchor, q.v_anchor) * q.v_anchor + q.eta * costs.expansion_cost(ln, q.y_anchor)
            + q.rho * costs.bpr_integral(ln, q.y_anchor, q.v_anchor) - q.rho * q.grad_g_anchor * q.y_anchor)
    assert costs.psi_link(ln, q, q.y_anchor, q.v_anchor) == pytest.approx(base, rel=1e-14)
    h = 1e-3
    for y in rng.uniform(h, ln.umax - h, 10):
        v = rng.uniform(0, 3)
        second = (costs.psi_link(ln, q, y + h, v) - 2 * costs.psi_link(ln, q, y, v)
                  + costs.psi_link(ln, q, y - h, v)) / h ** 2
        assert second >= 2 * q.rho * q.beta * (1 - 1e-6)
        fd = (costs.psi_link(ln, q, y + 1e-6, v) - costs.psi_link(ln, q, y - 1e-6, v)) / 2e-6
        assert costs.psi_link_dy(ln, q, y, v) == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_assignment_cost_is_v_derivative(hearn, rng):
    net, dem = hearn
    p = _params(net, dem, rng)
    ln = net.links[2]
    q = p.at(2)
    for _ in range(20):
        y, v = rng.uniform(0, 3), rng.uniform(0.01, 5)
        h = 1e-6
        fd = (costs.psi_link(ln, q, y, v + h) - costs.psi_link(ln, q, y, v - h)) / (2 * h)
        s = costs.assignment_cost(ln, q, y, v)
        assert s == pytest.approx(fd, rel=1e-8, abs=1e-7)
        assert costs.assignment_cost(ln, q, y, v + 0.1) > s


def test_assignment_cost_marginal_limit():
    q = costs.InnerObjectiveParams(1e-12, 1e-12, [0.0], [0.0], [0.0], 0.0, 1.0).at(0)
    v = 0.7
    mc = costs.bpr_time(L1, 0.0, v) + v * costs.bpr_dv(L1, 0.0, v)
    assert costs.assignment_cost(L1, q, 0.0, v) == pytest.approx(mc, rel=1e-10)
