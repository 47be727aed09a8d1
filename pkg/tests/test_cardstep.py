import numpy as np
import pytest

from ccbcep import costs
from ccbcep.cardstep import (CardinalityBudget, ScalarPiece, VectorPieces, cardinality_scores,
                             exhaustive_cardinality_oracle, is_member, select_support,
                             solve_cardinality_step, solve_scalar, support)


def quad_piece(k, m):
    return ScalarPiece(lambda y: k * (y - m) ** 2, lambda y: 2 * k * (y - m), 2 * k)


def random_pieces(rng, n):
    """Strongly convex pieces mixing quadratics with a quartic term."""
    out = []
    for _ in range(n):
        k, m, q = rng.uniform(0.2, 3), rng.uniform(-1, 3), rng.uniform(0, 0.5)
        out.append(ScalarPiece(lambda y, k=k, m=m, q=q: k * (y - m) ** 2 + q * y ** 4,
                               lambda y, k=k, m=m, q=q: 2 * k * (y - m) + 4 * q * y ** 3, 2 * k))
    return out


def total(pieces, y):
    return sum(p.fun(float(t)) for p, t in zip(pieces, y))


def test_budget_validation():
    with pytest.raises(ValueError):
        CardinalityBudget(3, np.ones(2))
    with pytest.raises(ValueError):
        CardinalityBudget(-1, np.ones(2))
    with pytest.raises(ValueError):
        CardinalityBudget(1, np.array([1.0, -1.0]))


def test_membership():
    b = CardinalityBudget(2, np.full(4, 2.0))
    assert is_member(np.zeros(4), b)
    assert not is_member(np.array([1, 1, 1, 0.0]), b)
    assert is_member(np.array([1, 1, 1e-9, 0.0]), b, zero_tol=1e-6)
    assert not is_member(np.array([3, 0, 0, 0.0]), b)
    assert not is_member(np.array([-1e-3, 0, 0, 0.0]), b)
    assert not is_member(np.zeros(3), b)
    full = CardinalityBudget(4, np.full(4, 2.0))
    assert is_member(np.full(4, 2.0), full)
    assert support(np.array([0, 1e-9, 2]), 1e-6).tolist() == [2]


def test_solve_scalar_interior_and_boundary():
    y, val = solve_scalar(quad_piece(1, 1), 2.0)
    assert y == pytest.approx(1.0, abs=2e-10) and val == pytest.approx(0.0, abs=1e-18)
    y, _ = solve_scalar(quad_piece(1, -1), 2.0)
    assert y == 0.0
    y, _ = solve_scalar(quad_piece(1, 5), 2.0)
    assert y == 2.0
    with pytest.raises(ValueError):
        solve_scalar(quad_piece(1, 1), 2.0, tol=0.0)


def test_solve_scalar_on_psi_piece(hearn, rng):
    net, dem = hearn
    ya = rng.uniform(0, 1, net.n_links) * net.cap
    g, grad, res = costs.value_and_grad_g(net, dem, ya, 1e-10)
    p = costs.InnerObjectiveParams(1.5, 4.0, ya, res.v, grad, g, 1.0)
    a = 5
    ln, q, v = net.links[a], p.at(a), res.v[a]
    piece = ScalarPiece(lambda y: costs.psi_link(ln, q, y, v), lambda y: costs.psi_link_dy(ln, q, y, v))
    y, _ = solve_scalar(piece, ln.umax)
    grid = np.arange(0.0, ln.umax, 1e-6)
    ref = grid[np.argmin(costs.psi_link(ln, q, grid, v))]
    assert y == pytest.approx(ref, abs=2e-6)


def test_two_link_example():
    pieces = [quad_piece(1, 1), quad_piece(3, 0.5)]
    b = CardinalityBudget(1, np.full(2, 2.0))
    y = solve_cardinality_step(pieces, b)
    assert y == pytest.approx([1.0, 0.0], abs=1e-9)
    _, score, _ = cardinality_scores(pieces, b.umax)
    assert score == pytest.approx([-1.0, -0.75], abs=1e-9)


def test_tau_zero_and_full():
    pieces = [quad_piece(1, 1), quad_piece(3, 0.5), quad_piece(1, -2)]
    umax = np.full(3, 2.0)
    assert np.all(solve_cardinality_step(pieces, CardinalityBudget(0, umax)) == 0)
    y = solve_cardinality_step(pieces, CardinalityBudget(3, umax))
    assert y == pytest.approx([1.0, 0.5, 0.0], abs=1e-9)
    assert np.all(exhaustive_cardinality_oracle(pieces, CardinalityBudget(0, umax)) == 0)


def test_tie_break_by_link_id():
    assert select_support(np.array([-1.0, -2.0, -1.0, -1.0]), 2, 0.0).tolist() == [0, 1]
    assert select_support(np.array([-1.0, 0.0, -1e-15]), 3, 1e-12).tolist() == [0]


def test_oracle_single_link_matches_scalar():
    p = quad_piece(2, 0.7)
    y = exhaustive_cardinality_oracle([p], CardinalityBudget(1, np.array([2.0])))
    assert y[0] == pytest.approx(solve_scalar(p, 2.0)[0], abs=1e-8)


def test_oracle_guard():
    with pytest.raises(ValueError):
        exhaustive_cardinality_oracle([quad_piece(1, 1)] * 21, CardinalityBudget(1, np.ones(21)))
    with pytest.raises(ValueError):
        exhaustive_cardinality_oracle([quad_piece(1, 1)] * 5, CardinalityBudget(4, np.ones(5)))


def test_random_quadratics_match_oracle(rng):
    for _ in range(100):
        pieces = [quad_piece(rng.uniform(0.2, 3), rng.uniform(-1, 3)) for _ in range(8)]
        b = CardinalityBudget(2, rng.uniform(0.5, 3, 8))
        y = solve_cardinality_step(pieces, b)
        yo = exhaustive_cardinality_oracle(pieces, b)
        assert is_member(y, b)
        assert total(pieces, y) <= total(pieces, yo) + 1e-8


def test_objective_monotone_in_tau(rng):
    for _ in range(20):
        pieces = random_pieces(rng, 6)
        umax = rng.uniform(0.5, 3, 6)
        vals = [total(pieces, solve_cardinality_step(pieces, CardinalityBudget(t, umax))) for t in range(7)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_vector_pieces_match_scalar(rng):
    pieces = random_pieces(rng, 5)
    vp = VectorPieces.from_scalar(pieces)
    b = CardinalityBudget(2, np.full(5, 2.0))
    assert solve_cardinality_step(vp, b) == pytest.approx(solve_cardinality_step(pieces, b))
