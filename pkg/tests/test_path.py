import numpy as np
import pytest

from oracles import oracle_0d
from shallowlake import path
from shallowlake.path import (PathFamily, PathOptions, PathSolution, SkibaError, bvp_solve,
                              classify_optimal, constant_path, iscont, make_problem, skiba_find)
from shallowlake.spectral import SpectrumError


@pytest.fixture(scope="module")
def p3_to_fsm(cat065, p3_065, sys065):
    return iscont(p3_065.P, cat065["FSM"], sys065)


def test_constant_path_is_exact(cat065, sys065):
    fsc = cat065["FSC"]
    prob = make_problem(fsc.P, fsc, sys065)
    sol = bvp_solve(prob, constant_path(fsc, 100.0, 20), alpha=0.0)
    assert sol.residual_norm < 1e-13 and sol.terminal_gap == 0.0
    assert sol.J == pytest.approx(fsc.J, rel=1e-10)


def test_flat_path_matches_0d_oracle(cat065, sys065):
    fsc = cat065["FSC"]
    P0 = fsc.P + 0.1
    t = np.linspace(0.0, 100.0, 101)
    prob = make_problem(P0, fsc, sys065)
    sol = bvp_solve(prob, constant_path(fsc, 100.0, 100), PathOptions(adapt=False, bvp_tol=1e-12), alpha=1.0)
    n = sys065.n
    assert np.ptp(sol.U[:, :n], axis=1).max() < 1e-8
    assert np.ptp(sol.U[:, n:], axis=1).max() < 1e-8
    ref = oracle_0d(P0[0], fsc.P[0], fsc.q[0], t)
    np.testing.assert_allclose(sol.U[:, 0], ref[:, 0], rtol=0, atol=1e-8)
    np.testing.assert_allclose(sol.U[:, n], ref[:, 1], rtol=0, atol=1e-8 * np.abs(ref[:, 1]).max())


def test_time_mesh_halving_is_second_order(p3_to_fsm):
    prob = p3_to_fsm.problem
    base = p3_to_fsm[-1]
    opt = PathOptions(adapt=False)
    J = []
    for m in (200, 400, 800):
        t = np.linspace(0, base.T, m + 1)
        J.append(bvp_solve(prob, base.on_mesh(t), opt, 1.0).J)
    ratio = (J[0] - J[1]) / (J[1] - J[2])
    assert 3.0 < ratio < 5.0, (J, ratio)


def test_lumped_jacobian_gives_same_answer(p3_to_fsm):
    prob = p3_to_fsm.problem
    base = p3_to_fsm[-1]
    guess = base.on_mesh(np.linspace(0, base.T, 401))  # not converged on this mesh
    exact = bvp_solve(prob, guess, PathOptions(adapt=False, bvp_tol=1e-11), 1.0)
    lumped = bvp_solve(prob, guess, PathOptions(adapt=False, bvp_tol=1e-11, delta=1e-6, maxit=80), 1.0)
    np.testing.assert_allclose(lumped.U, exact.U, rtol=0, atol=1e-7)
    assert lumped.J == pytest.approx(exact.J, rel=1e-9)


def test_accepted_path_invariants(p3_to_fsm, cat065, p3_065):
    sol = p3_to_fsm[-1]
    assert sol.alpha == 1.0
    assert sol.residual_norm < 1e-8 * (1 + np.abs(sol.U).max())
    assert sol.terminal_gap < 0.05 * (1 + np.abs(cat065["FSM"].u).max())
    assert np.all(sol.q() < 0)
    assert sol.J > p3_065.J
    alphas = p3_to_fsm.alphas
    assert alphas[0] == 0.0 and np.all(np.diff(alphas) > 0)


def test_tail_decays_at_slowest_stable_rate(cat065, p3_065, sys065, ps065):
    # target with a slow stable mode: the final quarter is governed by it
    fam = iscont(p3_065.P, ps065, sys065)
    sol = fam[-1]
    rate = fam.problem.psi.slowest_rate
    gap = np.abs(sol.U - ps065.u).max(axis=1)
    tail = sol.t >= 0.75 * sol.T
    pred = gap[-1] * np.exp(rate * (sol.T - sol.t[tail]))
    ratio = gap[tail] / pred
    assert np.all((ratio > 0.1) & (ratio < 10.0))


def test_arclength_agrees_with_natural_steps(p3_to_fsm):
    prob = p3_to_fsm.problem
    opt = PathOptions(arc_max_steps=2, adapt=False)
    arc = path._arclength(prob, p3_to_fsm[0].on_mesh(p3_to_fsm[1].t), p3_to_fsm[1], opt)
    assert arc
    a = arc[-1]
    nat = bvp_solve(prob, a, PathOptions(adapt=False), a.alpha)
    np.testing.assert_allclose(nat.U, a.U, atol=1e-7)


def test_defective_target_rejected(cat065, p3_065, sys065):
    with pytest.raises(SpectrumError, match="no SPP"):
        iscont(p3_065.P, cat065["FSI"], sys065)


def test_start_path_must_match(p3_to_fsm, cat065, sys065):
    with pytest.raises(ValueError):
        iscont(cat065["FSC"].P, cat065["FSM"], sys065, start=p3_to_fsm[-1], P_start=cat065["FSC"].P)


def _fake_family(values, alphas, reverse=False):
    n = 2
    a, b = np.zeros(n), np.ones(n)
    P0, Ps = (a, b) if reverse else (b, a)

    prob = path.BvpProblem(None, None, None, P0, Ps)
    fam = PathFamily(prob)
    for al, J in zip(alphas, values):
        U = np.r_[prob.P_left(al), -np.ones(n)][None, :]
        fam.append(PathSolution(np.array([0.0]), U, al, J))
    return fam


def test_no_intersection():
    A = _fake_family([-1.0, -2.0, -3.0], [0.0, 0.5, 1.0])
    B = _fake_family([-5.0, -6.0, -7.0], [0.0, 0.5, 1.0], reverse=True)
    with pytest.raises(SkibaError, match="no intersection"):
        skiba_find(A, B)


def test_line_mismatch():
    A = _fake_family([-1.0, -2.0], [0.0, 1.0])
    B = _fake_family([-2.0, -1.0], [0.0, 1.0])
    B.problem = path.BvpProblem(None, None, None, np.array([2.0, 0.0]), np.zeros(2))
    for s in B:
        s.U[0, :2] = B.problem.P_left(s.alpha)
    with pytest.raises(SkibaError, match="common line"):
        skiba_find(A, B)


def test_segment_crossings():
    out = path._segment_crossings([0, 1], [0, 1], [0, 1], [1, 0])
    assert len(out) == 1
    x, y, i, j = out[0]
    assert (x, y, i, j) == pytest.approx((0.5, 0.5, 0, 0))
    assert path._envelope(np.array([0, 1, 0.5]), np.array([0, 1, 3]), 0.75) == pytest.approx(2.0)


def test_classify_preconditions(cat065, sys065):
    with pytest.raises(ValueError):
        classify_optimal([], sys065)
    with pytest.raises(SpectrumError):
        classify_optimal([cat065["FSC"], cat065["FSI"]], sys065)


def test_single_state_is_undominated(cat065, sys065):
    rep = classify_optimal([cat065["FSM"]], sys065)
    e = rep["FSM"]
    assert not e.dominated and e.best_target == "FSM" and e.best_J == cat065["FSM"].J


def test_objective_large_discount_limit(cat065, sys065, p3_to_fsm):
    # for r -> infinity the value is dominated by the initial payoff
    from shallowlake.cansys import discounted_objective, objective_density
    sol = p3_to_fsm[-1]
    n = sys065.n
    payoff = np.array([objective_density(u[:n], u[n:], sys065) for u in sol.U])
    r = 1e4
    t = np.linspace(0, sol.T, 200001)
    pay = np.interp(t, sol.t, payoff)
    assert discounted_objective(t, pay, r) * r == pytest.approx(payoff[0], rel=1e-3)
