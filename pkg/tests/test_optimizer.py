import numpy as np
import pytest
from conftest import const_sigma, scalar_problem

from mfcontrol.adjoint import optimality_residual
from mfcontrol.coefficients import LQSpec, check_monotonicity, inject_fault, lq_to_problem
from mfcontrol.errors import InnerSolveError, NonContractionError, StallError
from mfcontrol.forward import ControlField, TimeGrid, draw_noise, simulate_forward
from mfcontrol.lagrangian import AdjointPoint, grad_v_L
from mfcontrol.lq_oracle import solve_lq_mfc, solve_lq_mfg
from mfcontrol.measure import EmpiricalMeasure
from mfcontrol.optimizer import (SolveConfig, check_cost_convexity, gradient_check,
                                 lambda_sweep, pointwise_argmin, solve,
                                 solve_gradient_descent, solve_mfg, solve_picard_fbsde)
from mfcontrol.problems import builtin_lq, nonconvex_scalar, nonlinear_meanfield


def _ones3(x, m, v, s):
    return np.ones((x.shape[0], 1, 1))


def _linear_terminal(c, **kw):
    # f = v, g = v^2/2, g_T = c x: the adjoint is the constant c whatever the control
    return scalar_problem(f=lambda x, m, v, s: v.copy(), f_v=_ones3,
                          g=lambda x, m, v, s: 0.5 * v[:, 0] ** 2,
                          g_v=lambda x, m, v, s: v.copy(),
                          g_T=lambda x, m: c * x[:, 0], gT_x=lambda x, m: np.full_like(x, c),
                          argmin_v=lambda x, m, s, p, q: -p, **kw)


def test_stationary_start():
    p = _linear_terminal(1.0)
    grid = TimeGrid(0.0, 1.0, 10)
    init = ControlField(np.full((10, 30, 1), -1.0))
    rep = solve_gradient_descent(p, grid, SolveConfig(N=30), init)
    assert rep.converged and rep.iterations == 0 and rep.final_residual == 0.0


def test_unit_adjoint_gradient():
    p = _linear_terminal(1.0)
    grid = TimeGrid(0.0, 1.0, 10)
    from mfcontrol.optimizer import cost_gradient
    V = np.random.default_rng(0).standard_normal((10, 30, 1))
    G, _, _, adj = cost_gradient(p, grid, ControlField(V), 0)
    assert np.array_equal(adj.P, np.ones_like(adj.P))
    assert np.allclose(G, 1.0 + V, atol=1e-15)


def test_deterministic_lq_matches_riccati():
    spec = builtin_lq("scalar_lqr", sigma=0.0)
    p = lq_to_problem(spec)
    grid = TimeGrid(0.0, 1.0, 200)
    rep = solve(p, grid, SolveConfig(N=200, max_iters=300, tol_grad=1e-7, seed=1))
    x0 = rep.ensemble.states[0]
    sol = solve_lq_mfc(spec, K=200, initial_mean=x0.mean(axis=0),
                       initial_cov=np.atleast_2d(np.var(x0[:, 0])))
    assert rep.converged
    assert rep.final_cost == pytest.approx(sol.value, rel=0.01)
    want = -np.tanh(1.0 - grid.nodes[:-1])[:, None] * rep.ensemble.states[:-1, :, 0]
    assert np.max(np.abs(rep.control.values[:, :, 0] - want)) <= 0.02
    assert all(b <= a for a, b in zip(rep.J, rep.J[1:]))


def test_picard_agrees_with_gradient():
    p = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 50)
    cfg = dict(N=2000, max_iters=100, seed=3)
    g = solve(p, grid, SolveConfig(mode="gradient", **cfg))
    f = solve(p, grid, SolveConfig(mode="picard", **cfg))
    assert g.converged and f.converged
    assert f.final_cost == pytest.approx(g.final_cost, rel=0.005)


def test_picard_one_shot_on_decoupled_instance():
    p = _linear_terminal(0.8, **const_sigma(0.3))
    grid = TimeGrid(0.0, 1.0, 20)
    rep = solve_picard_fbsde(p, grid, SolveConfig(N=400, mode="picard", theta=1.0))
    assert rep.converged and rep.iterations <= 2
    assert np.allclose(rep.control.values, -0.8, atol=1e-6)


def test_nonconvex_raises():
    p = nonconvex_scalar()
    grid = TimeGrid(0.0, 1.0, 20)
    with pytest.raises(NonContractionError) as err:
        solve_picard_fbsde(p, grid, SolveConfig(N=50, mode="picard", max_iters=100,
                                                precheck=False))
    assert err.value.history is not None


def test_mfg_equals_picard_without_coupling():
    p = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 30)
    a = solve_picard_fbsde(p, grid, SolveConfig(N=500, mode="picard", seed=2))
    b = solve_mfg(p, grid, SolveConfig(N=500, mode="mfg", seed=2))
    assert a.J == b.J and np.array_equal(a.control.values, b.control.values)


def test_monotone_game_converges_to_oracle():
    # cost H_bar (x - S_T xbar)^2 / 2 with S_T = -1 contains + x xbar: Lasry-Lions monotone
    spec = LQSpec(B=1.0, sigma0=0.3, H_bar=1.0, S_T=-1.0, R=1.0, initial_mean=1.0,
                  initial_cov=0.25)
    p = lq_to_problem(spec)
    assert check_monotonicity(p, mode="lasry-lions")["pass"]
    grid = TimeGrid(0.0, 1.0, 50)
    rep = solve(p, grid, SolveConfig(N=4000, mode="mfg", theta=0.5, max_iters=100, seed=4))
    assert rep.converged
    x0 = rep.ensemble.states[0]
    sol = solve_lq_mfg(spec, K=50, initial_mean=x0.mean(axis=0),
                       initial_cov=np.atleast_2d(np.var(x0[:, 0])))
    assert rep.final_cost == pytest.approx(sol.value, rel=0.02)


def test_cost_convexity_trivial_cases():
    p = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 20)
    rng = np.random.default_rng(1)
    v1 = ControlField(rng.standard_normal((20, 100, 1)))
    v2 = ControlField(rng.standard_normal((20, 100, 1)))
    same = check_cost_convexity(p, grid, v1, v1, [0.3, 0.7], 0)
    # 0.3 v + 0.7 v rounds away from v in the last bit
    assert all(abs(r["gap"]) <= 1e-12 for r in same["rows"])
    ends = check_cost_convexity(p, grid, v1, v2, [0.0, 1.0], 0)
    assert all(r["gap"] == 0.0 for r in ends["rows"])


def test_gradient_checks():
    grid = TimeGrid(0.0, 1.0, 200)
    det = lq_to_problem(builtin_lq("scalar_lqr", sigma=0.0))
    ctrl = ControlField(0.3 * np.random.default_rng(2).standard_normal((200, 100, 1)))
    assert gradient_check(det, grid, ctrl, 0, tol=1e-4)["pass"]
    sto = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 50)
    ctrl = ControlField(0.3 * np.random.default_rng(3).standard_normal((50, 2000, 1)))
    assert gradient_check(sto, grid, ctrl, 0, tol=1e-2)["pass"]
    bad = gradient_check(sto, grid, ctrl, 0, tol=1e-2, crn=False)
    assert not bad["pass"] and bad["max_error"] > 0.1


def test_pointwise_argmin_newton_and_bisection():
    p = nonlinear_meanfield()
    rng = np.random.default_rng(5)
    x = rng.standard_normal((50, 1))
    m = EmpiricalMeasure(x)
    P, Q = rng.standard_normal((50, 1)), rng.standard_normal((50, 1, 1))
    v = pointwise_argmin(p, x, m, 0.2, P, Q, np.zeros((50, 1)))
    assert np.max(np.abs(grad_v_L(p, x, m, v, 0.2, AdjointPoint(P, Q)))) <= 1e-10
    # a D_v L with a flat region defeats Newton but not bisection
    flat = scalar_problem(g=lambda x, m, v, s: np.where(np.abs(v[:, 0] - 1) < 1, 0.0,
                                                        (np.abs(v[:, 0] - 1) - 1) ** 3 / 3),
                          g_v=lambda x, m, v, s: np.where(np.abs(v - 1) < 1, 0.0,
                                                          np.sign(v - 1) * (np.abs(v - 1) - 1) ** 2)
                          + 1e-3 * (v - 1.5))
    v = pointwise_argmin(flat, x[:5], EmpiricalMeasure(x[:5]), 0.0, P[:5], None,
                         np.full((5, 1), 40.0))
    r = grad_v_L(flat, x[:5], EmpiricalMeasure(x[:5]), v, 0.0, AdjointPoint(P[:5]))
    assert np.max(np.abs(r)) <= 1e-8


def test_pointwise_argmin_failure_in_two_dimensions():
    p = scalar_problem(n=1, d=2, f_v=lambda x, m, v, s: np.zeros((x.shape[0], 1, 2)),
                       g=lambda x, m, v, s: v[:, 0],
                       g_v=lambda x, m, v, s: np.tile([1.0, 0.0], (x.shape[0], 1)))
    x = np.zeros((3, 1))
    with pytest.raises(InnerSolveError):
        pointwise_argmin(p, x, EmpiricalMeasure(x), 0.0, np.zeros((3, 1)), None, np.zeros((3, 2)))


def test_max_iters_zero():
    p = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 10)
    for mode in ("gradient", "picard"):
        rep = solve(p, grid, SolveConfig(N=100, max_iters=0, mode=mode))
        assert not rep.converged and len(rep.J) == 1 and rep.iterations == 0


def test_wrong_gradient_stalls_and_warns():
    p = inject_fault(lq_to_problem(builtin_lq("scalar_lqr", sigma=0.0)), "flip_gT_x")
    p = p.replace(gT_x=lambda x, m: -x, g_T=lambda x, m: 0.5 * x[:, 0] ** 2,
                  g_x=lambda x, m, v, s: -x)
    grid = TimeGrid(0.0, 1.0, 20)
    with pytest.warns(RuntimeWarning):
        with pytest.raises(StallError) as err:
            solve_gradient_descent(p, grid, SolveConfig(N=50, max_iters=50))
    assert err.value.state.reason == "line search failed"


def test_config_validation():
    for bad in (dict(mode="newton"), dict(theta=0.0), dict(beta=1.0), dict(eta=-1.0),
                dict(tol_grad=0.0), dict(max_iters=-1)):
        with pytest.raises(ValueError):
            SolveConfig(**bad)


def test_lambda_sweep():
    def factory(lam):
        return scalar_problem(
            f=lambda x, m, v, s: v.copy(), f_v=_ones3,
            g=lambda x, m, v, s: 0.5 * x[:, 0] ** 2 + lam * v[:, 0] ** 2,
            g_x=lambda x, m, v, s: x.copy(), g_v=lambda x, m, v, s: 2 * lam * v,
            argmin_v=lambda x, m, s, p, q: -p / (2 * lam))
    rows = lambda_sweep(factory, [0.5, -0.05], 20, SolveConfig(N=50, mode="picard",
                                                                precheck=False))
    assert rows[0]["converged"] and rows[1]["reason"] == "NonContractionError"


def test_residual_consistent_with_report():
    p = lq_to_problem(builtin_lq("scalar_lqr"))
    grid = TimeGrid(0.0, 1.0, 20)
    rep = solve(p, grid, SolveConfig(N=400, max_iters=5))
    ens = simulate_forward(p, grid, rep.control, draw_noise(p, grid, 400, 0))
    assert np.array_equal(ens.states, rep.ensemble.states)
    assert optimality_residual(p, grid, ens, rep.control, rep.adjoint) == pytest.approx(
        rep.final_residual, rel=1e-12)
