import itertools

import numpy as np
import pytest

from mfcontrol.coefficients import LQSpec, lq_to_problem
from mfcontrol.errors import OracleBlowUpError
from mfcontrol.forward import TimeGrid, draw_noise, evaluate_cost, simulate_feedback
from mfcontrol.lq_oracle import solve_lq_mfc, solve_lq_mfg
from mfcontrol.problems import builtin_lq


def test_scalar_riccati_is_tanh():
    sol = solve_lq_mfc(builtin_lq("scalar_lqr"), K=100, substeps=10)
    assert np.max(np.abs(sol.P[:, 0, 0] - np.tanh(1.0 - sol.times))) <= 1e-8
    assert np.allclose(sol.K_gain[:, 0, 0], -np.tanh(1.0 - sol.times), atol=1e-8)


def test_rk4_order():
    errs = [abs(solve_lq_mfc(builtin_lq("scalar_lqr"), K=5, substeps=s).P[0, 0, 0] - np.tanh(1.0))
            for s in (1, 2, 4)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.5)


def test_zero_length_horizon():
    spec = LQSpec(B=1.0, H=2.0, H_bar=0.5, R=1.0, T=0.0)
    sol = solve_lq_mfc(spec, K=4)
    assert np.all(sol.P[:, 0, 0] == 2.5)
    assert sol.times[0] == sol.times[-1] == 0.0


def test_no_coupling_game_equals_control():
    spec = LQSpec(A=0.2, B=1.0, sigma0=0.4, Q=1.0, H=0.5, R=2.0, initial_mean=0.7)
    a, b = solve_lq_mfc(spec, K=50), solve_lq_mfg(spec, K=50)
    for name in ("P", "K_gain", "G_gain", "g0", "mean", "cov"):
        assert np.allclose(getattr(a, name), getattr(b, name), atol=1e-12), name
    assert a.value == pytest.approx(b.value, abs=1e-12)


def test_zero_cost_game_has_zero_gains():
    spec = LQSpec(B=1.0, A_bar=0.3, sigma0=0.5, R=1.0, initial_mean=1.0)
    for sol in (solve_lq_mfc(spec, K=20), solve_lq_mfg(spec, K=20)):
        assert not np.any(sol.K_gain) and not np.any(sol.G_gain) and not np.any(sol.g0)
        assert sol.value == 0.0


def test_value_formula_agrees():
    # the control problem's value is also a quadratic form of the initial moments
    sol = solve_lq_mfc(builtin_lq("meanfield_lq"), K=100)
    assert sol.value == pytest.approx(sol.value_formula, rel=1e-8)
    assert solve_lq_mfg(builtin_lq("meanfield_lq"), K=100).value_formula is None


def test_blow_up_detected():
    with pytest.raises(OracleBlowUpError):
        solve_lq_mfc(LQSpec(B=1.0, Q=-10.0, R=1.0), K=50)


# ---------------------------------------------------------------------------
# two-step discrete-time oracle for the direction of the MFG/MFC gap

def _mean_cost(spec, h, m0, u, m_pop=None):
    """Mean part of the cost of a two-step Euler scheme (scalar spec).

    With ``m_pop`` the agent's own mean mu is steered by u while the mean-field
    terms use the frozen population path; without it the agent is the population."""
    A, Ab, B = spec.A[0, 0], spec.A_bar[0, 0], spec.B[0, 0]
    Q, Qb, S, R = spec.Q[0, 0], spec.Q_bar[0, 0], spec.S[0, 0], spec.R[0, 0]
    H, Hb, ST = spec.H[0, 0], spec.H_bar[0, 0], spec.S_T[0, 0]
    mu = [m0]
    pop = m_pop if m_pop is not None else mu
    cost = 0.0
    for k in range(2):
        pk = pop[k]
        cost += 0.5 * h * (Q * mu[k] ** 2 + Qb * (mu[k] - S * pk) ** 2 + R * u[k] ** 2)
        mu.append(mu[k] + h * (A * mu[k] + Ab * pk + B * u[k]))
    cost += 0.5 * (H * mu[2] ** 2 + Hb * (mu[2] - ST * pop[2]) ** 2)
    return cost, mu


def _argmin_quadratic(fun):
    # fun is an exact quadratic in two variables: recover it from 6 evaluations
    pts = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1)]
    c = {p: fun(np.array(p, float)) for p in pts}
    g = np.array([(c[(1, 0)] - c[(-1, 0)]) / 2, (c[(0, 1)] - c[(0, -1)]) / 2])
    hxx = c[(1, 0)] + c[(-1, 0)] - 2 * c[(0, 0)]
    hyy = c[(0, 1)] + c[(0, -1)] - 2 * c[(0, 0)]
    hxy = c[(1, 1)] - c[(1, 0)] - c[(0, 1)] + c[(0, 0)]
    return np.linalg.solve([[hxx, hxy], [hxy, hyy]], -g)


def test_price_of_anarchy_direction():
    spec = builtin_lq("meanfield_lq")
    h, m0 = 0.5, float(spec.initial_mean[0])
    social = lambda u: _mean_cost(spec, h, m0, u)[0]  # noqa: E731
    u_mfc = _argmin_quadratic(social)
    # brute-force confirmation on a coarse grid around the optimum
    grid = np.linspace(-3, 3, 121)
    best = min(social(np.array(u)) for u in itertools.product(grid, grid))
    assert social(u_mfc) <= best + 1e-12

    def best_response(u):
        pop = _mean_cost(spec, h, m0, u)[1]
        return _argmin_quadratic(lambda w: _mean_cost(spec, h, m0, w, pop)[0])
    # equilibrium: u = BR(u) with BR affine, so solve the 2x2 linear fixed point
    b0 = best_response(np.zeros(2))
    M = np.stack([best_response(e) - b0 for e in np.eye(2)], axis=1)
    u_mfg = np.linalg.solve(np.eye(2) - M, b0)
    assert np.allclose(best_response(u_mfg), u_mfg, atol=1e-10)
    discrete_gap = social(u_mfg) - social(u_mfc)
    cont_gap = solve_lq_mfg(spec).value - solve_lq_mfc(spec).value
    assert discrete_gap > 0 and cont_gap > 0


@pytest.mark.parametrize("kind", [solve_lq_mfc, solve_lq_mfg])
def test_oracle_feedback_reproduces_value(kind):
    spec = builtin_lq("meanfield_lq")
    p = lq_to_problem(spec)
    N, K = 20_000, 100
    grid = TimeGrid(0.0, 1.0, K)
    noise = draw_noise(p, grid, N, 5)
    x0 = noise.x0
    sol = kind(spec, K=K, initial_mean=x0.mean(axis=0),
               initial_cov=np.atleast_2d(np.var(x0[:, 0])))
    ens, ctrl = simulate_feedback(p, grid, sol.policy(), noise, N)
    J = evaluate_cost(p, grid, ens, ctrl)
    assert J == pytest.approx(sol.value, rel=0.02)
