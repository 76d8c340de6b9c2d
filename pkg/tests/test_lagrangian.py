import numpy as np
import pytest
from conftest import const_sigma, scalar_problem

from mfcontrol.coefficients import LQSpec, lq_to_problem
from mfcontrol.errors import DimensionError
from mfcontrol.lagrangian import (AdjointPoint, eval_L, grad_v_L, grad_x_L_local,
                                  meanfield_driver_terms)
from mfcontrol.measure import EmpiricalMeasure
from mfcontrol.problems import builtin_lq, interaction_kernel, nonlinear_meanfield


def _args(p, rng, N=6):
    x = rng.standard_normal((N, p.n))
    v = rng.standard_normal((N, p.d))
    q = rng.standard_normal((N, p.n, p.n)) if p.sigma is not None else None
    return x, EmpiricalMeasure(x), v, 0.3, AdjointPoint(rng.standard_normal((N, p.n)), q)


def test_L_pure_drift(rng):
    p = lq_to_problem(LQSpec(A=0.5, B=1.0, R=1.0)).replace(
        g=lambda x, m, v, s: np.zeros(x.shape[0]))
    x, m, v, s, ap = _args(p, rng)
    assert np.allclose(eval_L(p, x, m, v, s, ap), np.sum(ap.p * p.f(x, m, v, s), axis=1))


def test_L_scalar_substitution():
    p = scalar_problem(f=lambda x, m, v, s: v.copy(), f_v=lambda x, m, v, s: np.ones((len(x), 1, 1)),
                       g=lambda x, m, v, s: 0.5 * v[:, 0] ** 2, g_v=lambda x, m, v, s: v.copy(),
                       **const_sigma(1.0))
    v = np.array([[0.0], [1.5], [-2.0]])
    x = np.zeros((3, 1))
    ap = AdjointPoint(np.full((3, 1), 2.0), np.full((3, 1, 1), 3.0))
    L = eval_L(p, x, EmpiricalMeasure(x), v, 0.0, ap)
    assert np.allclose(L, 2 * v[:, 0] + 3 + 0.5 * v[:, 0] ** 2)
    assert np.allclose(grad_v_L(p, x, EmpiricalMeasure(x), v, 0.0, ap), 2 + v)


def test_all_zero(rng):
    p = scalar_problem()
    x, m, v, s, ap = _args(p, rng)
    assert not np.any(eval_L(p, x, m, v, s, ap))
    assert not np.any(grad_v_L(p, x, m, v, s, ap))
    assert not np.any(meanfield_driver_terms(p, x, m, v, s, ap))


def test_x_gradient_bilinear_drift():
    p = scalar_problem(f=lambda x, m, v, s: x * v, f_x=lambda x, m, v, s: v[:, :, None],
                       f_v=lambda x, m, v, s: x[:, :, None])
    x, v = np.array([[0.4], [-1.0]]), np.array([[2.0], [0.7]])
    got = grad_x_L_local(p, x, EmpiricalMeasure(x), v, 0.0, AdjointPoint(np.ones((2, 1))))
    assert np.array_equal(got, v)


def test_lq_gradients_closed_form(rng):
    spec = LQSpec(n=2, d=1, A=[[0.1, 0.2], [0.0, -0.3]], B=[[1.0], [0.5]],
                  sigma0=0.2 * np.eye(2), C=rng.uniform(-0.5, 0.5, (2, 2, 2)),
                  D=rng.uniform(-0.5, 0.5, (2, 2, 1)), Q=np.eye(2), R=2.0)
    p = lq_to_problem(spec)
    x, m, v, s, ap = _args(p, rng)
    want_v = ap.p @ spec.B + np.einsum("ija,jac->ic", ap.q, spec.D) + v @ spec.R
    assert np.allclose(grad_v_L(p, x, m, v, s, ap), want_v, atol=1e-14)
    want_x = ap.p @ spec.A + np.einsum("ija,jab->ib", ap.q, spec.C) + x @ spec.Q
    assert np.allclose(grad_x_L_local(p, x, m, v, s, ap), want_x, atol=1e-14)


def _fd(fun, z, h=1e-5):
    out = np.zeros_like(z)
    for b in range(z.shape[1]):
        e = np.zeros_like(z)
        e[:, b] = h
        out[:, b] = (fun(z + e) - fun(z - e)) / (2 * h)
    return out


@pytest.mark.parametrize("factory", [nonlinear_meanfield, interaction_kernel,
                                     lambda: lq_to_problem(builtin_lq("meanfield_lq"))])
def test_gradients_match_finite_differences(factory, rng):
    p = factory()
    x, m, v, s, _ = _args(p, rng, N=200)
    q = rng.standard_normal((200, p.n, p.n))
    ap = AdjointPoint(rng.standard_normal((200, p.n)), q if p.sigma is not None else None)
    gv = grad_v_L(p, x, m, v, s, ap)
    gx = grad_x_L_local(p, x, m, v, s, ap)
    fd_v = _fd(lambda z: eval_L(p, x, m, z, s, ap), v)
    fd_x = _fd(lambda z: eval_L(p, z, m, v, s, ap), x)
    assert np.all(np.abs(gv - fd_v) <= 1e-5 * (1 + np.abs(gv)))
    assert np.all(np.abs(gx - fd_x) <= 1e-5 * (1 + np.abs(gx)))


def test_dimension_errors(rng):
    p = nonlinear_meanfield()
    x, m, v, s, ap = _args(p, rng)
    with pytest.raises(DimensionError):
        eval_L(p, x, m, v[:3], s, ap)
    with pytest.raises(DimensionError):
        grad_v_L(p, x, m, v, s, AdjointPoint(ap.p, np.zeros((6, 2, 2))))
    with pytest.raises(DimensionError):
        meanfield_driver_terms(p, x, EmpiricalMeasure(x[:4]), v, s, ap)


def test_driver_zero_without_measure_dependence(rng):
    p = lq_to_problem(LQSpec(A=0.3, B=1.0, Q=1.0, H=1.0, sigma0=0.5))
    x, m, v, s, ap = _args(p, rng)
    assert np.array_equal(meanfield_driver_terms(p, x, m, v, s, ap), np.zeros_like(x))


def test_driver_constant_kernel(rng):
    p = lq_to_problem(LQSpec(A_bar=1.0))
    x, m, v, s, ap = _args(p, rng, N=9)
    got = meanfield_driver_terms(p, x, m, v, s, ap)
    assert np.allclose(got, ap.p.mean(), atol=1e-15)


def test_driver_matches_ensemble_cost_derivative(rng):
    # g(x, m) = x * int xi dm has flat derivative x xi and xi-gradient x. Moving
    # particle i changes sum_y w_y g(x_y, m) through both arguments; divided by w_i
    # the change is the local gradient mbar plus the copy term sum_y w_y x_y.
    p = scalar_problem(
        g=lambda x, m, v, s: x[:, 0] * float(m.mean()[0]),
        g_x=lambda x, m, v, s: np.full_like(x, float(m.mean()[0])),
        g_xi=lambda x, m, v, s, xi: np.repeat(x[:, None, :], xi.shape[0], axis=1))
    N = 8
    x = rng.standard_normal((N, 1))
    v = np.zeros((N, 1))
    ap = AdjointPoint(np.zeros((N, 1)))

    def total(X):
        mm = EmpiricalMeasure(X)
        return mm.weights @ p.g(X, mm, v, 0.0)

    i, h = 3, 1e-6
    Xp, Xm = x.copy(), x.copy()
    Xp[i] += h
    Xm[i] -= h
    fd = (total(Xp) - total(Xm)) / (2 * h) * N
    m = EmpiricalMeasure(x)
    local = grad_x_L_local(p, x, m, v, 0.0, ap)[i, 0]
    copy = meanfield_driver_terms(p, x, m, v, 0.0, ap)[i, 0]
    assert copy == pytest.approx(x.mean())
    assert local + copy == pytest.approx(fd, rel=1e-8)


@pytest.mark.parametrize("factory", [nonlinear_meanfield, interaction_kernel,
                                     lambda: lq_to_problem(builtin_lq("meanfield_lq"))])
def test_driver_permutation_equivariant(factory, rng):
    p = factory()
    x, m, v, s, ap = _args(p, rng, N=12)
    perm = rng.permutation(12)
    base = meanfield_driver_terms(p, x, m, v, s, ap)
    q = None if ap.q is None else ap.q[perm]
    moved = meanfield_driver_terms(p, x[perm], EmpiricalMeasure(x[perm]), v[perm], s,
                                   AdjointPoint(ap.p[perm], q))
    assert np.allclose(moved, base[perm], atol=1e-13)


def test_dense_kernel_matches_cost_derivative(rng):
    # total drift-adjoint pairing sum_i w_i p_i . f(x_i, m): its derivative in x_i,
    # divided by w_i, is the local x-gradient plus the copy term
    p = interaction_kernel(n=2, noise=0.0)
    N = 10
    x = rng.standard_normal((N, 2))
    v = rng.standard_normal((N, 2))
    P = rng.standard_normal((N, 2))
    ap = AdjointPoint(P)

    def total(X):
        mm = EmpiricalMeasure(X)
        return mm.weights @ eval_L(p, X, mm, v, 0.0, ap)

    m = EmpiricalMeasure(x)
    want = (grad_x_L_local(p, x, m, v, 0.0, ap)
            + meanfield_driver_terms(p, x, m, v, 0.0, ap))
    for i in (0, 7):
        for b in range(2):
            Xp, Xm = x.copy(), x.copy()
            Xp[i, b] += 1e-6
            Xm[i, b] -= 1e-6
            fd = (total(Xp) - total(Xm)) / 2e-6 * N
            assert fd == pytest.approx(want[i, b], rel=1e-6, abs=1e-8)


def test_lq_grad_v_affine(rng):
    p = lq_to_problem(builtin_lq("meanfield_lq"))
    x, m, _, s, _ = _args(p, rng)
    pts = []
    v0, p0, q0 = rng.standard_normal((6, 1)), rng.standard_normal((6, 1)), rng.standard_normal((6, 1, 1))
    dv, dp, dq = rng.standard_normal((6, 1)), rng.standard_normal((6, 1)), rng.standard_normal((6, 1, 1))
    for t in (0.0, 1.0, 2.0):
        pts.append(grad_v_L(p, x, m, v0 + t * dv, s, AdjointPoint(p0 + t * dp, q0 + t * dq)))
    assert np.max(np.abs(pts[2] - 2 * pts[1] + pts[0])) <= 1e-12
