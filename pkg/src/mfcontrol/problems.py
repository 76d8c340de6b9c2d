"""Builtin problem instances and a registry for user-defined ones."""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from .coefficients import LQSpec, ProblemSpec, Separable, lq_to_problem
from .errors import ConfigError

_REGISTRY: Dict[str, Callable[..., ProblemSpec]] = {}


def register_problem(name: str, factory: Callable[..., ProblemSpec]):
    """Make ``factory(**params)`` available to configs as a custom problem id."""
    _REGISTRY[name] = factory
    return factory


def get_problem(name: str, **params) -> ProblemSpec:
    if name in BUILTIN_LQ:
        return lq_to_problem(builtin_lq(name, **params))
    if name not in _REGISTRY:
        raise ConfigError(f"unknown problem {name!r}; known: "
                          f"{sorted(set(BUILTIN_LQ) | set(_REGISTRY))}")
    return _REGISTRY[name](**params)


def known_problems():
    return sorted(set(BUILTIN_LQ) | set(_REGISTRY))


# --------------------------------------------------------------------------
# linear-quadratic builtins

def _scalar_lqr(sigma=0.3, T=1.0):
    # f = v, g = (x^2 + v^2)/2, g_T = 0, X(0) ~ N(0, 1)
    return LQSpec(B=1.0, Q=1.0, R=1.0, sigma0=sigma, T=T, name="scalar_lqr")


def _meanfield_lq(sigma=0.3, T=1.0):
    # mean-penalty running and terminal costs with mean-coupled drift
    return LQSpec(B=1.0, A_bar=0.5, sigma0=sigma, Q=0.2, Q_bar=4.0, S=0.75,
                  H_bar=2.0, S_T=0.5, R=1.0, initial_mean=1.5, initial_cov=0.25,
                  T=T, name="meanfield_lq")


def _bsde_benchmark(T=1.0):
    # f = 0, sigma = 1, g_T = x^2/2; with zero control the running cost vanishes
    return LQSpec(sigma0=1.0, H=1.0, R=1.0, T=T, name="bsde_benchmark")


BUILTIN_LQ = {"scalar_lqr": _scalar_lqr, "meanfield_lq": _meanfield_lq,
              "bsde_benchmark": _bsde_benchmark}


def builtin_lq(name: str, **params) -> LQSpec:
    if name not in BUILTIN_LQ:
        raise ConfigError(f"unknown LQ builtin {name!r}")
    return BUILTIN_LQ[name](**params)


# --------------------------------------------------------------------------
# nonlinear instance coupled through the first two moments

def nonlinear_meanfield(stochastic: bool = True, T: float = 1.0) -> ProblemSpec:
    """Scalar problem with nonlinear drift and volatility and moment coupling.

    f     = -x + 0.5 sin x + 0.5 tanh(m1) + v + 0.1 sin v
    sigma = 0.3 + 0.1 sin x + 0.05 m1 + 0.05 v
    g     = v^2/2 + x^2/4 + (x - m1)^2/2
    g_T   = (x - m1/2)^2/2 + 0.1 m2
    with m1, m2 the first and second moments of the current measure.
    """
    def m1(m):
        return float(m.mean()[0])

    def m2(m):
        return float(m.weights @ m.points[:, 0] ** 2)

    def f(x, m, v, s):
        return -x + 0.5 * np.sin(x) + 0.5 * np.tanh(m1(m)) + v + 0.1 * np.sin(v)

    def f_x(x, m, v, s):
        return (-1.0 + 0.5 * np.cos(x))[:, :, None]

    def f_v(x, m, v, s):
        return (1.0 + 0.1 * np.cos(v))[:, :, None]

    def sigma(x, m, v, s):
        return (0.3 + 0.1 * np.sin(x) + 0.05 * m1(m) + 0.05 * v)[:, :, None]

    def sigma_x(x, m, v, s):
        return (0.1 * np.cos(x))[:, :, None, None]

    def sigma_v(x, m, v, s):
        return np.full((x.shape[0], 1, 1, 1), 0.05)

    def g(x, m, v, s):
        return 0.5 * v[:, 0] ** 2 + 0.25 * x[:, 0] ** 2 + 0.5 * (x[:, 0] - m1(m)) ** 2

    def g_x(x, m, v, s):
        return 0.5 * x + (x - m1(m))

    def g_v(x, m, v, s):
        return v.copy()

    def g_T(x, m):
        return 0.5 * (x[:, 0] - 0.5 * m1(m)) ** 2 + 0.1 * m2(m)

    def gT_x(x, m):
        return x - 0.5 * m1(m)

    def ones_right(xi, m):
        return np.ones((xi.shape[0], 1, 1))

    f_xi = Separable(
        lambda x, m, v, s: np.full((x.shape[0], 1, 1), 0.5 / np.cosh(m1(m)) ** 2),
        ones_right)
    sigma_xi = Separable(lambda x, m, v, s: np.full((x.shape[0], 1, 1, 1), 0.05),
                         ones_right)
    g_xi = Separable(lambda x, m, v, s: -(x - m1(m)), ones_right)
    gT_xi = Separable(
        lambda x, m: np.concatenate([-0.5 * (x - 0.5 * m1(m)), np.full_like(x, 0.1)], axis=1),
        lambda xi, m: np.stack([np.ones_like(xi), 2.0 * xi], axis=1))

    def g_nu(x, m, v, s, xi):
        return -(x - m1(m)) @ xi.T

    def gT_nu(x, m, xi):
        return -0.5 * (x - 0.5 * m1(m)) @ xi.T + 0.1 * (xi[:, 0] ** 2)[None, :]

    def sample(rng, N):
        return 0.5 + 0.7 * rng.standard_normal((N, 1))

    return ProblemSpec(
        n=1, d=1, t0=0.0, T=T, f=f, f_x=f_x, f_v=f_v, g=g, g_x=g_x, g_v=g_v,
        g_T=g_T, gT_x=gT_x,
        sigma=sigma if stochastic else None,
        sigma_x=sigma_x if stochastic else None,
        sigma_v=sigma_v if stochastic else None,
        f_xi=f_xi, sigma_xi=sigma_xi if stochastic else None, g_xi=g_xi, gT_xi=gT_xi,
        g_nu=g_nu, gT_nu=gT_nu, sample_initial=sample, lipschitz=1.5,
        name="nonlinear_meanfield" if stochastic else "nonlinear_meanfield_det")


def interaction_kernel(n: int = 2, strength: float = 0.5, noise: float = 0.2,
                       T: float = 1.0) -> ProblemSpec:
    """Drift v + strength * int K(x - xi) dm(xi) with K(z) = z exp(-|z|^2/2).

    The measure derivative is a genuine two-point kernel, so the driver terms
    take the O(N^2) path; meant for small ensembles."""

    def kern(z):
        return z * np.exp(-0.5 * np.sum(z * z, axis=-1, keepdims=True))

    def grad_kern(z):
        e = np.exp(-0.5 * np.sum(z * z, axis=-1))
        return e[..., None, None] * (np.eye(n) - z[..., :, None] * z[..., None, :])

    def f(x, m, v, s):
        diff = x[:, None, :] - m.points[None, :, :]
        return v + strength * np.einsum("y,iyb->ib", m.weights, kern(diff))

    def f_x(x, m, v, s):
        diff = x[:, None, :] - m.points[None, :, :]
        return strength * np.einsum("y,iyab->iab", m.weights, grad_kern(diff))

    def f_v(x, m, v, s):
        return np.broadcast_to(np.eye(n), (x.shape[0], n, n))

    def f_xi(x, m, v, s, xi):
        return -strength * grad_kern(x[:, None, :] - xi[None, :, :])

    def sigma(x, m, v, s):
        return np.broadcast_to(noise * np.eye(n), (x.shape[0], n, n))

    def sigma_x(x, m, v, s):
        return np.zeros((x.shape[0], n, n, n))

    def sigma_v(x, m, v, s):
        return np.zeros((x.shape[0], n, n, n))

    def g(x, m, v, s):
        return 0.5 * np.sum(v * v, axis=1) + 0.25 * np.sum(x * x, axis=1)

    def g_x(x, m, v, s):
        return 0.5 * x

    def g_v(x, m, v, s):
        return v.copy()

    def g_T(x, m):
        return 0.5 * np.sum(x * x, axis=1)

    def gT_x(x, m):
        return x.copy()

    return ProblemSpec(
        n=n, d=n, t0=0.0, T=T, f=f, f_x=f_x, f_v=f_v, g=g, g_x=g_x, g_v=g_v,
        g_T=g_T, gT_x=gT_x,
        sigma=sigma if noise else None, sigma_x=sigma_x if noise else None,
        sigma_v=sigma_v if noise else None, f_xi=f_xi,
        argmin_v=lambda x, m, s, p, q: -p, name="interaction_kernel")


def nonconvex_scalar(a: float = 0.05, T: float = 1.0) -> ProblemSpec:
    """f = v, g = x^2/2 - a v^2/2: the Lagrangian is concave in v, so the
    stationary point v = p/a is a maximizer and Picard iteration diverges."""
    return ProblemSpec(
        n=1, d=1, t0=0.0, T=T,
        f=lambda x, m, v, s: v.copy(),
        f_x=lambda x, m, v, s: np.zeros((x.shape[0], 1, 1)),
        f_v=lambda x, m, v, s: np.ones((x.shape[0], 1, 1)),
        g=lambda x, m, v, s: 0.5 * x[:, 0] ** 2 - 0.5 * a * v[:, 0] ** 2,
        g_x=lambda x, m, v, s: x.copy(),
        g_v=lambda x, m, v, s: -a * v,
        g_T=lambda x, m: np.zeros(x.shape[0]),
        gT_x=lambda x, m: np.zeros_like(x),
        argmin_v=lambda x, m, s, p, q: p / a,
        name="nonconvex_scalar")


def mean_product_terminal(sign: float = 1.0) -> ProblemSpec:
    """Zero dynamics with g_T(x, m) = sign * x * int xi dm(xi)."""
    def zeros_fx(x, m, v, s):
        return np.zeros((x.shape[0], 1, 1))

    return ProblemSpec(
        n=1, d=1, t0=0.0, T=1.0,
        f=lambda x, m, v, s: np.zeros_like(x), f_x=zeros_fx, f_v=zeros_fx,
        g=lambda x, m, v, s: 0.5 * v[:, 0] ** 2,
        g_x=lambda x, m, v, s: np.zeros_like(x), g_v=lambda x, m, v, s: v.copy(),
        g_T=lambda x, m: sign * x[:, 0] * float(m.mean()[0]),
        gT_x=lambda x, m: np.full_like(x, sign * float(m.mean()[0])),
        gT_xi=Separable(lambda x, m: sign * x, lambda xi, m: np.ones((xi.shape[0], 1, 1))),
        gT_nu=lambda x, m, xi: sign * x @ xi.T,
        name="mean_product_terminal" if sign > 0 else "mean_product_terminal_flipped")


register_problem("nonlinear_meanfield", nonlinear_meanfield)
register_problem("interaction_kernel", interaction_kernel)
register_problem("nonconvex_scalar", nonconvex_scalar)
register_problem("mean_product_terminal", mean_product_terminal)
