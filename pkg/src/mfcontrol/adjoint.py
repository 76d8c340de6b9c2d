"""Backward solution of the adjoint equation by least-squares Monte Carlo.

At each step k (going backward) the conditional expectations given the
particle state are replaced by cross-particle linear regression on polynomial
features of X(t_k).  In the default ``joint`` estimator P(t_{k+1}) is regressed
on [phi, phi * dW^j / sqrt(dt)]: the phi-coefficients give E[P(t_{k+1}) | X(t_k)]
and the dW-coefficients give Q^j.  The ``plain`` estimator regresses
P(t_{k+1}) and (P(t_{k+1}) - E[..]) dW^j / dt separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .coefficients import ProblemSpec
from .errors import BlowUpError, DimensionError, RegressionError
from .forward import ControlField, PathEnsemble, TimeGrid
from .lagrangian import (AdjointPoint, grad_v_L, grad_x_L_local,
                         meanfield_driver_terms, terminal_meanfield_terms)

COND_LIMIT = 1e14


@dataclass(frozen=True)
class RegressionBasis:
    """All monomials of total degree <= ``degree`` in standardized coordinates.

    ``ridge=None`` means 1e-8 * N on the unnormalized Gram matrix."""

    degree: int = 2
    ridge: Optional[float] = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("basis degree must be >= 0")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def size(self, n: int) -> int:
        return sum(1 for deg in range(self.degree + 1)
                   for _ in combinations_with_replacement(range(n), deg))

    def features(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        z = (x - mu) / sd
        cols = [np.ones(x.shape[0])]
        for deg in range(1, self.degree + 1):
            for idx in combinations_with_replacement(range(x.shape[1]), deg):
                cols.append(np.prod(z[:, idx], axis=1))
        return np.stack(cols, axis=1)


def regress(Phi: np.ndarray, Y: np.ndarray, weights: np.ndarray, ridge: float):
    """Weighted ridge least squares; returns (coefficients, fitted, condition)."""
    Wphi = Phi * (weights * Phi.shape[0])[:, None]
    G = Phi.T @ Wphi + ridge * np.eye(Phi.shape[1])
    try:
        cond = float(np.linalg.cond(G))
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise RegressionError(
                f"regression Gram matrix is ill-conditioned (cond {cond:.3g}); "
                "increase the ridge parameter or the particle count")
        coef = np.linalg.solve(G, Wphi.T @ Y)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"regression solve failed: {exc}; increase the ridge "
                              "parameter or the particle count") from exc
    return coef, Phi @ coef, cond


@dataclass
class AdjointEnsemble:
    """P (K+1, N, n); P_hat (K, N, n) = E[P(t_{k+1}) | X(t_k)]; Q (K, N, n, n) as [k, i, j, a]."""

    P: np.ndarray
    P_hat: np.ndarray
    Q: np.ndarray
    diagnostics: list = field(default_factory=list)
    meanfield: bool = True


def terminal_gradient(p: ProblemSpec, ens: PathEnsemble, meanfield: bool = True) -> np.ndarray:
    """D_x g_T(X_i(T), mu_K) plus, for the control problem, the independent-copy term."""
    X = ens.states[-1]
    m = ens.measure(ens.K)
    out = np.asarray(p.gT_x(X, m), dtype=float).reshape(X.shape)
    if meanfield:
        out = out + terminal_meanfield_terms(p, X, m)
    return out


def solve_adjoint(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble, ctrl: ControlField,
                  basis: Optional[RegressionBasis] = None, meanfield: bool = True,
                  estimator: str = "joint") -> AdjointEnsemble:
    """Backward recursion P(t_k) = E[P(t_{k+1}) | X(t_k)] + dt * driver(t_k).

    The driver is D_x L at (X(t_k), v(t_k)) with the regressed pair (P_hat, Q),
    plus the independent-copy terms when ``meanfield`` is true (control
    problem) and without them for the game.  With zero volatility no regression
    is needed: P_hat = P(t_{k+1}) and Q = 0, which is the exact discrete adjoint.
    """
    if estimator not in ("joint", "plain"):
        raise ValueError(f"unknown estimator {estimator!r}")
    basis = basis or RegressionBasis()
    K, N, n = grid.K, ens.N, p.n
    if ens.K != K or ctrl.values.shape[:2] != (K, N):
        raise DimensionError("ensemble, control and grid disagree")
    noisy = p.sigma is not None
    if noisy and ens.increments is None:
        raise DimensionError("stochastic adjoint needs the forward increments")
    B = basis.size(n) * ((1 + n) if (noisy and estimator == "joint") else 1)
    if noisy and B > N / 4:
        raise RegressionError(f"basis of {B} functions needs at least {4 * B} particles")
    ridge = 1e-8 * N if basis.ridge is None else basis.ridge
    dt = grid.dt
    sq = np.sqrt(dt)
    t = grid.nodes
    w = ens.weights

    P = np.empty((K + 1, N, n))
    P_hat = np.empty((K, N, n))
    Q = np.zeros((K, N, n, n))
    diags = [None] * K
    P[K] = terminal_gradient(p, ens, meanfield)
    for k in range(K - 1, -1, -1):
        Xk = ens.states[k]
        target = P[k + 1]
        if noisy:
            phi = basis.features(Xk)
            dW = ens.increments[k]
            if estimator == "joint":
                Phi = np.concatenate([phi] + [phi * (dW[:, j:j + 1] / sq) for j in range(n)],
                                     axis=1)
                coef, fit, cond = regress(Phi, target, w, ridge)
                b = phi.shape[1]
                P_hat[k] = phi @ coef[:b]
                for j in range(n):
                    Q[k, :, j, :] = phi @ coef[b * (j + 1): b * (j + 2)] / sq
                resid = target - fit
            else:
                _, P_hat[k], cond = regress(phi, target, w, ridge)
                centred = target - P_hat[k]
                for j in range(n):
                    _, Q[k, :, j, :], _ = regress(phi, centred * (dW[:, j:j + 1] / dt),
                                                  w, ridge)
                resid = centred - np.einsum("ija,ij->ia", Q[k], dW)
            diags[k] = {"step": k, "condition": cond,
                        "residual_rms": float(np.sqrt(w @ np.sum(resid ** 2, axis=1)))}
        else:
            P_hat[k] = target
        m = ens.measure(k)
        ap = AdjointPoint(P_hat[k], Q[k] if noisy else None)
        driver = grad_x_L_local(p, Xk, m, ctrl.values[k], t[k], ap)
        if meanfield:
            driver = driver + meanfield_driver_terms(p, Xk, m, ctrl.values[k], t[k], ap)
        P[k] = P_hat[k] + dt * driver
        if not np.all(np.isfinite(P[k])):
            raise BlowUpError(f"non-finite adjoint at step {k}", step=k)
    return AdjointEnsemble(P, P_hat, Q, [d for d in diags if d is not None], meanfield)


def pathwise_gradient(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble, ctrl: ControlField,
                      meanfield: bool = True) -> np.ndarray:
    """Exact gradient of the sampled (fixed-noise) cost, shape (K, N, d).

    This is the discrete adjoint of the particle recursion without any
    conditioning: it uses the realized future increments, so it is not
    adapted.  Used as a first-order model of the sampled cost and as a test
    oracle; the solvers work with the regressed (adapted) gradient.
    """
    K, dt, t = grid.K, grid.dt, grid.nodes
    noisy = p.sigma is not None
    lam = terminal_gradient(p, ens, meanfield)
    out = np.empty_like(ctrl.values)
    for k in range(K - 1, -1, -1):
        q = None
        if noisy:
            q = lam[:, None, :] * (ens.increments[k] / dt)[:, :, None]
        ap = AdjointPoint(lam, q)
        Xk, m, vk = ens.states[k], ens.measure(k), ctrl.values[k]
        out[k] = grad_v_L(p, Xk, m, vk, t[k], ap)
        driver = grad_x_L_local(p, Xk, m, vk, t[k], ap)
        if meanfield:
            driver = driver + meanfield_driver_terms(p, Xk, m, vk, t[k], ap)
        lam = lam + dt * driver
    return out


def gradient_field(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble, ctrl: ControlField,
                   adj: AdjointEnsemble) -> np.ndarray:
    """D_v L at every particle and step, shape (K, N, d)."""
    t = grid.nodes
    out = np.empty_like(ctrl.values)
    noisy = p.sigma is not None
    for k in range(grid.K):
        ap = AdjointPoint(adj.P_hat[k], adj.Q[k] if noisy else None)
        out[k] = grad_v_L(p, ens.states[k], ens.measure(k), ctrl.values[k], t[k], ap)
    return out


def pairing(grid: TimeGrid, weights: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Discrete L2 inner product sum_k dt sum_i w_i a_ik . b_ik."""
    return float(grid.dt * np.einsum("i,kic,kic->", weights, a, b))


def optimality_residual(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble,
                        ctrl: ControlField, adj: AdjointEnsemble) -> float:
    G = gradient_field(p, grid, ens, ctrl, adj)
    return float(np.sqrt(max(pairing(grid, ens.weights, G, G), 0.0)))


def adjoint_norm(grid: TimeGrid, ens: PathEnsemble, adj: AdjointEnsemble) -> float:
    """L2 norm of P over steps 0..K-1 and particles."""
    return float(np.sqrt(max(pairing(grid, ens.weights, adj.P[:-1], adj.P[:-1]), 0.0)))
