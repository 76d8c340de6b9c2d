"""Pointwise Lagrangian L = p.f + sum_j q^j.sigma^j + g and its derivatives.

All functions are batched over particles: ``x`` (N, n), ``v`` (N, d),
``ap.p`` (N, n), ``ap.q`` (N, n, n) with ``q[i, j]`` the j-th loading q^j.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .coefficients import ProblemSpec, Separable
from .errors import DimensionError
from .measure import EmpiricalMeasure

CHUNK = 256


@dataclass
class AdjointPoint:
    """Adjoint values (p, q) for a batch of particles; ``q=None`` means zero."""

    p: np.ndarray
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        if self.q is not None:
            self.q = np.asarray(self.q, dtype=float)
            if self.q.ndim == 2:
                self.q = self.q[None]


def _check(p: ProblemSpec, x, v, ap: AdjointPoint):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    N = x.shape[0]
    if x.shape[1] != p.n or v.shape != (N, p.d) or ap.p.shape != (N, p.n):
        raise DimensionError(
            f"shapes x{x.shape} v{v.shape} p{ap.p.shape} do not fit n={p.n}, d={p.d}")
    if ap.q is not None and ap.q.shape != (N, p.n, p.n):
        raise DimensionError(f"q has shape {ap.q.shape}, expected {(N, p.n, p.n)}")
    return x, v


def _noisy(p, ap):
    return p.sigma is not None and ap.q is not None


def eval_L(p: ProblemSpec, x, m: EmpiricalMeasure, v, s, ap: AdjointPoint) -> np.ndarray:
    x, v = _check(p, x, v, ap)
    out = np.einsum("ia,ia->i", ap.p, p.f(x, m, v, s)) + p.g(x, m, v, s)
    if _noisy(p, ap):
        out = out + np.einsum("ija,iaj->i", ap.q, p.sigma(x, m, v, s))
    return out


def grad_v_L(p: ProblemSpec, x, m: EmpiricalMeasure, v, s, ap: AdjointPoint) -> np.ndarray:
    x, v = _check(p, x, v, ap)
    out = np.einsum("iac,ia->ic", p.f_v(x, m, v, s), ap.p) + p.g_v(x, m, v, s)
    if _noisy(p, ap):
        out = out + np.einsum("iajc,ija->ic", p.sigma_v(x, m, v, s), ap.q)
    return out


def grad_x_L_local(p: ProblemSpec, x, m: EmpiricalMeasure, v, s,
                   ap: AdjointPoint) -> np.ndarray:
    """x-gradient of L with the measure held fixed."""
    x, v = _check(p, x, v, ap)
    out = np.einsum("iab,ia->ib", p.f_x(x, m, v, s), ap.p) + p.g_x(x, m, v, s)
    if _noisy(p, ap):
        out = out + np.einsum("iajb,ija->ib", p.sigma_x(x, m, v, s), ap.q)
    return out


def contract_kernel(kernel, args, weights, targets, loads=None, spec="") -> np.ndarray:
    """sum_y w_y K(args_y)(target_i) contracted with per-atom ``loads``.

    ``spec`` is the einsum fragment for the kernel's output indices ("a" for
    the drift, "aj" for the volatility, "" for scalar costs) and ``loads`` the
    matching per-atom array (P for the drift, Q as [y, j, a] for the volatility).
    """
    M = targets.shape[0]
    if isinstance(kernel, Separable):
        left = np.asarray(kernel.left(*args))
        if spec == "a":
            c = np.einsum("y,yar,ya->r", weights, left, loads)
        elif spec == "aj":
            c = np.einsum("y,yajr,yja->r", weights, left, loads)
        else:
            c = weights @ left
        return np.einsum("r,irb->ib", c, kernel.right(targets, args[1]))
    out = np.empty((M, targets.shape[1]))
    for lo in range(0, M, CHUNK):
        K = np.asarray(kernel(*args, targets[lo:lo + CHUNK]))
        if spec == "a":
            out[lo:lo + CHUNK] = np.einsum("y,yiab,ya->ib", weights, K, loads)
        elif spec == "aj":
            out[lo:lo + CHUNK] = np.einsum("y,yiajb,yja->ib", weights, K, loads)
        else:
            out[lo:lo + CHUNK] = np.einsum("y,yib->ib", weights, K)
    return out


def meanfield_driver_terms(p: ProblemSpec, x, m: EmpiricalMeasure, v, s,
                           ap: AdjointPoint) -> np.ndarray:
    """Independent-copy part of the adjoint driver, one row per particle.

    Row i is sum_y w_y [D_xi df/dnu(X_y)(X_i)' P_y + sum_j D_xi dsigma^j/dnu(X_y)(X_i)' Q^j_y
    + D_xi dg/dnu(X_y)(X_i)], where the ensemble itself is both the measure and
    the independent copy.  Coefficients without measure dependence contribute
    nothing.
    """
    x, v = _check(p, x, v, ap)
    if m.size != x.shape[0]:
        raise DimensionError(f"measure has {m.size} atoms for {x.shape[0]} particles")
    w = m.weights
    args = (x, m, v, s)
    out = np.zeros_like(x)
    if p.f_xi is not None:
        out += contract_kernel(p.f_xi, args, w, x, ap.p, "a")
    if p.sigma_xi is not None and _noisy(p, ap):
        out += contract_kernel(p.sigma_xi, args, w, x, ap.q, "aj")
    if p.g_xi is not None:
        out += contract_kernel(p.g_xi, args, w, x)
    return out


def terminal_meanfield_terms(p: ProblemSpec, x, m: EmpiricalMeasure) -> np.ndarray:
    """sum_y w_y D_xi dg_T/dnu(X_y, m)(X_i) for every particle i."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if p.gT_xi is None:
        return np.zeros_like(x)
    return contract_kernel(p.gT_xi, (x, m), m.weights, x)
