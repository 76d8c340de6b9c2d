"""Empirical probability measures on R^n.

Measures are weighted point clouds. Only the pieces the solver and its test
oracles need are here: 1-d quadratic Wasserstein distance (exact, via the
monotone coupling), an exact small-N assignment solver for uniform clouds in
any dimension, push-forwards, and the ensemble L2 norm.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, EmptyMeasureError, UnsupportedCouplingError

WEIGHT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Probability measure sum_i w_i delta_{x_i}.

    ``points`` has shape (N, n) and ``weights`` shape (N,).  Uniform weights are
    used when ``weights`` is omitted.
    """

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise DimensionError(f"points must be (N, n), got shape {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyMeasureError("measure has no atoms")
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(weights, dtype=float).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise DimensionError(
                    f"{w.shape[0]} weights for {pts.shape[0]} atoms")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, at):
        at = np.atleast_1d(np.asarray(at, dtype=float))
        return cls(at[None, :])

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(np.abs(self.weights - 1.0 / self.size) <= WEIGHT_TOL))

    def integrate(self, phi):
        """Return sum_i w_i phi(x_i); ``phi`` maps an (N, n) array to (N, ...)."""
        vals = np.asarray(phi(self.points), dtype=float)
        return np.tensordot(self.weights, vals, axes=(0, 0))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def covariance(self) -> np.ndarray:
        c = self.points - self.mean()
        return (c * self.weights[:, None]).T @ c

    def mixture(self, other: "EmpiricalMeasure", eps: float) -> "EmpiricalMeasure":
        """The measure (1 - eps) self + eps other, realized by concatenating atoms."""
        _check_same_dim(self, other)
        if not 0.0 <= eps <= 1.0:
            raise ValueError("mixture weight must lie in [0, 1]")
        pts = np.concatenate([self.points, other.points])
        w = np.concatenate([(1.0 - eps) * self.weights, eps * other.weights])
        return EmpiricalMeasure(pts, w)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d) -> "EmpiricalMeasure":
        return cls(d["points"], d["weights"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\r\n")
        writer.writerow(["weight"] + [f"x{a}" for a in range(self.dim)])
        for w, p in zip(self.weights, self.points):
            writer.writerow([repr(float(w))] + [repr(float(c)) for c in p])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EmpiricalMeasure":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2:
            raise EmptyMeasureError("CSV holds no atoms")
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
        return cls(data[:, 1:], data[:, 0])


def _check_same_dim(m1, m2):
    if m1.dim != m2.dim:
        raise DimensionError(f"dimension mismatch: {m1.dim} vs {m2.dim}")


def wasserstein2_1d(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """Exact W2 between 1-d measures through the quantile (monotone) coupling."""
    if m1.dim != 1 or m2.dim != 1:
        raise DimensionError("wasserstein2_1d needs one-dimensional measures")
    a_order = np.argsort(m1.points[:, 0], kind="stable")
    b_order = np.argsort(m2.points[:, 0], kind="stable")
    a, wa = m1.points[a_order, 0], m1.weights[a_order]
    b, wb = m2.points[b_order, 0], m2.weights[b_order]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    lengths = np.diff(np.concatenate([[0.0], breaks]))
    mids = breaks - 0.5 * lengths
    ia = np.minimum(np.searchsorted(ca, mids, side="left"), a.size - 1)
    ib = np.minimum(np.searchsorted(cb, mids, side="left"), b.size - 1)
    return float(np.sqrt(max(np.sum(lengths * (a[ia] - b[ib]) ** 2), 0.0)))


def _subset_dp(cost: np.ndarray) -> float:
    # exact minimum over all permutations via DP on assigned-column subsets
    n = cost.shape[0]
    best = np.full(1 << n, np.inf)
    best[0] = 0.0
    for mask in range(1 << n):
        if not np.isfinite(best[mask]):
            continue
        row = bin(mask).count("1")
        if row == n:
            continue
        for col in range(n):
            if not mask & (1 << col):
                nxt = mask | (1 << col)
                val = best[mask] + cost[row, col]
                if val < best[nxt]:
                    best[nxt] = val
    return float(best[-1])


def wasserstein2_smallN(m1: EmpiricalMeasure, m2: EmpiricalMeasure,
                        exhaustive_cap: int = 12) -> float:
    """Exact W2 between uniform clouds with equal atom counts (test oracle).

    Clouds with at most ``exhaustive_cap`` atoms are solved by exhaustive
    dynamic programming over assignments; larger ones by the Hungarian method.
    """
    _check_same_dim(m1, m2)
    if m1.size != m2.size:
        raise UnsupportedCouplingError(
            f"unequal atom counts {m1.size} and {m2.size}")
    if not (m1.is_uniform() and m2.is_uniform()):
        raise UnsupportedCouplingError("non-uniform weights are not supported")
    diff = m1.points[:, None, :] - m2.points[None, :, :]
    cost = np.sum(diff * diff, axis=-1)
    if m1.size <= exhaustive_cap:
        total = _subset_dp(cost)
    else:
        rows, cols = linear_sum_assignment(cost)
        total = float(cost[rows, cols].sum())
    return float(np.sqrt(max(total / m1.size, 0.0)))


def push_forward(X, m: EmpiricalMeasure) -> EmpiricalMeasure:
    """Law of the map X under m: atoms X_i carrying the weights of m."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != m.size:
        raise DimensionError(f"{X.shape[0]} images for {m.size} atoms")
    return EmpiricalMeasure(X, m.weights)


def ensemble_norm(X, m: EmpiricalMeasure) -> float:
    """sqrt(sum_i w_i |X_i|^2), the L2(m) norm of a per-particle field."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != m.size:
        raise DimensionError(f"{X.shape[0]} values for {m.size} atoms")
    return float(np.sqrt(m.weights @ np.sum(X * X, axis=1)))
