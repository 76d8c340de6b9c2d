"""Euler-Maruyama simulation of the controlled particle system and its cost."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .coefficients import ProblemSpec
from .errors import BlowUpError, DimensionError, EvaluationError, ModeError
from .measure import EmpiricalMeasure, ensemble_norm

BLOWUP = 1e8

# counter-based streams derived from one seed; new consumers get new ids
STREAM_INITIAL = 0
STREAM_INCREMENTS = 1
STREAM_VALIDATORS = 2
STREAM_DIRECTIONS = 3


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream,)))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("a time grid needs K >= 1 steps")
        if not self.T > self.t0:
            raise ValueError("a time grid needs T > t0")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.K + 1)

    @classmethod
    def for_problem(cls, p: ProblemSpec, K: int) -> "TimeGrid":
        return cls(p.t0, p.T, K)


@dataclass
class Noise:
    """Initial states (N, n) and Brownian increments (K, N, n), or None if noiseless."""

    x0: np.ndarray
    increments: Optional[np.ndarray]
    seed: Optional[int] = None

    @property
    def N(self) -> int:
        return self.x0.shape[0]


def draw_noise(p: ProblemSpec, grid: TimeGrid, N: int, seed: int) -> Noise:
    if N < 1:
        raise ValueError("need at least one particle")
    x0 = p.initial(stream_rng(seed, STREAM_INITIAL), N)
    dW = None
    if p.sigma is not None:
        dW = np.sqrt(grid.dt) * stream_rng(seed, STREAM_INCREMENTS).standard_normal(
            (grid.K, N, p.n))
    return Noise(x0, dW, seed)


@dataclass
class PathEnsemble:
    """Particle states (K+1, N, n), the increments that drove them, and weights."""

    states: np.ndarray
    increments: Optional[np.ndarray]
    weights: np.ndarray
    seed: Optional[int] = None

    @property
    def N(self) -> int:
        return self.states.shape[1]

    @property
    def K(self) -> int:
        return self.states.shape[0] - 1

    def measure(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[k], self.weights)

    @property
    def noise(self) -> Noise:
        return Noise(self.states[0], self.increments, self.seed)


@dataclass
class ControlField:
    """Per-particle, per-step controls (K, N, d).

    ``feedback`` optionally names the map that produced the values."""

    values: np.ndarray
    feedback: Optional[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise DimensionError("control values must have shape (K, N, d)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("control values must be finite")

    @classmethod
    def zeros(cls, grid: TimeGrid, N: int, d: int) -> "ControlField":
        return cls(np.zeros((grid.K, N, d)))

    def __add__(self, other):
        return ControlField(self.values + _values(other))

    def __sub__(self, other):
        return ControlField(self.values - _values(other))

    def __rmul__(self, c):
        return ControlField(float(c) * self.values)


def _values(c):
    return c.values if isinstance(c, ControlField) else np.asarray(c, dtype=float)


def _as_noise(p, grid, noise, N):
    if isinstance(noise, PathEnsemble):
        noise = noise.noise
    if not isinstance(noise, Noise):
        noise = draw_noise(p, grid, N, int(noise))
    if noise.N != N:
        raise DimensionError(f"noise has {noise.N} particles, control has {N}")
    if p.sigma is not None:
        if noise.increments is None:
            raise DimensionError("a noisy problem needs Brownian increments")
        if noise.increments.shape != (grid.K, N, p.n):
            raise DimensionError(f"increments have shape {noise.increments.shape}")
    return noise


def _guard(X, k):
    if not np.all(np.isfinite(X)):
        raise BlowUpError(f"non-finite state at step {k}", step=k)
    if np.max(np.abs(X)) > BLOWUP:
        raise BlowUpError(f"state exceeds {BLOWUP:g} at step {k}", step=k)


def _step(p, X, m, v, s, dt, dW):
    Xn = X + dt * p.f(X, m, v, s)
    if p.sigma is not None:
        Xn = Xn + np.einsum("iaj,ij->ia", p.sigma(X, m, v, s), dW)
    return Xn


def simulate_forward(p: ProblemSpec, grid: TimeGrid, ctrl: ControlField, noise) -> PathEnsemble:
    """Run the particle system under an open-loop control.

    ``noise`` is a seed, a Noise, or a PathEnsemble whose initial states and
    increments are reused (common random numbers).
    """
    K, N, d = ctrl.values.shape
    if K != grid.K or d != p.d:
        raise DimensionError(f"control shape {ctrl.values.shape} does not fit the grid")
    noise = _as_noise(p, grid, noise, N)
    w = np.full(N, 1.0 / N)
    X = np.empty((K + 1, N, p.n))
    X[0] = noise.x0
    _guard(X[0], 0)
    t = grid.nodes
    for k in range(K):
        m = EmpiricalMeasure(X[k], w)
        dW = None if noise.increments is None else noise.increments[k]
        X[k + 1] = _step(p, X[k], m, ctrl.values[k], t[k], grid.dt, dW)
        _guard(X[k + 1], k + 1)
    return PathEnsemble(X, noise.increments if p.sigma is not None else None, w, noise.seed)


def simulate_feedback(p: ProblemSpec, grid: TimeGrid, policy: Callable, noise, N: int,
                      name: str = "feedback"):
    """Run the particle system under a feedback map policy(k, s, x, m) -> (N, d).

    Returns the ensemble and the realized ControlField."""
    noise = _as_noise(p, grid, noise, N)
    w = np.full(N, 1.0 / N)
    X = np.empty((grid.K + 1, N, p.n))
    V = np.empty((grid.K, N, p.d))
    X[0] = noise.x0
    t = grid.nodes
    for k in range(grid.K):
        m = EmpiricalMeasure(X[k], w)
        V[k] = policy(k, t[k], X[k], m)
        dW = None if noise.increments is None else noise.increments[k]
        X[k + 1] = _step(p, X[k], m, V[k], t[k], grid.dt, dW)
        _guard(X[k + 1], k + 1)
    ens = PathEnsemble(X, noise.increments if p.sigma is not None else None, w, noise.seed)
    return ens, ControlField(V, feedback=name)


def simulate_deterministic(p: ProblemSpec, grid: TimeGrid, ctrl: ControlField,
                           x0=None, seed: int = 0) -> PathEnsemble:
    """Noise-free characteristics from each initial state; needs sigma == 0."""
    if p.sigma is not None:
        N = ctrl.values.shape[1]
        probe_x = p.initial(stream_rng(seed, STREAM_INITIAL), N) if x0 is None else x0
        sig = p.sigma(probe_x, EmpiricalMeasure(probe_x), ctrl.values[0], grid.t0)
        if np.any(sig != 0):
            raise ModeError("deterministic mode requires zero volatility")
        p = p.replace(sigma=None, sigma_x=None, sigma_v=None, sigma_xi=None)
    N = ctrl.values.shape[1]
    if x0 is None:
        noise = draw_noise(p, grid, N, seed)
    else:
        noise = Noise(np.asarray(x0, dtype=float).reshape(N, p.n), None, seed)
    return simulate_forward(p, grid, ctrl, noise)


def running_cost_profile(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble,
                         ctrl: ControlField) -> np.ndarray:
    """Ensemble average of g at every left endpoint, shape (K,)."""
    t = grid.nodes
    out = np.empty(grid.K)
    for k in range(grid.K):
        m = ens.measure(k)
        out[k] = ens.weights @ p.g(ens.states[k], m, ctrl.values[k], t[k])
    return out


def evaluate_cost(p: ProblemSpec, grid: TimeGrid, ens: PathEnsemble, ctrl: ControlField) -> float:
    """Left-endpoint quadrature of the running cost plus the mean terminal cost."""
    if ctrl.values.shape[:2] != (grid.K, ens.N) or ens.K != grid.K:
        raise DimensionError("ensemble, control and grid disagree")
    running = grid.dt * float(np.sum(running_cost_profile(p, grid, ens, ctrl)))
    terminal = float(ens.weights @ p.g_T(ens.states[-1], ens.measure(grid.K)))
    J = running + terminal
    if not np.isfinite(J):
        raise EvaluationError("cost evaluated to a non-finite value")
    return J


def moment_diagnostics(ens: PathEnsemble, threshold: Optional[float] = None) -> dict:
    norms = [ensemble_norm(ens.states[k], ens.measure(k)) for k in range(ens.K + 1)]
    k_max = int(np.argmax(norms))
    out = {"norms": norms, "max": norms[k_max], "argmax": k_max,
           "means": [ens.weights @ ens.states[k] for k in range(ens.K + 1)]}
    out["means"] = [m.tolist() for m in out["means"]]
    if threshold is not None:
        out["threshold"] = threshold
        out["within_threshold"] = bool(norms[k_max] <= threshold)
    return out
