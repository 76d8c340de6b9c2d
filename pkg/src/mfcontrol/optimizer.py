"""Adjoint-gradient descent, damped Picard iteration on the forward-backward
system, and the game (MFG) variant, plus convexity and gradient diagnostics.

All cost and gradient evaluations within one solve share a single draw of
initial states and Brownian increments (sample-average approximation).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .adjoint import (AdjointEnsemble, RegressionBasis, adjoint_norm, gradient_field,
                      pairing, pathwise_gradient, solve_adjoint)
from .coefficients import ProblemSpec, validate_pointwise_derivatives
from .errors import (BlowUpError, InnerSolveError, MFCError, NonContractionError,
                     StallError)
from .forward import (ControlField, Noise, PathEnsemble, STREAM_DIRECTIONS, TimeGrid,
                      draw_noise, evaluate_cost, simulate_forward, stream_rng)
from .lagrangian import AdjointPoint, grad_v_L

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_HALVINGS = 30
NONCONTRACTION_RUN = 5
NEWTON_TOL = 1e-10
NEWTON_ITERS = 50
MODES = ("gradient", "picard", "mfg")


@dataclass
class SolveConfig:
    N: int = 1000
    max_iters: int = 200
    eta: float = 1.0
    beta: float = 0.5
    tol_grad: float = 1e-6
    tol_cost: float = 1e-12
    mode: str = "gradient"
    theta: float = 1.0
    seed: int = 0
    basis_degree: int = 2
    ridge: Optional[float] = None
    estimator: str = "joint"
    precheck: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.N < 1 or self.max_iters < 0:
            raise ValueError("N must be >= 1 and max_iters >= 0")
        if not self.eta > 0 or not 0 < self.beta < 1:
            raise ValueError("need eta > 0 and 0 < beta < 1")
        if not 0 < self.theta <= 1:
            raise ValueError("damping theta must lie in (0, 1]")
        if not (self.tol_grad > 0 and self.tol_cost > 0):
            raise ValueError("tolerances must be positive")

    @property
    def basis(self) -> RegressionBasis:
        return RegressionBasis(self.basis_degree, self.ridge)


@dataclass
class SolveReport:
    mode: str
    J: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    step: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    control: Optional[ControlField] = None
    ensemble: Optional[PathEnsemble] = None
    adjoint: Optional[AdjointEnsemble] = None
    final_cost: float = float("nan")
    final_residual: float = float("nan")
    adjoint_norm: float = float("nan")

    @property
    def iterations(self) -> int:
        return max(len(self.J) - 1, 0)

    def summary(self) -> dict:
        return {"mode": self.mode, "converged": self.converged, "reason": self.reason,
                "iterations": self.iterations, "final_cost": self.final_cost,
                "final_residual": self.final_residual, "adjoint_norm": self.adjoint_norm,
                "history": {"J": list(self.J), "residual": list(self.residual),
                            "step": list(self.step)}}


@dataclass
class _State:
    ctrl: ControlField
    ens: PathEnsemble
    adj: AdjointEnsemble
    J: float
    G: np.ndarray
    res: float


def _evaluate(p, grid, ctrl, noise, cfg: SolveConfig, meanfield=True) -> _State:
    ens = simulate_forward(p, grid, ctrl, noise)
    J = evaluate_cost(p, grid, ens, ctrl)
    adj = solve_adjoint(p, grid, ens, ctrl, cfg.basis, meanfield, cfg.estimator)
    G = gradient_field(p, grid, ens, ctrl, adj)
    res = float(np.sqrt(max(pairing(grid, ens.weights, G, G), 0.0)))
    return _State(ctrl, ens, adj, J, G, res)


def _precheck(p, cfg):
    if not cfg.precheck:
        return
    rep = validate_pointwise_derivatives(p, samples=8, strict=False)
    if not rep["pass"]:
        bad = [k for k, c in rep["checks"].items() if not c["pass"]]
        msg = f"supplied derivatives disagree with finite differences: {', '.join(bad)}"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


def _start(p, grid, cfg, init, noise):
    if noise is None:
        noise = draw_noise(p, grid, cfg.N, cfg.seed)
    ctrl = init if init is not None else ControlField.zeros(grid, noise.N, p.d)
    return ctrl, noise


def _finish(report: SolveReport, st: _State, grid):
    report.control, report.ensemble, report.adjoint = st.ctrl, st.ens, st.adj
    report.final_cost, report.final_residual = st.J, st.res
    report.adjoint_norm = adjoint_norm(grid, st.ens, st.adj)
    return report


def cost_gradient(p: ProblemSpec, grid: TimeGrid, ctrl: ControlField, noise,
                  basis: Optional[RegressionBasis] = None, meanfield: bool = True):
    """Return (gradient field (K, N, d), cost, ensemble, adjoint) at ``ctrl``."""
    cfg = SolveConfig(N=ctrl.values.shape[1], basis_degree=(basis or RegressionBasis()).degree,
                      ridge=(basis or RegressionBasis()).ridge, precheck=False)
    st = _evaluate(p, grid, ctrl, noise, cfg, meanfield)
    return st.G, st.J, st.ens, st.adj


def solve_gradient_descent(p: ProblemSpec, grid: TimeGrid, cfg: SolveConfig,
                           init: Optional[ControlField] = None,
                           noise: Optional[Noise] = None) -> SolveReport:
    """Steepest descent on J with Armijo backtracking under fixed noise."""
    _precheck(p, cfg)
    ctrl, noise = _start(p, grid, cfg, init, noise)
    st = _evaluate(p, grid, ctrl, noise, cfg)
    report = SolveReport(mode="gradient", J=[st.J], residual=[st.res], step=[0.0])
    if cfg.max_iters == 0:
        report.reason = "max_iters reached"
        return _finish(report, st, grid)
    if st.res <= cfg.tol_grad:
        report.converged, report.reason = True, "stationary at start"
        return _finish(report, st, grid)
    for it in range(cfg.max_iters):
        eta = cfg.eta
        gg = st.res ** 2
        if p.sigma is not None:
            # the adapted gradient only approximates the sampled cost's gradient;
            # once it stops being a descent direction, progress is below MC resolution
            slope = pairing(grid, st.ens.weights,
                            pathwise_gradient(p, grid, st.ens, st.ctrl), st.G)
            if slope <= ARMIJO * gg:
                report.converged, report.reason = True, "sampling floor"
                break
        for _ in range(MAX_HALVINGS + 1):
            trial = ControlField(st.ctrl.values - eta * st.G)
            try:
                J_trial = evaluate_cost(p, grid, simulate_forward(p, grid, trial, noise), trial)
            except BlowUpError:
                J_trial = np.inf
            if J_trial <= st.J - ARMIJO * eta * gg:
                break
            eta *= cfg.beta
        else:
            report.reason = "line search failed"
            _finish(report, st, grid)
            raise StallError(f"line search failed after {MAX_HALVINGS} halvings at "
                             f"iteration {it} (J={st.J:.6g}, residual={st.res:.3g})",
                             state=report)
        J_old = st.J
        st = _evaluate(p, grid, trial, noise, cfg)
        report.J.append(st.J)
        report.residual.append(st.res)
        report.step.append(eta)
        if st.res <= cfg.tol_grad:
            report.converged, report.reason = True, "gradient tolerance"
            break
        if abs(J_old - st.J) <= cfg.tol_cost:
            report.converged, report.reason = True, "cost tolerance"
            break
    else:
        report.reason = "max_iters reached"
    return _finish(report, st, grid)


# --------------------------------------------------------------------------
# pointwise minimizer of the Lagrangian

def _fd_jacobian(fun, v, h=1e-6):
    d = v.shape[1]
    cols = []
    for c in range(d):
        e = np.zeros(d)
        e[c] = h
        cols.append((fun(v + e) - fun(v - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _bisect(fun, v0, tol):
    # scalar controls only: expand a bracket around v0 and bisect each particle
    lo, hi = v0[:, 0] - 1.0, v0[:, 0] + 1.0
    f_lo, f_hi = fun(lo[:, None])[:, 0], fun(hi[:, None])[:, 0]
    for _ in range(60):
        bad = np.sign(f_lo) == np.sign(f_hi)
        if not np.any(bad):
            break
        width = hi - lo
        lo = np.where(bad, lo - width, lo)
        hi = np.where(bad, hi + width, hi)
        f_lo, f_hi = fun(lo[:, None])[:, 0], fun(hi[:, None])[:, 0]
    else:
        raise InnerSolveError("could not bracket a root of D_v L")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = fun(mid[:, None])[:, 0]
        left = np.sign(f_mid) == np.sign(f_lo)
        lo, f_lo = np.where(left, mid, lo), np.where(left, f_mid, f_lo)
        hi = np.where(left, hi, mid)
        if np.max(hi - lo) < tol:
            break
    return (0.5 * (lo + hi))[:, None]


def pointwise_argmin(p: ProblemSpec, x, m, s, P, Q, v0) -> np.ndarray:
    """Solve D_v L(x, m, v, s; P, Q) = 0 for every particle.

    Uses the closed form when the problem provides one, otherwise damped
    Newton from ``v0`` with a finite-difference Jacobian, falling back to
    bisection for scalar controls."""
    if p.argmin_v is not None:
        return np.asarray(p.argmin_v(x, m, s, P, Q if p.sigma is not None else None))
    ap = AdjointPoint(P, Q if p.sigma is not None else None)

    def fun(v):
        return grad_v_L(p, x, m, v, s, ap)
    v = np.array(v0, dtype=float)
    r = fun(v)
    for _ in range(NEWTON_ITERS):
        if np.max(np.abs(r)) <= NEWTON_TOL:
            return v
        try:
            step = np.linalg.solve(_fd_jacobian(fun, v), r[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        alpha = 1.0
        for _ in range(30):
            v_new = v - alpha * step
            r_new = fun(v_new)
            if np.all(np.isfinite(r_new)) and np.max(np.abs(r_new)) < np.max(np.abs(r)):
                break
            alpha *= 0.5
        else:
            break
        v, r = v_new, r_new
    if np.max(np.abs(r)) <= NEWTON_TOL:
        return v
    if p.d == 1:
        return _bisect(fun, v, NEWTON_TOL)
    raise InnerSolveError(f"Newton solve for the pointwise minimizer stalled "
                          f"(|D_v L| = {np.max(np.abs(r)):.3g})")


def feedback_update(p: ProblemSpec, grid: TimeGrid, st: _State) -> np.ndarray:
    """v-hat at every step using (P_hat, Q), shape (K, N, d)."""
    t = grid.nodes
    out = np.empty_like(st.ctrl.values)
    for k in range(grid.K):
        out[k] = pointwise_argmin(p, st.ens.states[k], st.ens.measure(k), t[k],
                                  st.adj.P_hat[k], st.adj.Q[k], st.ctrl.values[k])
    return out


def solve_picard_fbsde(p: ProblemSpec, grid: TimeGrid, cfg: SolveConfig,
                       init: Optional[ControlField] = None,
                       noise: Optional[Noise] = None, meanfield: bool = True) -> SolveReport:
    """Damped fixed-point iteration v <- (1 - theta) v + theta v-hat(X, P, Q)."""
    _precheck(p, cfg)
    ctrl, noise = _start(p, grid, cfg, init, noise)
    mode = "picard" if meanfield else "mfg"
    report = SolveReport(mode=mode)
    increases = 0
    prev = np.inf
    st = None
    for it in range(cfg.max_iters + 1):
        try:
            st = _evaluate(p, grid, ctrl, noise, cfg, meanfield)
        except BlowUpError as exc:
            raise NonContractionError(f"iteration {it} blew up: {exc}",
                                      history=report.summary()) from exc
        report.J.append(st.J)
        report.residual.append(st.res)
        if it == cfg.max_iters:
            report.step.append(0.0)
            report.reason = "max_iters reached"
            break
        v_hat = feedback_update(p, grid, st)
        new = (1.0 - cfg.theta) * ctrl.values + cfg.theta * v_hat
        diff = new - ctrl.values
        update = float(np.sqrt(max(pairing(grid, st.ens.weights, diff, diff), 0.0)))
        report.step.append(update)
        if update <= cfg.tol_grad:
            report.converged, report.reason = True, "update tolerance"
            break
        increases = increases + 1 if update > prev else 0
        prev = update
        if increases >= NONCONTRACTION_RUN:
            report.reason = "non-contraction"
            raise NonContractionError(
                f"update norm grew for {NONCONTRACTION_RUN} consecutive iterations "
                f"(last {update:.3g})", history=report.summary())
        if not np.all(np.isfinite(new)):
            raise NonContractionError("control update is not finite",
                                      history=report.summary())
        ctrl = ControlField(new)
    return _finish(report, st, grid)


def solve_mfg(p: ProblemSpec, grid: TimeGrid, cfg: SolveConfig,
              init: Optional[ControlField] = None,
              noise: Optional[Noise] = None) -> SolveReport:
    """Picard iteration whose adjoint omits the measure-derivative terms."""
    return solve_picard_fbsde(p, grid, cfg, init, noise, meanfield=False)


def solve(p: ProblemSpec, grid: TimeGrid, cfg: SolveConfig,
          init: Optional[ControlField] = None, noise: Optional[Noise] = None) -> SolveReport:
    if cfg.mode == "gradient":
        return solve_gradient_descent(p, grid, cfg, init, noise)
    if cfg.mode == "picard":
        return solve_picard_fbsde(p, grid, cfg, init, noise)
    return solve_mfg(p, grid, cfg, init, noise)


# --------------------------------------------------------------------------
# diagnostics

def check_cost_convexity(p: ProblemSpec, grid: TimeGrid, ctrl1: ControlField,
                         ctrl2: ControlField, thetas: Sequence[float], noise,
                         lam: Optional[float] = None, factor: float = 0.9,
                         slack: float = 1e-10) -> dict:
    """Tabulate J(theta v1 + (1-theta) v2) - theta J(v1) - (1-theta) J(v2).

    With ``lam`` the gap must not exceed -factor * lam * theta (1-theta) |v2-v1|^2;
    without it, only plain convexity (gap <= slack) is asserted."""
    if isinstance(noise, int):
        noise = draw_noise(p, grid, ctrl1.values.shape[1], noise)

    def J(c):
        return evaluate_cost(p, grid, simulate_forward(p, grid, c, noise), c)
    J1, J2 = J(ctrl1), J(ctrl2)
    diff = ctrl2.values - ctrl1.values
    w = np.full(ctrl1.values.shape[1], 1.0 / ctrl1.values.shape[1])
    dist2 = pairing(grid, w, diff, diff)
    rows = []
    for th in thetas:
        th = float(th)
        mix = ControlField(th * ctrl1.values + (1.0 - th) * ctrl2.values)
        gap = J(mix) - th * J1 - (1.0 - th) * J2
        bound = slack if lam is None else -factor * lam * th * (1 - th) * dist2 + slack
        rows.append({"theta": th, "gap": gap, "bound": bound, "pass": bool(gap <= bound)})
    return {"kind": "cost_convexity", "J1": J1, "J2": J2, "distance_sq": dist2,
            "lambda": lam, "rows": rows, "pass": all(r["pass"] for r in rows)}


def adapted_directions(grid: TimeGrid, ens: PathEnsemble, d: int, count: int, seed: int):
    """Random adapted directions a(t_k) + b(t_k) X(t_k), shape (count, K, N, d)."""
    rng = stream_rng(seed, STREAM_DIRECTIONS)
    X = ens.states[:-1]
    out = []
    for _ in range(count):
        a = rng.standard_normal((grid.K, 1, d))
        b = rng.standard_normal((grid.K, d, X.shape[2])) / np.sqrt(X.shape[2])
        out.append(a + np.einsum("kcb,kib->kic", b, X))
    return np.stack(out)


def gradient_check(p: ProblemSpec, grid: TimeGrid, ctrl: ControlField, noise,
                   directions: int = 5, eps: float = 1e-4, tol: float = 1e-4,
                   seed: int = 0, crn: bool = True,
                   basis: Optional[RegressionBasis] = None) -> dict:
    """Compare the adjoint pairing with central differences of J along random
    adapted directions.  With ``crn=False`` the two perturbed costs use fresh,
    different noise draws, which shows why common random numbers are needed."""
    if isinstance(noise, int):
        noise = draw_noise(p, grid, ctrl.values.shape[1], noise)
    G, J0, ens, _ = cost_gradient(p, grid, ctrl, noise, basis)
    dirs = adapted_directions(grid, ens, p.d, directions, seed)
    rows = []
    for r, vt in enumerate(dirs):
        if crn:
            n_plus = n_minus = noise
        else:
            base = int(noise.seed or 0)
            n_plus = draw_noise(p, grid, ctrl.values.shape[1], base + 1000 + 2 * r)
            n_minus = draw_noise(p, grid, ctrl.values.shape[1], base + 1001 + 2 * r)
        cp, cm = ControlField(ctrl.values + eps * vt), ControlField(ctrl.values - eps * vt)
        Jp = evaluate_cost(p, grid, simulate_forward(p, grid, cp, n_plus), cp)
        Jm = evaluate_cost(p, grid, simulate_forward(p, grid, cm, n_minus), cm)
        fd = (Jp - Jm) / (2 * eps)
        adj = pairing(grid, ens.weights, G, vt)
        err = abs(adj - fd) / (1.0 + abs(fd))
        rows.append({"direction": r, "adjoint": adj, "finite_difference": fd,
                     "error": err, "pass": bool(err <= tol)})
    return {"kind": "gradient_check", "problem": p.name, "cost": J0, "eps": eps,
            "tol": tol, "crn": crn, "stochastic": p.sigma is not None,
            "max_error": max(r["error"] for r in rows), "rows": rows,
            "pass": all(r["pass"] for r in rows)}


def lambda_sweep(factory: Callable[[float], ProblemSpec], lams: Sequence[float],
                 grid_K: int, cfg: SolveConfig) -> list:
    """Run the configured solver for each lambda; record convergence or failure."""
    out = []
    for lam in lams:
        p = factory(float(lam))
        grid = TimeGrid(p.t0, p.T, grid_K)
        try:
            rep = solve(p, grid, cfg)
            out.append({"lambda": float(lam), "converged": rep.converged,
                        "reason": rep.reason, "iterations": rep.iterations,
                        "final_cost": rep.final_cost})
        except MFCError as exc:
            out.append({"lambda": float(lam), "converged": False,
                        "reason": type(exc).__name__, "iterations": None,
                        "final_cost": None})
    return out
