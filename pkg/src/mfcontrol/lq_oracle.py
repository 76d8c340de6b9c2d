"""Reference solutions for linear-quadratic mean-field control and games.

Both problems split the state into its mean xbar and the fluctuation X - xbar.
The fluctuation gain comes from one Riccati equation P shared by both; the
mean part differs:

* control (social optimum): a second Riccati equation Pi with offset phi and
  scalar c, giving the value 1/2 tr(P Sigma0) + 1/2 xbar'Pi xbar + phi'xbar + c;
* game (equilibrium): the representative agent's linear adjoint r satisfies
  r = Gamma xbar + psi along the consistent mean flow, with Gamma solving a
  non-symmetric Riccati equation.

In both cases the optimal control is u = K (x - xbar) + G xbar + g0, and the
cost reported is a policy evaluation through the exact mean/covariance ODEs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .coefficients import LQSpec
from .errors import OracleBlowUpError

ESCAPE = 1e12


@dataclass
class RiccatiSolution:
    kind: str
    times: np.ndarray          # (K+1,)
    P: np.ndarray              # fluctuation Riccati (K+1, n, n)
    K_gain: np.ndarray         # (K+1, d, n)
    G_gain: np.ndarray         # (K+1, d, n)
    g0: np.ndarray             # (K+1, d)
    mean: np.ndarray           # (K+1, n) oracle mean trajectory
    cov: np.ndarray            # (K+1, n, n)
    value: float               # cost of the feedback from the moment equations
    mean_part: dict = field(default_factory=dict)   # Pi/phi/c or Gamma/psi at nodes
    value_formula: Optional[float] = None

    def control(self, k: int, x: np.ndarray, xbar: np.ndarray) -> np.ndarray:
        """Feedback at node k for states x (N, n) and population mean xbar (n,)."""
        return ((x - xbar) @ self.K_gain[k].T + self.G_gain[k] @ xbar + self.g0[k])[...]

    def policy(self):
        def pol(k, s, x, m):
            return self.control(k, x, m.mean())
        return pol

    def ensemble_policy_cost(self) -> float:
        return self.value


def _rk4_backward(rhs, yT, t0, T, steps):
    """Integrate y' = rhs(t, y) from T down to t0; returns (times, values)."""
    h = (T - t0) / steps
    ys = np.empty((steps + 1,) + yT.shape)
    ys[steps] = yT
    y = yT
    for i in range(steps, 0, -1):
        t = t0 + i * h
        k1 = rhs(t, y)
        k2 = rhs(t - h / 2, y - h / 2 * k1)
        k3 = rhs(t - h / 2, y - h / 2 * k2)
        k4 = rhs(t - h, y - h * k3)
        y = y - h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > ESCAPE:
            raise OracleBlowUpError(f"Riccati solution escapes near t = {t - h:.6g}")
        ys[i - 1] = y
    return t0 + h * np.arange(steps + 1), ys


class _Blocks:
    """Precomputed matrices shared by the control and game equations."""

    def __init__(self, s: LQSpec):
        n = s.n
        self.s = s
        self.nj = n
        I = np.eye(n)
        self.Qy = s.Q + s.Q_bar
        self.Qm = s.Q + (I - s.S).T @ s.Q_bar @ (I - s.S)
        self.Hy = s.H + s.H_bar
        self.Hm = s.H + (I - s.S_T).T @ s.H_bar @ (I - s.S_T)
        self.Am = s.A + s.A_bar
        self.Gj = s.C + s.C_bar           # (nj, n, n)
        self.sig = s.sigma0.T             # (nj, n): row j is sigma_j

    def riccati_terms(self, P):
        s = self.s
        Rt = s.R + np.einsum("jac,ab,jbe->ce", s.D, P, s.D)
        Nm = P @ s.B + np.einsum("jba,bc,jce->ae", s.C, P, s.D)
        return Rt, Nm

    def P_rhs(self, P):
        # returns dP/dt
        s = self.s
        Rt, Nm = self.riccati_terms(P)
        CPC = np.einsum("jba,bc,jcd->ad", s.C, P, s.C)
        return -(P @ s.A + s.A.T @ P + CPC + self.Qy - Nm @ np.linalg.solve(Rt, Nm.T))


def _check_terminal_grid(spec, K, substeps):
    if K < 1 or substeps < 1:
        raise ValueError("need K >= 1 and substeps >= 1")


def _moments(spec: LQSpec, bl: _Blocks, fine_t, Kf, Gf, gf, mean0, cov0, steps):
    """Forward RK4 (step 2h over the fine grid) of mean/covariance and cost."""
    s = spec
    n = s.n

    def rhs(i, y):
        xb = y[:n]
        Sig = y[n:n + n * n].reshape(n, n)
        Kg, Gg, g0 = Kf[i], Gf[i], gf[i]
        ub = Gg @ xb + g0
        dx = s.b + bl.Am @ xb + s.B @ ub
        Acl = s.A + s.B @ Kg
        dS = Acl @ Sig + Sig @ Acl.T
        for j in range(bl.nj):
            Cj = s.C[j] + s.D[j] @ Kg
            e = bl.sig[j] + bl.Gj[j] @ xb + s.D[j] @ ub
            dS = dS + Cj @ Sig @ Cj.T + np.outer(e, e)
        rate = 0.5 * (np.trace(bl.Qy @ Sig) + np.trace(Kg.T @ s.R @ Kg @ Sig)
                      + xb @ bl.Qm @ xb + ub @ s.R @ ub)
        return np.concatenate([dx, dS.ravel(), [rate]])

    y = np.concatenate([mean0, cov0.ravel(), [0.0]])
    H = fine_t[2] - fine_t[0] if steps > 0 else 0.0
    coarse = [y]
    for i in range(0, steps, 2):
        k1 = rhs(i, y)
        k2 = rhs(i + 1, y + H / 2 * k1)
        k3 = rhs(i + 1, y + H / 2 * k2)
        k4 = rhs(i + 2, y + H * k3)
        y = y + H / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > ESCAPE:
            raise OracleBlowUpError("moment equations escape")
        coarse.append(y)
    coarse = np.array(coarse)
    mean = coarse[:, :n]
    cov = coarse[:, n:n + n * n].reshape(-1, n, n)
    xT, ST = mean[-1], cov[-1]
    value = coarse[-1, -1] + 0.5 * (np.trace(bl.Hy @ ST) + xT @ bl.Hm @ xT)
    return mean, cov, float(value)


def _initial(spec, mean0, cov0):
    mean0 = spec.initial_mean if mean0 is None else np.asarray(mean0, float).reshape(spec.n)
    cov0 = spec.initial_cov if cov0 is None else np.asarray(cov0, float).reshape(spec.n, spec.n)
    return mean0, cov0


def solve_lq_mfc(spec: LQSpec, K: int = 100, substeps: int = 10,
                 initial_mean=None, initial_cov=None) -> RiccatiSolution:
    """Coupled Riccati solution of the LQ mean-field control problem.

    Equations are integrated with RK4 on 2 K substeps intervals, and gains are
    reported on the K+1 nodes of the matching time grid.  The initial law
    enters only through its mean and covariance (defaults: those stored on the LQSpec)."""
    spec.check_convexity()
    _check_terminal_grid(spec, K, substeps)
    bl = _Blocks(spec)
    s, n, d = spec, spec.n, spec.d
    steps = 2 * K * substeps

    def unpack(y):
        P = y[:n * n].reshape(n, n)
        Pi = y[n * n:2 * n * n].reshape(n, n)
        phi = y[2 * n * n:2 * n * n + n]
        return P, Pi, phi

    def mean_terms(P, Pi, phi):
        Rt, Nm = bl.riccati_terms(P)
        M = s.B.T @ Pi + np.einsum("jca,ab,jbe->ce", s.D, P, bl.Gj)
        m0 = s.B.T @ phi + np.einsum("jca,ab,jb->c", s.D, P, bl.sig)
        return Rt, Nm, M, m0

    def rhs(t, y):
        P, Pi, phi = unpack(y)
        Rt, Nm, M, m0 = mean_terms(P, Pi, phi)
        GPG = np.einsum("jba,bc,jcd->ad", bl.Gj, P, bl.Gj)
        dPi = -(Pi @ bl.Am + bl.Am.T @ Pi + GPG + bl.Qm - M.T @ np.linalg.solve(Rt, M))
        dphi = -(bl.Am.T @ phi + Pi @ s.b + np.einsum("jba,bc,jc->a", bl.Gj, P, bl.sig)
                 - M.T @ np.linalg.solve(Rt, m0))
        dc = -(0.5 * np.einsum("ja,ab,jb->", bl.sig, P, bl.sig) + phi @ s.b
               - 0.5 * m0 @ np.linalg.solve(Rt, m0))
        return np.concatenate([bl.P_rhs(P).ravel(), dPi.ravel(), dphi, [dc]])

    yT = np.concatenate([bl.Hy.ravel(), bl.Hm.ravel(), np.zeros(n), [0.0]])
    fine_t, ys = _rk4_backward(rhs, yT, s.t0, s.T, steps)
    Kf = np.empty((steps + 1, d, n))
    Gf = np.empty((steps + 1, d, n))
    gf = np.empty((steps + 1, d))
    for i, y in enumerate(ys):
        P, Pi, phi = unpack(y)
        Rt, Nm, M, m0 = mean_terms(P, Pi, phi)
        Kf[i] = -np.linalg.solve(Rt, Nm.T)
        Gf[i] = -np.linalg.solve(Rt, M)
        gf[i] = -np.linalg.solve(Rt, m0)
    mean0, cov0 = _initial(spec, initial_mean, initial_cov)
    mean, cov, value = _moments(spec, bl, fine_t, Kf, Gf, gf, mean0, cov0, steps)
    P0, Pi0, phi0 = unpack(ys[0])
    formula = (0.5 * np.trace(P0 @ cov0) + 0.5 * mean0 @ Pi0 @ mean0 + phi0 @ mean0
               + ys[0][-1])
    idx = np.arange(0, steps + 1, 2 * substeps)
    return RiccatiSolution(
        kind="mfc", times=fine_t[idx],
        P=ys[idx, :n * n].reshape(-1, n, n), K_gain=Kf[idx], G_gain=Gf[idx], g0=gf[idx],
        mean=mean[::substeps], cov=cov[::substeps], value=value,
        mean_part={"Pi": ys[idx, n * n:2 * n * n].reshape(-1, n, n),
                   "phi": ys[idx, 2 * n * n:2 * n * n + n], "c": ys[idx, -1]},
        value_formula=float(formula))


def solve_lq_mfg(spec: LQSpec, K: int = 100, substeps: int = 10,
                 initial_mean=None, initial_cov=None) -> RiccatiSolution:
    """Equilibrium of the LQ mean-field game with the same data.

    The representative agent's value is 1/2 x'Px + r'x + const for a frozen
    mean flow; consistency of the mean flow closes r = Gamma xbar + psi."""
    spec.check_convexity()
    _check_terminal_grid(spec, K, substeps)
    bl = _Blocks(spec)
    s, n, d = spec, spec.n, spec.d
    steps = 2 * K * substeps

    def unpack(y):
        P = y[:n * n].reshape(n, n)
        Gam = y[n * n:2 * n * n].reshape(n, n)
        psi = y[2 * n * n:2 * n * n + n]
        return P, Gam, psi

    def gains(P, Gam, psi):
        Rt, Nm = bl.riccati_terms(P)
        DPCb = np.einsum("jca,ab,jbe->ce", s.D, P, s.C_bar)
        DPs = np.einsum("jca,ab,jb->c", s.D, P, bl.sig)
        Kg = -np.linalg.solve(Rt, Nm.T)
        Gg = -np.linalg.solve(Rt, Nm.T + s.B.T @ Gam + DPCb)
        g0 = -np.linalg.solve(Rt, s.B.T @ psi + DPs)
        return Rt, Nm, DPCb, DPs, Kg, Gg, g0

    def rhs(t, y):
        P, Gam, psi = unpack(y)
        Rt, Nm, DPCb, DPs, Kg, Gg, g0 = gains(P, Gam, psi)
        NR = Nm @ np.linalg.inv(Rt)
        At = s.A.T - NR @ s.B.T
        L = (P @ s.A_bar + np.einsum("jba,bc,jcd->ad", s.C, P, s.C_bar)
             - s.Q_bar @ s.S - NR @ DPCb)
        ell = (P @ s.b + np.einsum("jba,bc,jc->a", s.C, P, bl.sig) - NR @ DPs)
        F = bl.Am + s.B @ Gg
        f0 = s.b + s.B @ g0
        dGam = -(Gam @ F + At @ Gam + L)
        dpsi = -(Gam @ f0 + At @ psi + ell)
        return np.concatenate([bl.P_rhs(P).ravel(), dGam.ravel(), dpsi])

    yT = np.concatenate([bl.Hy.ravel(), (-s.H_bar @ s.S_T).ravel(), np.zeros(n)])
    fine_t, ys = _rk4_backward(rhs, yT, s.t0, s.T, steps)
    Kf = np.empty((steps + 1, d, n))
    Gf = np.empty((steps + 1, d, n))
    gf = np.empty((steps + 1, d))
    for i, y in enumerate(ys):
        _, _, _, _, Kf[i], Gf[i], gf[i] = gains(*unpack(y))
    mean0, cov0 = _initial(spec, initial_mean, initial_cov)
    mean, cov, value = _moments(spec, bl, fine_t, Kf, Gf, gf, mean0, cov0, steps)
    idx = np.arange(0, steps + 1, 2 * substeps)
    return RiccatiSolution(
        kind="mfg", times=fine_t[idx],
        P=ys[idx, :n * n].reshape(-1, n, n), K_gain=Kf[idx], G_gain=Gf[idx], g0=gf[idx],
        mean=mean[::substeps], cov=cov[::substeps], value=value,
        mean_part={"Gamma": ys[idx, n * n:2 * n * n].reshape(-1, n, n),
                   "psi": ys[idx, 2 * n * n:2 * n * n + n]})
