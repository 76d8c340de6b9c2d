"""Problem definitions: coefficient callables, the linear-quadratic family, and
sampled validators for derivatives, convexity and monotonicity.

Array conventions (N particles, state dim n, control dim d, noise dim n):

* ``x`` (N, n), ``v`` (N, d), ``s`` scalar time, ``m`` an EmpiricalMeasure.
* ``f`` -> (N, n); ``f_x`` -> (N, n, n) Jacobian [i, a, b] = d f_a / d x_b;
  ``f_v`` -> (N, n, d).
* ``sigma`` -> (N, n, n) with column j the j-th volatility vector [i, a, j];
  ``sigma_x`` -> (N, n, n, n) [i, a, j, b]; ``sigma_v`` -> (N, n, n, d).
* ``g`` -> (N,); ``g_x`` -> (N, n); ``g_v`` -> (N, d);
  ``g_T(x, m)`` -> (N,); ``gT_x`` -> (N, n).
* Measure derivatives take the coefficient arguments plus ``xi`` (M, n) and
  return the xi-gradient of the flat derivative for every (atom y, point i)
  pair: ``f_xi`` -> (N, M, n, n) [y, i, a, b], ``sigma_xi`` -> (N, M, n, n, n)
  [y, i, a, j, b], ``g_xi`` -> (N, M, n), ``gT_xi(x, m, xi)`` -> (N, M, n).
  ``None`` means the coefficient does not depend on the measure.
* ``g_nu`` / ``gT_nu`` return the scalar flat derivative itself, (N, M).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (ConfigError, ConvexityError, DerivativeMismatch,
                     DimensionError, MonotonicityError)
from .measure import EmpiricalMeasure

VALIDATOR_ATOMS = 16
GROWTH_NOTE = ("sampled on standard-normal arguments only; growth-rate "
               "compliance outside the sampled region is not checked")


@dataclass(frozen=True)
class Separable:
    """Measure-derivative kernel of the form left(args) . right(xi).

    ``left(*args)`` returns (N, *out, r) and ``right(xi, m)`` returns (M, r, n);
    the kernel value is sum_r left[y, ..., r] right[i, r, b].  Driver terms
    for kernels of this shape cost O(N) instead of O(N^2).
    """

    left: Callable
    right: Callable

    def __call__(self, *args):
        *coef_args, xi = args
        L = self.left(*coef_args)
        Rt = self.right(xi, coef_args[1])
        return np.einsum("y...r,irb->yi...b", L, Rt)


@dataclass
class ProblemSpec:
    """A mean-field control problem given by coefficient functions.

    See the module docstring for shapes.  ``sample_initial(rng, N)`` draws the
    initial states; ``argmin_v(x, m, s, p, q)`` optionally returns the
    pointwise minimizer of the Lagrangian in v.
    """

    n: int
    d: int
    t0: float
    T: float
    f: Callable
    f_x: Callable
    f_v: Callable
    g: Callable
    g_x: Callable
    g_v: Callable
    g_T: Callable
    gT_x: Callable
    sigma: Optional[Callable] = None
    sigma_x: Optional[Callable] = None
    sigma_v: Optional[Callable] = None
    f_xi: Optional[Callable] = None
    sigma_xi: Optional[Callable] = None
    g_xi: Optional[Callable] = None
    gT_xi: Optional[Callable] = None
    g_nu: Optional[Callable] = None
    gT_nu: Optional[Callable] = None
    sample_initial: Optional[Callable] = None
    argmin_v: Optional[Callable] = None
    lipschitz: float = 1.0
    name: str = "custom"
    lq: Optional["LQSpec"] = None

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise DimensionError("state and control dimensions must be >= 1")
        if not self.T > self.t0:
            raise ValueError("horizon must satisfy T > t0")
        if self.lipschitz <= 0:
            raise ValueError("lipschitz constant must be positive")
        if self.sigma is not None and (self.sigma_x is None or self.sigma_v is None):
            raise ValueError("a volatility needs sigma_x and sigma_v")

    @property
    def deterministic(self) -> bool:
        return self.sigma is None

    @property
    def measure_dependent(self) -> bool:
        return any(k is not None for k in
                   (self.f_xi, self.sigma_xi, self.g_xi, self.gT_xi))

    def initial(self, rng, N) -> np.ndarray:
        if self.sample_initial is None:
            return rng.standard_normal((N, self.n))
        x0 = np.asarray(self.sample_initial(rng, N), dtype=float)
        return x0.reshape(N, self.n)

    def replace(self, **changes) -> "ProblemSpec":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# linear-quadratic family

def _mat(value, shape, label):
    if value is None:
        return np.zeros(shape)
    arr = np.asarray(value, dtype=float)
    if arr.size == 1 and int(np.prod(shape)) == 1:
        arr = arr.reshape(shape)
    elif arr.ndim == 0 and len(shape) == 2 and shape[0] == shape[1]:
        arr = float(arr) * np.eye(shape[0])
    if arr.shape != shape:
        raise DimensionError(f"{label} has shape {arr.shape}, expected {shape}")
    return arr


@dataclass
class LQSpec:
    """Linear dynamics, quadratic costs, coefficients constant in time.

    Drift          b + A x + A_bar xbar + B v
    Volatility j   sigma0[:, j] + C[j] x + C_bar[j] xbar + D[j] v
    Running cost   x'Qx/2 + (x - S xbar)'Q_bar(x - S xbar)/2 + v'Rv/2
    Terminal cost  x'Hx/2 + (x - S_T xbar)'H_bar(x - S_T xbar)/2

    where xbar is the mean of the current measure.  ``lam`` is the convexity
    modulus in v (defaults to half the smallest eigenvalue of R).
    """

    n: int = 1
    d: int = 1
    t0: float = 0.0
    T: float = 1.0
    A: np.ndarray = None
    A_bar: np.ndarray = None
    B: np.ndarray = None
    b: np.ndarray = None
    sigma0: np.ndarray = None
    C: np.ndarray = None
    C_bar: np.ndarray = None
    D: np.ndarray = None
    Q: np.ndarray = None
    Q_bar: np.ndarray = None
    S: np.ndarray = None
    R: np.ndarray = None
    H: np.ndarray = None
    H_bar: np.ndarray = None
    S_T: np.ndarray = None
    initial_mean: np.ndarray = None
    initial_cov: np.ndarray = None
    lam: Optional[float] = None
    lipschitz: Optional[float] = None
    name: str = "lq"

    def __post_init__(self):
        n, d = int(self.n), int(self.d)
        self.n, self.d = n, d
        self.t0, self.T = float(self.t0), float(self.T)
        if not self.T >= self.t0:
            raise ValueError("horizon must satisfy T >= t0")
        self.A = _mat(self.A, (n, n), "A")
        self.A_bar = _mat(self.A_bar, (n, n), "A_bar")
        self.B = _mat(self.B, (n, d), "B")
        self.b = _mat(self.b, (n,), "b")
        self.sigma0 = _mat(self.sigma0, (n, n), "sigma0")
        self.C = _mat(self.C, (n, n, n), "C")
        self.C_bar = _mat(self.C_bar, (n, n, n), "C_bar")
        self.D = _mat(self.D, (n, n, d), "D")
        self.Q = _mat(self.Q, (n, n), "Q")
        self.Q_bar = _mat(self.Q_bar, (n, n), "Q_bar")
        self.S = np.eye(n) if self.S is None else _mat(self.S, (n, n), "S")
        self.R = np.eye(d) if self.R is None else _mat(self.R, (d, d), "R")
        self.H = _mat(self.H, (n, n), "H")
        self.H_bar = _mat(self.H_bar, (n, n), "H_bar")
        self.S_T = np.eye(n) if self.S_T is None else _mat(self.S_T, (n, n), "S_T")
        self.initial_mean = _mat(self.initial_mean, (n,), "initial_mean")
        self.initial_cov = (np.eye(n) if self.initial_cov is None
                            else _mat(self.initial_cov, (n, n), "initial_cov"))
        for label in ("Q", "Q_bar", "R", "H", "H_bar", "initial_cov"):
            M = getattr(self, label)
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{label} must be symmetric")
        if np.min(np.linalg.eigvalsh(self.initial_cov)) < -1e-12:
            raise ValueError("initial_cov must be positive semidefinite")
        entries = [self.A, self.A_bar, self.B, self.b, self.sigma0, self.C,
                   self.C_bar, self.D]
        biggest = max(float(np.max(np.abs(e))) if e.size else 0.0 for e in entries)
        if self.lipschitz is None:
            self.lipschitz = max(1.0, biggest)
        elif biggest > self.lipschitz:
            raise ValueError(
                f"coefficient entry {biggest} exceeds the declared bound {self.lipschitz}")

    @property
    def has_noise(self) -> bool:
        return any(np.any(M != 0) for M in (self.sigma0, self.C, self.C_bar, self.D))

    def convexity_modulus(self) -> float:
        return 0.5 * float(np.min(np.linalg.eigvalsh(self.R)))

    def check_convexity(self):
        """Raise ConvexityError unless R is positive definite with R >= 2 lam I."""
        modulus = self.convexity_modulus()
        if modulus <= 0:
            raise ConvexityError(f"control weight R is not positive definite "
                                 f"(smallest eigenvalue {2 * modulus})")
        lam = modulus if self.lam is None else float(self.lam)
        if lam <= 0 or lam > modulus + 1e-12:
            raise ConvexityError(
                f"declared lambda {lam} needs R >= {2 * lam} I, but the smallest "
                f"eigenvalue of R is {2 * modulus}")
        return lam

    FIELDS = ("n", "d", "t0", "T", "A", "A_bar", "B", "b", "sigma0", "C", "C_bar",
              "D", "Q", "Q_bar", "S", "R", "H", "H_bar", "S_T", "initial_mean",
              "initial_cov", "lam", "lipschitz", "name")

    @classmethod
    def from_dict(cls, d: dict) -> "LQSpec":
        unknown = sorted(set(d) - set(cls.FIELDS))
        if unknown:
            raise ConfigError(f"unknown LQ field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for k in self.FIELDS:
            val = getattr(self, k)
            out[k] = val.tolist() if isinstance(val, np.ndarray) else val
        return out

    def sample(self, rng, N):
        L = _psd_sqrt(self.initial_cov)
        return self.initial_mean + rng.standard_normal((N, self.n)) @ L.T


def _psd_sqrt(M):
    w, U = np.linalg.eigh(M)
    return U * np.sqrt(np.clip(w, 0.0, None))


def _nonzero(M):
    return bool(np.any(M != 0))


def lq_to_problem(spec: LQSpec) -> ProblemSpec:
    """Assemble closed-form coefficients and exact derivatives of an LQ spec."""
    spec.check_convexity()
    n, d = spec.n, spec.d
    A, A_bar, B, b = spec.A, spec.A_bar, spec.B, spec.b
    sig0, C, C_bar, D = spec.sigma0, spec.C, spec.C_bar, spec.D
    Q, Q_bar, S, R = spec.Q, spec.Q_bar, spec.S, spec.R
    H, H_bar, S_T = spec.H, spec.H_bar, spec.S_T
    R_inv = np.linalg.inv(R)
    eye = np.eye(n)

    def xbar(m):
        return m.mean()

    def f(x, m, v, s):
        return b + x @ A.T + xbar(m) @ A_bar.T + v @ B.T

    def f_x(x, m, v, s):
        return np.broadcast_to(A, (x.shape[0], n, n))

    def f_v(x, m, v, s):
        return np.broadcast_to(B, (x.shape[0], n, d))

    def sigma(x, m, v, s):
        out = (np.einsum("jab,ib->iaj", C, x) + np.einsum("jac,ic->iaj", D, v)
               + (sig0 + np.einsum("jab,b->aj", C_bar, xbar(m)))[None])
        return out

    def sigma_x(x, m, v, s):
        return np.broadcast_to(C.transpose(1, 0, 2), (x.shape[0], n, n, n))

    def sigma_v(x, m, v, s):
        return np.broadcast_to(D.transpose(1, 0, 2), (x.shape[0], n, n, d))

    def identity_right(xi, m):
        return np.broadcast_to(eye, (xi.shape[0], n, n))

    def gap(x, m, shift):
        return x - xbar(m) @ shift.T

    def g(x, m, v, s):
        e = gap(x, m, S)
        return 0.5 * (np.einsum("ia,ab,ib->i", x, Q, x)
                      + np.einsum("ia,ab,ib->i", e, Q_bar, e)
                      + np.einsum("ic,ce,ie->i", v, R, v))

    def g_x(x, m, v, s):
        return x @ Q + gap(x, m, S) @ Q_bar

    def g_v(x, m, v, s):
        return v @ R

    def g_T(x, m):
        e = gap(x, m, S_T)
        return 0.5 * (np.einsum("ia,ab,ib->i", x, H, x)
                      + np.einsum("ia,ab,ib->i", e, H_bar, e))

    def gT_x(x, m):
        return x @ H + gap(x, m, S_T) @ H_bar

    def g_nu(x, m, v, s, xi):
        return -(gap(x, m, S) @ Q_bar) @ (xi @ S.T).T

    def gT_nu(x, m, xi):
        return -(gap(x, m, S_T) @ H_bar) @ (xi @ S_T.T).T

    f_xi = sigma_xi = g_xi = gT_xi = None
    if _nonzero(A_bar):
        f_xi = Separable(lambda x, m, v, s: np.broadcast_to(A_bar, (x.shape[0], n, n)),
                         identity_right)
    if _nonzero(C_bar):
        ct = C_bar.transpose(1, 0, 2)
        sigma_xi = Separable(lambda x, m, v, s: np.broadcast_to(ct, (x.shape[0], n, n, n)),
                             identity_right)
    if _nonzero(Q_bar):
        g_xi = Separable(lambda x, m, v, s: -(gap(x, m, S) @ Q_bar),
                         lambda xi, m: np.broadcast_to(S, (xi.shape[0], n, n)))
    if _nonzero(H_bar):
        gT_xi = Separable(lambda x, m: -(gap(x, m, S_T) @ H_bar),
                          lambda xi, m: np.broadcast_to(S_T, (xi.shape[0], n, n)))

    def argmin_v(x, m, s, p, q):
        rhs = p @ B
        if q is not None:
            rhs = rhs + np.einsum("ija,jac->ic", q, D)
        return -rhs @ R_inv

    noisy = spec.has_noise
    return ProblemSpec(
        n=n, d=d, t0=spec.t0, T=spec.T,
        f=f, f_x=f_x, f_v=f_v, g=g, g_x=g_x, g_v=g_v, g_T=g_T, gT_x=gT_x,
        sigma=sigma if noisy else None,
        sigma_x=sigma_x if noisy else None,
        sigma_v=sigma_v if noisy else None,
        f_xi=f_xi, sigma_xi=sigma_xi if noisy else None, g_xi=g_xi, gT_xi=gT_xi,
        g_nu=g_nu if g_xi is not None else None,
        gT_nu=gT_nu if gT_xi is not None else None,
        sample_initial=spec.sample, argmin_v=argmin_v,
        lipschitz=float(spec.lipschitz), name=spec.name, lq=spec,
    )


# --------------------------------------------------------------------------
# fault injection (used to demonstrate that validators catch bad derivatives)

def _scaled(fn, factor):
    if fn is None:
        return None

    def wrapped(*args):
        return factor * np.asarray(fn(*args))
    return wrapped


FAULTS = {
    "double_g_v": ("g_v", 2.0),
    "double_g_x": ("g_x", 2.0),
    "double_f_x": ("f_x", 2.0),
    "double_f_v": ("f_v", 2.0),
    "flip_gT_x": ("gT_x", -1.0),
    "flip_gT_nu": ("gT_nu", -1.0),
    "flip_gT_xi": ("gT_xi", -1.0),
    "flip_g_xi": ("g_xi", -1.0),
}


def inject_fault(problem: ProblemSpec, fault: str) -> ProblemSpec:
    """Return a copy of ``problem`` with one derivative deliberately wrong."""
    if fault not in FAULTS:
        raise ConfigError(f"unknown fault {fault!r}; choose from {sorted(FAULTS)}")
    attr, factor = FAULTS[fault]
    if getattr(problem, attr) is None:
        raise ConfigError(f"fault {fault!r} targets {attr}, which this problem lacks")
    return problem.replace(**{attr: _scaled(getattr(problem, attr), factor),
                              "name": f"{problem.name}+{fault}"})


# --------------------------------------------------------------------------
# sampled validators

def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _sample_args(p: ProblemSpec, rng, atoms=VALIDATOR_ATOMS):
    x = rng.standard_normal((1, p.n))
    v = rng.standard_normal((1, p.d))
    s = float(rng.uniform(p.t0, p.T))
    m = EmpiricalMeasure(rng.standard_normal((atoms, p.n)))
    return x, v, s, m


def _central_jacobian(fn, z, h):
    """Central differences of fn (returns (1, *out)) w.r.t. the columns of z (1, k)."""
    cols = []
    for b in range(z.shape[1]):
        e = np.zeros_like(z)
        e[0, b] = h
        cols.append((np.asarray(fn(z + e)) - np.asarray(fn(z - e))) / (2 * h))
    return np.stack(cols, axis=-1)


class _Worst:
    """Tracks the worst |numeric - analytic| / (tol |analytic| + atol) ratio."""

    def __init__(self, tol, atol=1e-8):
        self.tol, self.atol = tol, atol
        self.ratio = 0.0
        self.entry = None

    def update(self, numeric, analytic, where):
        numeric, analytic = np.asarray(numeric, float), np.asarray(analytic, float)
        err = np.abs(numeric - analytic)
        ratio = err / (self.tol * np.abs(analytic) + self.atol)
        k = int(np.argmax(ratio)) if ratio.size else 0
        r = float(ratio.reshape(-1)[k]) if ratio.size else 0.0
        if not np.isfinite(r):
            r = float("inf")
        if self.entry is None or r > self.ratio:
            self.ratio = r
            self.entry = {
                "ratio": r,
                "abs_error": float(err.reshape(-1)[k]),
                "numeric": float(numeric.reshape(-1)[k]),
                "analytic": float(analytic.reshape(-1)[k]),
                "component": list(np.unravel_index(k, err.shape)) if err.ndim else [],
                **where,
            }

    def result(self):
        out = {"pass": self.entry is None or self.ratio <= 1.0}
        out.update(self.entry or {"ratio": 0.0})
        out["component"] = [int(c) for c in out.get("component", [])]
        return out


def _finish(report, strict, exc, what):
    report["pass"] = all(c["pass"] for c in report["checks"].values())
    if strict and not report["pass"]:
        bad = [k for k, c in report["checks"].items() if not c["pass"]]
        raise exc(f"{what} failed for: {', '.join(bad)}", report)
    return report


def validate_pointwise_derivatives(p: ProblemSpec, samples: int = 32, h: float = 1e-5,
                                   tol: float = 1e-6, seed=0, strict: bool = True) -> dict:
    """Compare every supplied x- and v-derivative with central differences."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    rng = _rng(seed)
    names = ["f_x", "f_v", "g_x", "g_v", "gT_x"]
    if p.sigma is not None:
        names += ["sigma_x", "sigma_v"]
    worst = {k: _Worst(tol) for k in names}
    for k in range(samples):
        x, v, s, m = _sample_args(p, rng)
        where = {"sample": k, "x": x[0].tolist(), "v": v[0].tolist(), "s": s}
        worst["f_x"].update(_central_jacobian(lambda z: p.f(z, m, v, s), x, h),
                            p.f_x(x, m, v, s), where)
        worst["f_v"].update(_central_jacobian(lambda z: p.f(x, m, z, s), v, h),
                            p.f_v(x, m, v, s), where)
        worst["g_x"].update(_central_jacobian(lambda z: p.g(z, m, v, s), x, h),
                            p.g_x(x, m, v, s), where)
        worst["g_v"].update(_central_jacobian(lambda z: p.g(x, m, z, s), v, h),
                            p.g_v(x, m, v, s), where)
        worst["gT_x"].update(_central_jacobian(lambda z: p.g_T(z, m), x, h),
                             p.gT_x(x, m), where)
        if p.sigma is not None:
            worst["sigma_x"].update(_central_jacobian(lambda z: p.sigma(z, m, v, s), x, h),
                                    p.sigma_x(x, m, v, s), where)
            worst["sigma_v"].update(_central_jacobian(lambda z: p.sigma(x, m, z, s), v, h),
                                    p.sigma_v(x, m, v, s), where)
    report = {"kind": "pointwise_derivatives", "problem": p.name, "samples": samples,
              "h": h, "tol": tol, "note": GROWTH_NOTE,
              "checks": {k: w.result() for k, w in worst.items()}}
    return _finish(report, strict, DerivativeMismatch, "derivative check")


def _coefficient_views(p: ProblemSpec, which: str):
    """Return (value(m), kernel(m, xi), flat(m, xi)) closures for a sampled point."""
    if which not in ("f", "sigma", "g", "g_T"):
        raise ValueError(f"unknown coefficient tag {which!r}")
    fn = {"f": p.f, "sigma": p.sigma, "g": p.g, "g_T": p.g_T}[which]
    kern = {"f": p.f_xi, "sigma": p.sigma_xi, "g": p.g_xi, "g_T": p.gT_xi}[which]
    flat = {"g": p.g_nu, "g_T": p.gT_nu}.get(which)
    if fn is None:
        raise ValueError(f"problem has no {which} coefficient")
    return fn, kern, flat


def validate_measure_derivative(p: ProblemSpec, which: str, samples: int = 16,
                                eps: float = 1e-4, tol: float = 1e-5, h: float = 1e-5,
                                seed=0, strict: bool = True) -> dict:
    """Check the measure derivatives of one coefficient against their definitions.

    Three sampled checks, each run when the needed callables exist:

    * ``flat``: the epsilon-mixture quotient (F(m + eps(m' - m)) - F(m)) / eps,
      Richardson-extrapolated, against the integral of the flat derivative
      against m' - m;
    * ``xi_gradient``: the supplied xi-gradient against central differences of
      the flat derivative in xi;
    * ``lift``: the derivative of F(law of X) with respect to one particle X_i
      against w_i times the xi-gradient at X_i.
    """
    fn, kern, flat = _coefficient_views(p, which)
    rng = _rng(seed)
    terminal = which == "g_T"
    checks = {}
    if kern is None and flat is None:
        report = {"kind": "measure_derivative", "problem": p.name, "coefficient": which,
                  "samples": 0, "eps": eps, "tol": tol, "note": "coefficient does not "
                  "depend on the measure; nothing to check", "checks": {}}
        report["pass"] = True
        return report
    w_flat, w_grad, w_lift = _Worst(tol), _Worst(tol), _Worst(tol)
    for k in range(samples):
        x, v, s, m = _sample_args(p, rng)
        m2 = EmpiricalMeasure(rng.standard_normal((VALIDATOR_ATOMS, p.n)) * 1.5 + 0.5)
        args = (lambda mm: (x, mm)) if terminal else (lambda mm: (x, mm, v, s))
        where = {"sample": k, "x": x[0].tolist()}
        if flat is not None:
            F0 = np.asarray(fn(*args(m)))

            def quotient(e):
                return (np.asarray(fn(*args(m.mixture(m2, e)))) - F0) / e
            numeric = 2.0 * quotient(eps / 2) - quotient(eps)
            analytic = (np.asarray(flat(*args(m), m2.points)) @ m2.weights
                        - np.asarray(flat(*args(m), m.points)) @ m.weights)
            w_flat.update(numeric, analytic, where)
            if kern is not None:
                xi = rng.standard_normal((1, p.n))
                num = _central_jacobian(lambda z: flat(*args(m), z)[:, 0], xi, h)
                w_grad.update(num, np.asarray(kern(*args(m), xi))[:, 0], where)
        if kern is not None:
            X = m.points
            i = int(rng.integers(m.size))

            def lifted(z):
                Xp = X.copy()
                Xp[i] = z[0]
                return np.asarray(fn(*args(EmpiricalMeasure(Xp, m.weights))))
            num = _central_jacobian(lifted, X[i:i + 1], h) / m.weights[i]
            ana = np.asarray(kern(*args(m), X[i:i + 1]))[:, 0]
            w_lift.update(num, ana, {**where, "particle": i})
    if flat is not None:
        checks["flat"] = w_flat.result()
        if kern is not None:
            checks["xi_gradient"] = w_grad.result()
    if kern is not None:
        checks["lift"] = w_lift.result()
    report = {"kind": "measure_derivative", "problem": p.name, "coefficient": which,
              "samples": samples, "eps": eps, "tol": tol, "checks": checks}
    return _finish(report, strict, DerivativeMismatch,
                   f"measure-derivative check of {which}")


def _flat_integral(flat, args, m, m2):
    if flat is None:
        return np.zeros(args[0].shape[0])
    return (np.asarray(flat(*args, m2.points)) @ m2.weights
            - np.asarray(flat(*args, m.points)) @ m.weights)


class _Margin:
    def __init__(self):
        self.value = np.inf
        self.witness = None

    def update(self, margin, witness):
        margin = float(margin)
        if margin < self.value:
            self.value, self.witness = margin, witness

    def result(self, slack):
        return {"pass": bool(self.value >= -slack), "worst_margin": self.value,
                "witness": self.witness}


def check_convexity_B3(p: ProblemSpec, mode: str = "control-only", samples: int = 200,
                       lam: float = 0.5, seed=0, strict: bool = True,
                       slack: float = 1e-9) -> dict:
    """Sampled certificate of the strong-convexity conditions on the costs.

    ``control-only`` tests g(x,m,v',s) - g(x,m,v,s) >= D_v g (v'-v) + lam|v'-v|^2.
    ``joint`` additionally tests joint convexity of g in (x, m, v), convexity of
    its flat derivative in xi, and the same two conditions for g_T; the
    control-only inequality is evaluated on the same samples.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if mode not in ("control-only", "joint"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "joint":
        for kern, flat, tag in ((p.g_xi, p.g_nu, "g"), (p.gT_xi, p.gT_nu, "g_T")):
            if kern is not None and flat is None:
                raise ValueError(f"joint mode needs the flat derivative of {tag}")
    rng = _rng(seed)
    names = ["control"] + (["joint_g", "flat_g", "joint_gT", "flat_gT"]
                           if mode == "joint" else [])
    margins = {k: _Margin() for k in names}
    for k in range(samples):
        x, v, s, m = _sample_args(p, rng)
        x2, v2, _, m2 = _sample_args(p, rng)
        xi, xi2 = rng.standard_normal((1, p.n)), rng.standard_normal((1, p.n))
        dv = v2 - v
        lam_term = lam * float(np.sum(dv * dv))
        g0 = float(p.g(x, m, v, s)[0])
        gv = p.g_v(x, m, v, s)[0]
        ctrl = float(p.g(x, m, v2, s)[0]) - g0 - float(gv @ dv[0]) - lam_term
        wit = {"x": x[0].tolist(), "v": v[0].tolist(), "v2": v2[0].tolist(), "s": s}
        margins["control"].update(ctrl, wit)
        if mode == "control-only":
            continue
        gx = p.g_x(x, m, v, s)[0]
        joint = (float(p.g(x2, m2, v2, s)[0]) - g0 - float(gx @ (x2 - x)[0])
                 - float(_flat_integral(p.g_nu, (x, m, v, s), m, m2)[0])
                 - float(gv @ dv[0]) - lam_term)
        margins["joint_g"].update(joint, {**wit, "x2": x2[0].tolist(),
                                          "m": m.to_dict(), "m2": m2.to_dict()})
        if p.g_nu is not None:
            a = (x, m, v, s)
            fl = (float(p.g_nu(*a, xi2)[0, 0]) - float(p.g_nu(*a, xi)[0, 0])
                  - float(np.asarray(p.g_xi(*a, xi))[0, 0] @ (xi2 - xi)[0]))
            margins["flat_g"].update(fl, {**wit, "xi": xi[0].tolist(),
                                          "xi2": xi2[0].tolist()})
        else:
            margins["flat_g"].update(0.0, None)
        gT0 = float(p.g_T(x, m)[0])
        jT = (float(p.g_T(x2, m2)[0]) - gT0 - float(p.gT_x(x, m)[0] @ (x2 - x)[0])
              - float(_flat_integral(p.gT_nu, (x, m), m, m2)[0]))
        margins["joint_gT"].update(jT, {"x": x[0].tolist(), "x2": x2[0].tolist(),
                                        "m": m.to_dict(), "m2": m2.to_dict()})
        if p.gT_nu is not None:
            a = (x, m)
            fl = (float(p.gT_nu(*a, xi2)[0, 0]) - float(p.gT_nu(*a, xi)[0, 0])
                  - float(np.asarray(p.gT_xi(*a, xi))[0, 0] @ (xi2 - xi)[0]))
            margins["flat_gT"].update(fl, {"x": x[0].tolist(), "xi": xi[0].tolist(),
                                           "xi2": xi2[0].tolist()})
        else:
            margins["flat_gT"].update(0.0, None)
    report = {"kind": "convexity", "problem": p.name, "mode": mode, "lambda": lam,
              "samples": samples, "slack": slack,
              "note": "sampled certificate, not a proof",
              "checks": {k: mg.result(slack) for k, mg in margins.items()}}
    report["worst_margin"] = min(c["worst_margin"] for c in report["checks"].values())
    return _finish(report, strict, ConvexityError, f"convexity ({mode})")


def check_monotonicity(p: ProblemSpec, mode: str = "lasry-lions", samples: int = 100,
                       size: int = VALIDATOR_ATOMS, seed=0, strict: bool = True,
                       slack: float = 1e-9) -> dict:
    """Sampled monotonicity certificate for the terminal cost g_T.

    For paired ensembles eta1, eta2 with empirical laws L1, L2:

    * ``displacement``: sum_i w_i (D_x g_T(eta2_i, L2) - D_x g_T(eta1_i, L1)).(eta2_i - eta1_i)
    * ``lasry-lions``: sum_i w_i [g_T(eta1_i, L1) + g_T(eta2_i, L2)
      - g_T(eta1_i, L2) - g_T(eta2_i, L1)]

    must both be nonnegative (up to ``slack``).
    """
    if mode not in ("displacement", "lasry-lions"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = _rng(seed)
    margin = _Margin()
    for k in range(samples):
        ens = []
        for _ in range(2):
            loc = rng.standard_normal(p.n)
            scale = rng.uniform(0.5, 1.5)
            ens.append(loc + scale * rng.standard_normal((size, p.n)))
        e1, e2 = ens
        L1, L2 = EmpiricalMeasure(e1), EmpiricalMeasure(e2)
        w = L1.weights
        if mode == "displacement":
            val = w @ np.sum((p.gT_x(e2, L2) - p.gT_x(e1, L1)) * (e2 - e1), axis=1)
        else:
            val = w @ (p.g_T(e1, L1) + p.g_T(e2, L2) - p.g_T(e1, L2) - p.g_T(e2, L1))
        margin.update(val, {"sample": k, "eta1": e1.tolist(), "eta2": e2.tolist()})
    report = {"kind": "monotonicity", "problem": p.name, "mode": mode,
              "samples": samples, "ensemble_size": size, "slack": slack,
              "note": "sampled certificate, not a proof",
              "checks": {mode: margin.result(slack)}}
    report["worst_margin"] = margin.value
    return _finish(report, strict, MonotonicityError, f"{mode} monotonicity")
