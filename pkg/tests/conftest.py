import numpy as np
import pytest

from mfcontrol.coefficients import ProblemSpec

CRITERIA = {}


def record(name, ok, detail=""):
    """Store one acceptance verdict; printed in the terminal summary."""
    CRITERIA[name] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda s: int(s[1:])):
        ok, detail = CRITERIA[name]
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")


def _zeros_nn(x, *a):
    return np.zeros((x.shape[0], 1, 1))


def scalar_problem(**kw):
    """1-d ProblemSpec whose unspecified coefficients are identically zero."""
    base = dict(
        n=1, d=1, t0=0.0, T=1.0,
        f=lambda x, m, v, s: np.zeros_like(x), f_x=_zeros_nn, f_v=_zeros_nn,
        g=lambda x, m, v, s: np.zeros(x.shape[0]),
        g_x=lambda x, m, v, s: np.zeros_like(x),
        g_v=lambda x, m, v, s: np.zeros_like(v),
        g_T=lambda x, m: np.zeros(x.shape[0]),
        gT_x=lambda x, m: np.zeros_like(x))
    base.update(kw)
    return ProblemSpec(**base)


def const_sigma(value):
    """Constant scalar volatility coefficient triple."""
    return dict(sigma=lambda x, m, v, s: np.full((x.shape[0], 1, 1), float(value)),
                sigma_x=lambda x, m, v, s: np.zeros((x.shape[0], 1, 1, 1)),
                sigma_v=lambda x, m, v, s: np.zeros((x.shape[0], 1, 1, 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
