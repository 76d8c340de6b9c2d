"""CSV and JSON writers for run artifacts.

CSV files follow RFC 4180 (CRLF line ends, header row, UTF-8, '.' decimals)
and print floats with repr so they round-trip exactly.  JSON reports use
sorted keys so identical runs give identical bytes.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header, rows):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# artifact tables

def convergence_rows(report):
    return (["iter", "J", "residual", "step"],
            [[i, J, r, s] for i, (J, r, s) in
             enumerate(zip(report.J, report.residual, report.step))])


def _particles(N, max_particles):
    return range(N if max_particles is None else min(N, max_particles))


def control_rows(ctrl, grid, max_particles=None):
    V = ctrl.values
    d = V.shape[2]
    t = grid.nodes
    rows = [[k, t[k], i] + list(V[k, i]) for k in range(V.shape[0])
            for i in _particles(V.shape[1], max_particles)]
    return ["step", "t", "particle"] + [f"v{c}" for c in range(d)], rows


def trajectory_rows(ens, grid, max_particles=None):
    X = ens.states
    t = grid.nodes
    rows = [[k, t[k], i] + list(X[k, i]) for k in range(X.shape[0])
            for i in _particles(X.shape[1], max_particles)]
    return ["step", "t", "particle"] + [f"x{a}" for a in range(X.shape[2])], rows


def adjoint_rows(adj, grid, max_particles=None):
    P, Q = adj.P, adj.Q
    n = P.shape[2]
    t = grid.nodes
    rows = []
    for k in range(P.shape[0]):
        for i in _particles(P.shape[1], max_particles):
            q = list(Q[k, i].ravel()) if k < Q.shape[0] else [float("nan")] * (n * n)
            rows.append([k, t[k], i] + list(P[k, i]) + q)
    header = (["step", "t", "particle"] + [f"p{a}" for a in range(n)]
              + [f"q{j}_{a}" for j in range(n) for a in range(n)])
    return header, rows


def gains_rows(sol):
    n = sol.P.shape[1]
    d = sol.K_gain.shape[1]
    header = (["t"] + [f"P{a}{b}" for a in range(n) for b in range(n)]
              + [f"K{c}{b}" for c in range(d) for b in range(n)]
              + [f"G{c}{b}" for c in range(d) for b in range(n)]
              + [f"g0_{c}" for c in range(d)] + [f"mean{a}" for a in range(n)]
              + [f"cov{a}{b}" for a in range(n) for b in range(n)])
    rows = []
    for k, t in enumerate(sol.times):
        rows.append([t] + list(sol.P[k].ravel()) + list(sol.K_gain[k].ravel())
                    + list(sol.G_gain[k].ravel()) + list(sol.g0[k]) + list(sol.mean[k])
                    + list(sol.cov[k].ravel()))
    return header, rows


def ensemble_summary(p, grid, ens, ctrl):
    from .forward import running_cost_profile
    from .measure import ensemble_norm
    integrand = list(running_cost_profile(p, grid, ens, ctrl)) + [None]
    return [{"step": k, "t": float(grid.nodes[k]),
             "mean": (ens.weights @ ens.states[k]).tolist(),
             "norm": ensemble_norm(ens.states[k], ens.measure(k)),
             "cost_integrand": integrand[k]} for k in range(ens.K + 1)]
