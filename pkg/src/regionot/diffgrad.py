"""Implicit differentiation of the optimal flow through its KKT system.

At an optimum ``z* = (x, lam, nu)`` the KKT map ``g(z, theta) = 0`` holds, so
``dz/dtheta = -(dg/dz)^{-1} dg/dtheta``.  ``flow_jacobian`` materializes this
with one dense solve; ``flow_vjp`` applies the transpose through the reduced
system ``A H^{-1} A^T`` with ``H = reg + lam / x`` (diagonal), which is what
the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import FeatureSet, _check_channels
from .transport import (MARGINAL_FLOOR, FlowSolution, NormalSystem, TransportProblem, _apply_a, _apply_at,
                        solve)

COMPLEMENTARITY_GAP = 1e-9


class DegeneracyError(RuntimeError):
    """The KKT matrix is singular at this solution (try a larger reg)."""


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FlowJacobian:
    dflow_dcost: np.ndarray     # (m, n, m, n)
    dflow_dsupply: np.ndarray   # (m, n, m)
    dflow_ddemand: np.ndarray   # (m, n, n); last demand is implied by balance, so its slice is 0


def _check_strict_complementarity(sol: FlowSolution) -> None:
    x = sol.flow.ravel()
    lam = sol.ineq_duals
    both_small = np.maximum(x, lam) <= COMPLEMENTARITY_GAP * max(1.0, float(np.abs(x).max()))
    if np.any(both_small):
        k = int(np.flatnonzero(both_small)[0])
        raise DegeneracyError(
            f"strict complementarity fails at flow entry {k} (x={x[k]:.3e}, lam={lam[k]:.3e}); "
            "increase reg"
        )


def kkt_matrix(p: TransportProblem, sol: FlowSolution) -> np.ndarray:
    """Jacobian of the KKT map with respect to (x, lam, nu_retained)."""
    nv, ne = p.m * p.n, p.num_equalities
    a = p.equality_matrix()
    x = sol.flow.ravel()
    lam = sol.ineq_duals
    k = np.zeros((2 * nv + ne, 2 * nv + ne))
    k[:nv, :nv] = p.reg * np.eye(nv)
    k[:nv, nv:2 * nv] = -np.eye(nv)
    k[:nv, 2 * nv:] = -a.T
    k[nv:2 * nv, :nv] = -np.diag(lam)
    k[nv:2 * nv, nv:2 * nv] = -np.diag(x)
    k[2 * nv:, :nv] = a
    return k


def flow_jacobian(p: TransportProblem, sol: FlowSolution) -> FlowJacobian:
    """Derivatives of the flow w.r.t. cost, supplies and demands by one dense KKT solve."""
    _check_strict_complementarity(sol)
    m, n = p.m, p.n
    nv, ne = m * n, p.num_equalities
    kkt = kkt_matrix(p, sol)
    # dg/dtheta columns: cost enters stationarity as +I, b enters h(x) - b as -I
    rhs = np.zeros((2 * nv + ne, nv + ne))
    rhs[:nv, :nv] = np.eye(nv)
    rhs[2 * nv:, nv:] = -np.eye(ne)
    try:
        dz = -np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"singular KKT matrix: {exc}; increase reg") from exc
    if not np.all(np.isfinite(dz)):
        raise DegeneracyError("non-finite KKT solve; increase reg")
    dx = dz[:nv]
    dcost = dx[:, :nv].reshape(m, n, m, n)
    dsupply = dx[:, nv:nv + m].reshape(m, n, m)
    ddemand = np.zeros((m, n, n))
    ddemand[:, :, :n - 1] = dx[:, nv + m:].reshape(m, n, n - 1)
    return FlowJacobian(dcost, dsupply, ddemand)


def flow_vjp(p: TransportProblem, sol: FlowSolution, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pull ``dL/dflow`` back to ``(dL/dcost, dL/dsupply, dL/ddemand)``.

    ``dL/ddemand`` has a zero last entry: with the redundant row dropped the
    last demand is determined by the others and never enters the solve.
    """
    _check_strict_complementarity(sol)
    g = np.asarray(upstream, dtype=np.float64).reshape(1, p.m, p.n)
    x = sol.flow[None]
    lam = sol.ineq_duals.reshape(1, p.m, p.n)
    hinv = x / (p.reg * x + lam)
    try:
        system = NormalSystem(hinv)
    except np.linalg.LinAlgError as exc:
        raise DegeneracyError(f"singular reduced KKT system: {exc}; increase reg") from exc
    t = hinv * g
    ts, td = _apply_a(t)
    ws, wd = system.solve(ts, td)
    if not (np.all(np.isfinite(ws)) and np.all(np.isfinite(wd))):
        raise DegeneracyError("non-finite reduced KKT solve; increase reg")
    gcost = -t + hinv * _apply_at(ws, wd)
    return gcost[0], ws[0], wd[0]


def backprop_to_features(u: FeatureSet, v: FeatureSet, upstream: np.ndarray,
                         problem: TransportProblem | None = None, sol: FlowSolution | None = None,
                         cost_grad: np.ndarray | None = None, flow_path: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of a scalar loss w.r.t. unit-norm local features ``u`` and ``v``.

    ``upstream`` is dL/dflow.  ``cost_grad`` adds any direct dependence of the
    loss on the cost matrix (for d_W this is flow / (m n)).  Both the cost path
    (c = 1 - u v^T) and the marginal path (relu-floored, rebalanced s and d)
    are differentiated.  With ``flow_path=False`` the flow is treated as a
    constant and only ``cost_grad`` is propagated.
    """
    _check_channels(u, v)
    ud, vd = u.data, v.data
    m, n = ud.shape[0], vd.shape[0]
    upstream = np.asarray(upstream, dtype=np.float64).reshape(m, n)
    gc = np.zeros((m, n)) if cost_grad is None else np.array(cost_grad, dtype=np.float64).reshape(m, n)
    gu = np.zeros_like(ud)
    gv = np.zeros_like(vd)

    if flow_path and np.any(upstream != 0):
        if problem is None or sol is None:
            from .transport import problem_from_features
            problem = problem_from_features(u, v)
            sol = solve(problem)
        gcf, gs, gd = flow_vjp(problem, sol, upstream)
        gc = gc + gcf

        usum, vsum = ud.sum(axis=0), vd.sum(axis=0)
        a = ud @ vsum
        e = vd @ usum
        s = np.maximum(a, 0.0) + MARGINAL_FLOOR
        draw = np.maximum(e, 0.0) + MARGINAL_FLOOR
        ssum, dsum = s.sum(), draw.sum()
        # d = draw * ssum / dsum
        dot = float(gd @ draw)
        gs_total = gs + dot / dsum
        gdraw = gd * (ssum / dsum) - dot * ssum / dsum ** 2
        ga = gs_total * (a > 0)
        ge = gdraw * (e > 0)
        gu += np.outer(ga, vsum) + ge @ vd
        gv += np.outer(ge, usum) + ga @ ud

    gu -= gc @ vd
    gv -= gc.T @ ud
    return gu, gv


def normalize_backward(raw: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient through row-wise L2 normalization (zero rows get 0)."""
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    y = raw / safe
    out = (grad - y * np.sum(y * grad, axis=-1, keepdims=True)) / safe
    return np.where(norms == 0.0, 0.0, out)


# -- finite-difference checking ------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple[str, int, int]
    threshold: float
    analytic: float
    numeric: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def to_text(self) -> str:
        name, i, j = self.worst_coordinate
        return (
            f"max_rel_err = {self.max_rel_err:.6e}\n"
            f"coordinate = {name}[{i},{j}]\n"
            f"analytic = {self.analytic:.12e}\n"
            f"numeric = {self.numeric:.12e}\n"
            f"threshold = {self.threshold:.1e}\n"
            f"result = {'pass' if self.passed else 'fail'}\n"
        )


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(fn: Callable[[np.ndarray, np.ndarray], float],
               grad: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]],
               u: np.ndarray, v: np.ndarray, h: float = 1e-5, threshold: float = 1e-3) -> GradCheckReport:
    """Compare ``grad(u, v)`` with central differences of ``fn`` coordinate by coordinate."""
    u = np.array(u, dtype=np.float64)
    v = np.array(v, dtype=np.float64)

    def value(a, b):
        out = float(fn(a, b))
        if not np.isfinite(out):
            raise EvaluationError(f"function returned non-finite value {out}")
        return out

    value(u, v)
    gu, gv = grad(u, v)
    worst = (-1.0, ("u", 0, 0), 0.0, 0.0)
    for name, arr, g in (("u", u, np.asarray(gu)), ("v", v, np.asarray(gv))):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = value(u, v)
            arr[idx] = orig - h
            fm = value(u, v)
            arr[idx] = orig
            num = (fp - fm) / (2 * h)
            err = float(relative_error(np.array(g[idx]), np.array(num)))
            if err > worst[0]:
                i, j = (idx + (0, 0))[:2]
                worst = (err, (name, int(i), int(j)), float(g[idx]), num)
    err, coord, ana, num = worst
    return GradCheckReport(max(err, 0.0), coord, threshold, ana, num)
