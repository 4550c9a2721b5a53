"""Regularized transportation problem and its primal-dual interior-point solver.

The problem solved is

    minimize    (reg / 2) * ||X||^2 + sum_ij c_ij x_ij
    subject to  x_ij >= 0,  sum_j x_ij = s_i,  sum_i x_ij = d_j

with ``X`` flattened row-major (``k = i * n + j``).  Equality multipliers
enter the Lagrangian with a minus sign, so stationarity reads
``reg * x + c - lam - A^T nu = 0``.  The last demand row is redundant once
``sum(s) == sum(d)`` and is dropped; its multiplier is reported as 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .core import FeatureSet, _check_channels

MARGINAL_FLOOR = 1e-3
DEFAULT_REG = 1e-3
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
REFERENCE_MAX_VARS = 9


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int = 0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ProblemSizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransportProblem:
    cost: np.ndarray
    supplies: np.ndarray
    demands: np.ndarray
    reg: float = DEFAULT_REG

    def __post_init__(self) -> None:
        cost = np.array(self.cost, dtype=np.float64, copy=True)
        s = np.array(self.supplies, dtype=np.float64, copy=True).ravel()
        d = np.array(self.demands, dtype=np.float64, copy=True).ravel()
        if cost.ndim != 2 or cost.shape != (s.size, d.size) or s.size == 0 or d.size == 0:
            raise ValueError(f"cost shape {cost.shape} does not match marginals ({s.size}, {d.size})")
        if not (np.all(np.isfinite(cost)) and np.all(np.isfinite(s)) and np.all(np.isfinite(d))):
            raise ValueError("problem data must be finite")
        if np.any(s <= 0) or np.any(d <= 0):
            raise ValueError("supplies and demands must be strictly positive")
        total = s.sum()
        if abs(total - d.sum()) > 1e-9 * max(1.0, total):
            raise ValueError(f"unbalanced marginals: sum(s)={total!r}, sum(d)={d.sum()!r}")
        if not math.isfinite(self.reg) or self.reg < 0:
            raise ValueError(f"reg must be a finite non-negative number, got {self.reg}")
        for arr in (cost, s, d):
            arr.flags.writeable = False
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "supplies", s)
        object.__setattr__(self, "demands", d)

    @property
    def m(self) -> int:
        return self.supplies.size

    @property
    def n(self) -> int:
        return self.demands.size

    @property
    def num_inequalities(self) -> int:
        return self.m * self.n

    @property
    def num_equalities(self) -> int:
        return self.m + self.n - 1

    def inequality_matrix(self) -> np.ndarray:
        """G in ``G x <= 0``; here simply ``-I``."""
        return -np.eye(self.m * self.n)

    def equality_matrix(self, full: bool = False) -> np.ndarray:
        return equality_matrix(self.m, self.n, full=full)

    def equality_rhs(self, full: bool = False) -> np.ndarray:
        b = np.concatenate([self.supplies, self.demands])
        return b if full else b[:-1]

    def objective(self, flow: np.ndarray) -> float:
        flow = np.asarray(flow, dtype=np.float64)
        return float(0.5 * self.reg * np.sum(flow * flow) + np.sum(self.cost * flow))


@dataclass(frozen=True, eq=False)
class FlowSolution:
    flow: np.ndarray
    ineq_duals: np.ndarray
    eq_duals: np.ndarray
    objective: float
    iterations: int = 0
    residual: float = 0.0
    polished: bool = field(default=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape


def equality_matrix(m: int, n: int, full: bool = False) -> np.ndarray:
    """Row/column-sum constraint matrix, supply rows first then demand rows."""
    a = np.zeros((m + n, m * n))
    for i in range(m):
        a[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        a[m + j, j::n] = 1.0
    return a if full else a[:-1]


def _balance(supplies: np.ndarray, demands: np.ndarray) -> np.ndarray:
    """Rescale demands so that their float sum equals sum(supplies) exactly."""
    total = supplies.sum()
    d = demands * (total / demands.sum())
    d[-1] += total - d.sum()
    # float summation can still disagree in the last bit: nudge single entries
    # an ulp at a time (largest first) until the two sums match
    for k in np.argsort(-d, kind="stable"):
        base, gap = d[k], total - d.sum()
        for _ in range(16):
            if gap == 0.0:
                return d
            d[k] = np.nextafter(d[k], np.inf if gap > 0 else -np.inf)
            new_gap = total - d.sum()
            if new_gap != 0.0 and np.sign(new_gap) != np.sign(gap):
                d[k] = base
                break
            gap = new_gap
        if total - d.sum() == 0.0:
            return d
    return d


def build_marginals(u: FeatureSet, v: FeatureSet, eps: float = MARGINAL_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Supplies and demands from global-pool consistency, floored and balanced.

    ``s_i = relu(u_i . sum_j v_j) + eps`` and ``d_j = relu(v_j . sum_i u_i) + eps``;
    the demands are then rescaled so both vectors have the same total.
    """
    _check_channels(u, v)
    s = np.maximum(u.data @ v.data.sum(axis=0), 0.0) + eps
    d = np.maximum(v.data @ u.data.sum(axis=0), 0.0) + eps
    return s, _balance(s, d)


def assemble(cost: np.ndarray, supplies: np.ndarray, demands: np.ndarray,
             reg: float = DEFAULT_REG) -> TransportProblem:
    cost = np.asarray(cost, dtype=np.float64)
    s = np.asarray(supplies, dtype=np.float64).ravel()
    d = np.asarray(demands, dtype=np.float64).ravel()
    if cost.shape != (s.size, d.size):
        raise ValueError(f"cost shape {cost.shape} does not match marginals ({s.size}, {d.size})")
    if np.any(s <= 0) or np.any(d <= 0):
        raise ValueError("marginals must be strictly positive after flooring")
    return TransportProblem(cost, s, _balance(s, d), reg)


def problem_from_features(u: FeatureSet, v: FeatureSet, reg: float = DEFAULT_REG) -> TransportProblem:
    """Normalize both sets and assemble the cosine-cost transport problem."""
    from .core import pairwise_cost

    un, vn = u.normalize(), v.normalize()
    s, d = build_marginals(un, vn)
    return assemble(pairwise_cost(un, vn), s, d, reg)


def random_problem(rng: np.random.Generator, m: int, n: int, channels: int = 4,
                   reg: float = DEFAULT_REG) -> TransportProblem:
    """Costs uniform on [0, 2]; marginals from random unit-row feature sets."""
    u = FeatureSet(1, m, channels, rng.standard_normal((m, channels))).normalize()
    v = FeatureSet(1, n, channels, rng.standard_normal((n, channels))).normalize()
    s, d = build_marginals(u, v)
    return assemble(rng.uniform(0.0, 2.0, size=(m, n)), s, d, reg)


# -- structured linear algebra ------------------------------------------------
#
# With the dropped last demand row, A diag(w) A^T has the block form
#   [[diag(W 1),      W[:, :n-1]],
#    [W[:, :n-1]^T,   diag(1^T W)[:n-1]]]
# for W = w reshaped (m, n).  NormalSystem eliminates the supply block.


class NormalSystem:
    """Batched factorization of ``A diag(w) A^T`` for weights ``w`` of shape (B, m, n)."""

    def __init__(self, w: np.ndarray):
        self.w = w
        self.row = w.sum(axis=2)
        self.wd = w[:, :, :-1]
        self.col = w.sum(axis=1)[:, :-1]
        nd = self.col.shape[1]
        if nd:
            schur = -np.matmul(self.wd.transpose(0, 2, 1), self.wd / self.row[:, :, None])
            idx = np.arange(nd)
            schur[:, idx, idx] += self.col
            self.schur = schur
            try:
                self.schur_inv = np.linalg.inv(schur)
            except np.linalg.LinAlgError:
                # primal degeneracy: the flow support splits into several trees and
                # the block is singular in floating point; its range still holds the rhs
                self.schur_inv = np.linalg.pinv(schur, rcond=1e-13, hermitian=True)
        else:
            self.schur = np.zeros((w.shape[0], 0, 0))
            self.schur_inv = self.schur

    def solve(self, rs: np.ndarray, rd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Solve for (y_s, y_d); ``rd`` has n-1 entries, returned ``y_d`` has n (last 0)."""
        t = rs / self.row
        rhs = rd - np.matmul(t[:, None, :], self.wd)[:, 0]
        yd = np.matmul(self.schur_inv, rhs[:, :, None])[:, :, 0]
        ys = t - np.matmul(self.wd, yd[:, :, None])[:, :, 0] / self.row
        yd_full = np.concatenate([yd, np.zeros((yd.shape[0], 1))], axis=1)
        return ys, yd_full


def _apply_a(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.sum(axis=2), x.sum(axis=1)[:, :-1]


def _apply_at(ys: np.ndarray, yd: np.ndarray) -> np.ndarray:
    return ys[:, :, None] + yd[:, None, :]


def _kkt_parts(c, s, d, reg, x, z, ys, yd):
    rdual = reg * x + c - z - _apply_at(ys, yd)
    rs, rd = _apply_a(x)
    return rdual, rs - s, rd - d[:, :-1], x * z


def _max_abs(*arrays: np.ndarray) -> np.ndarray:
    return np.max(np.stack([np.abs(a).reshape(a.shape[0], -1).max(axis=1, initial=0.0) for a in arrays]), axis=0)


def _step_to_boundary(v: np.ndarray, dv: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, v / -dv, np.inf)
    return np.minimum(1.0, ratio.reshape(v.shape[0], -1).min(axis=1))


def _newton(reg, x, z, rdual, rps, rpd, rcomp, system=None):
    """Newton direction for target complementarity residual ``rcomp`` (Z dx + X dz = rcomp)."""
    hinv = x / (reg * x + z)
    if system is None:
        system = NormalSystem(hinv)
    r1 = -rdual + rcomp / x
    t = hinv * r1
    ts, td = _apply_a(t)
    dys, dyd = system.solve(-rps - ts, -rpd - td)
    dx = hinv * (r1 + _apply_at(dys, dyd))
    dz = (rcomp - z * dx) / x
    return dx, dz, dys, dyd, system


def solve_batch(cost: np.ndarray, supplies: np.ndarray, demands: np.ndarray, reg: float = DEFAULT_REG,
                tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, polish: bool = True,
                raise_on_failure: bool = True) -> dict[str, np.ndarray]:
    """Mehrotra predictor-corrector on a batch of same-shape balanced problems.

    ``cost`` is (B, m, n), ``supplies`` (B, m), ``demands`` (B, n).  Returns
    a dict of batched arrays (flow, z, ys, yd, residual, iterations, polished).
    """
    c = np.asarray(cost, dtype=np.float64)
    s = np.asarray(supplies, dtype=np.float64)
    d = np.asarray(demands, dtype=np.float64)
    nb, m, n = c.shape
    if reg <= 0:
        raise ConvergenceError("regularization must be positive for a unique flow", float("inf"))

    x = np.broadcast_to((s.sum(axis=1) / (m * n))[:, None, None], c.shape).copy()
    z = np.ones_like(c)
    ys = np.zeros((nb, m))
    yd = np.zeros((nb, n))
    iters = np.zeros(nb, dtype=int)
    active = np.ones(nb, dtype=bool)
    residual = np.full(nb, np.inf)

    for it in range(max_iter + 1):
        rdual, rps, rpd, comp = _kkt_parts(c, s, d, reg, x, z, ys, yd)
        residual = _max_abs(rdual, rps, rpd, comp)
        active = residual > tol
        if not active.any() or it == max_iter:
            break
        if active.all():
            idx = slice(None)
            xa, za, ysa, yda = x, z, ys, yd
            ra = (rdual, rps, rpd)
            nact = nb
        else:
            idx = np.flatnonzero(active)
            xa, za, ysa, yda = x[idx], z[idx], ys[idx], yd[idx]
            ra = (rdual[idx], rps[idx], rpd[idx])
            nact = idx.size
        mu = comp[idx].reshape(nact, -1).mean(axis=1)

        dx, dz, _, _, system = _newton(reg, xa, za, *ra, -xa * za)
        alpha = np.minimum(_step_to_boundary(xa, dx), _step_to_boundary(za, dz))
        a3 = alpha[:, None, None]
        mu_aff = ((xa + a3 * dx) * (za + a3 * dz)).reshape(nact, -1).mean(axis=1)
        sigma = (mu_aff / mu) ** 3
        rcomp = -xa * za - dx * dz + (sigma * mu)[:, None, None]

        dx, dz, dys, dyd, _ = _newton(reg, xa, za, *ra, rcomp, system)
        alpha = np.minimum(1.0, 0.99 * np.minimum(_step_to_boundary(xa, dx), _step_to_boundary(za, dz)))
        a3 = alpha[:, None, None]
        x[idx] = xa + a3 * dx
        z[idx] = za + a3 * dz
        ys[idx] = ysa + alpha[:, None] * dys
        yd[idx] = yda + alpha[:, None] * dyd
        iters[idx] += 1

    failed = residual > tol
    if raise_on_failure and failed.any():
        k = int(np.flatnonzero(failed)[0])
        raise ConvergenceError("interior-point solver did not converge", float(residual[k]), int(iters[k]))

    polished = np.zeros(nb, dtype=bool)
    if polish:
        polished = _polish(c, s, d, reg, x, z, ys, yd, residual, tol)
        rdual, rps, rpd, comp = _kkt_parts(c, s, d, reg, x, z, ys, yd)
        residual = _max_abs(rdual, rps, rpd, comp)
    return {"flow": x, "z": z, "ys": ys, "yd": yd, "residual": residual,
            "iterations": iters, "polished": polished, "converged": ~failed}


def _polish(c, s, d, reg, x, z, ys, yd, residual, tol) -> np.ndarray:
    """Re-solve each converged problem on its predicted support; keep if it stays optimal.

    Entries with x < z are fixed at zero.  On the remaining support the flow
    splits into the minimum-norm solution of ``A_F x = b`` (independent of the
    cost) plus a null-space part ``-N N^T c_F / reg``, so flows pinned by the
    marginals alone come out bit-identical under cost perturbations.
    Updates the arrays in place.
    """
    nb, m, n = c.shape
    a = equality_matrix(m, n)
    ok = np.zeros(nb, dtype=bool)
    for k in range(nb):
        if residual[k] > tol:
            continue
        free = (x[k] > z[k]).ravel()
        af = a[:, free]
        b = np.concatenate([s[k], d[k][:-1]])
        cf = c[k].ravel()[free]
        x0, _, rank, _ = np.linalg.lstsq(af, b, rcond=None)
        if rank < af.shape[0] or np.abs(af @ x0 - b).max() > 1e-12 * max(1.0, float(np.abs(b).max())):
            continue
        null = scipy.linalg.null_space(af)
        xf = x0 - null @ (null.T @ cf) / reg
        if np.any(xf < 0):
            continue
        nu = np.linalg.lstsq(af.T, reg * xf + cf, rcond=None)[0]
        xk = np.zeros(m * n)
        xk[free] = xf
        zk = reg * xk + c[k].ravel() - a.T @ nu
        zk[free] = 0.0
        if np.any(zk < 0):
            continue
        xk = xk.reshape(m, n)
        zk = zk.reshape(m, n)
        ns, nd = nu[None, :m], np.concatenate([nu[m:], [0.0]])[None]
        rdual, rps, rpd, comp = _kkt_parts(c[k][None], s[k][None], d[k][None], reg,
                                           xk[None], zk[None], ns, nd)
        new_res = _max_abs(rdual, rps, rpd, comp)[0]
        if new_res > max(residual[k], 1e-12 * max(1.0, float(np.abs(b).max()))):
            continue
        x[k], z[k], ys[k], yd[k] = xk, zk, ns[0], nd[0]
        ok[k] = True
    return ok


def _to_solution(p: TransportProblem, out: dict[str, np.ndarray], k: int = 0) -> FlowSolution:
    flow = out["flow"][k].copy()
    eq = np.concatenate([out["ys"][k], out["yd"][k]])
    return FlowSolution(
        flow=flow,
        ineq_duals=out["z"][k].ravel().copy(),
        eq_duals=eq,
        objective=p.objective(flow),
        iterations=int(out["iterations"][k]),
        residual=float(out["residual"][k]),
        polished=bool(out["polished"][k]),
    )


def solve(p: TransportProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          polish: bool = True) -> FlowSolution:
    """Solve one problem with the primal-dual interior-point method.

    Raises ConvergenceError if the KKT residual does not reach ``tol``
    within ``max_iter`` iterations.
    """
    out = solve_batch(p.cost[None], p.supplies[None], p.demands[None], p.reg,
                      tol=tol, max_iter=max_iter, polish=polish)
    return _to_solution(p, out)


def solve_many(problems: list[TransportProblem], **kwargs) -> list[FlowSolution]:
    """Solve a list of problems, batching those with the same shape and reg."""
    groups: dict[tuple, list[int]] = {}
    for i, p in enumerate(problems):
        groups.setdefault((p.m, p.n, p.reg), []).append(i)
    result: list[FlowSolution | None] = [None] * len(problems)
    for (_, _, reg), idx in groups.items():
        batch = [problems[i] for i in idx]
        out = solve_batch(np.stack([p.cost for p in batch]), np.stack([p.supplies for p in batch]),
                          np.stack([p.demands for p in batch]), reg, **kwargs)
        for k, i in enumerate(idx):
            result[i] = _to_solution(problems[i], out, k)
    return result  # type: ignore[return-value]


def solve_reference(p: TransportProblem) -> FlowSolution:
    """Exact optimum by enumerating every active set of the nonnegativity constraints.

    Each candidate fixes a subset of flows at zero and solves the remaining
    equality-constrained QP with a dense least-squares KKT solve; the
    feasible candidate with the lowest objective is returned.
    """
    nv = p.m * p.n
    if p.reg <= 0:
        raise ValueError("reference solver needs a strictly convex problem (reg > 0)")
    if nv > REFERENCE_MAX_VARS:
        raise ProblemSizeError(f"reference solver handles at most {REFERENCE_MAX_VARS} flows, got {nv}")
    a = p.equality_matrix()
    b = p.equality_rhs()
    c = p.cost.ravel()
    ne = a.shape[0]
    scale = max(1.0, float(np.abs(b).max()))
    best = None
    for pattern in itertools.product((False, True), repeat=nv):
        free = np.array(pattern)
        if not free.any():
            continue
        af = a[:, free]
        nf = int(free.sum())
        kkt = np.zeros((nf + ne, nf + ne))
        kkt[:nf, :nf] = p.reg * np.eye(nf)
        kkt[:nf, nf:] = -af.T
        kkt[nf:, :nf] = af
        rhs = np.concatenate([-c[free], b])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        if np.abs(kkt @ sol - rhs).max() > 1e-9 * scale:
            continue
        xf = sol[:nf]
        if np.any(xf < -1e-12 * scale):
            continue
        x = np.zeros(nv)
        x[free] = np.maximum(xf, 0.0)
        obj = p.objective(x.reshape(p.m, p.n))
        if best is None or obj < best[0] - 1e-15 * max(1.0, abs(obj)):
            best = (obj, x, free)
    if best is None:
        raise ConvergenceError("no feasible active set", float("inf"))
    obj, x, free = best
    # multipliers: A_F^T nu = reg x_F + c_F, lam = reg x + c - A^T nu
    nu = np.linalg.lstsq(a[:, free].T, p.reg * x[free] + c[free], rcond=None)[0]
    lam = p.reg * x + c - a.T @ nu
    lam[free] = 0.0
    sol = FlowSolution(x.reshape(p.m, p.n), lam, np.concatenate([nu, [0.0]]), obj)
    return FlowSolution(sol.flow, sol.ineq_duals, sol.eq_duals, obj,
                        residual=float(np.abs(kkt_residual(p, sol)).max()))


def kkt_residual(p: TransportProblem, sol: FlowSolution) -> np.ndarray:
    """Stacked [stationarity; diag(lam) f(x); A x - b] over all m+n marginal rows."""
    x = np.asarray(sol.flow, dtype=np.float64).ravel()
    lam = np.asarray(sol.ineq_duals, dtype=np.float64)
    nu = np.asarray(sol.eq_duals, dtype=np.float64)
    a = p.equality_matrix(full=True)
    stationarity = p.reg * x + p.cost.ravel() - lam - a.T @ nu
    complementarity = lam * (-x)
    primal = a @ x - p.equality_rhs(full=True)
    return np.concatenate([stationarity, complementarity, primal])


# -- problem dump format ------------------------------------------------------


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


def dump_problem(p: TransportProblem) -> str:
    """Plain-text dump: ``key = values`` lines, one ``cost`` line per row."""
    lines = [f"m = {p.m}", f"n = {p.n}", f"reg = {p.reg!r}"]
    lines += ["cost = " + " ".join(repr(float(v)) for v in row) for row in p.cost]
    lines.append("supplies = " + " ".join(repr(float(v)) for v in p.supplies))
    lines.append("demands = " + " ".join(repr(float(v)) for v in p.demands))
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> TransportProblem:
    fields: dict[str, tuple[int, str]] = {}
    rows: list[tuple[int, list[float]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (t.strip() for t in line.split("=", 1))
        if key == "cost":
            rows.append((lineno, _floats(value, lineno)))
        elif key in ("m", "n", "reg", "supplies", "demands"):
            if key in fields:
                raise ParseError(f"duplicate key {key!r}", lineno)
            fields[key] = (lineno, value)
        else:
            raise ParseError(f"unknown key {key!r}", lineno)
    for key in ("m", "n", "supplies", "demands"):
        if key not in fields:
            raise ParseError(f"missing key {key!r}")
    m = _int(*fields["m"])
    n = _int(*fields["n"])
    reg = _floats(fields["reg"][1], fields["reg"][0])[0] if "reg" in fields else DEFAULT_REG
    if len(rows) != m:
        raise ParseError(f"expected {m} cost rows, got {len(rows)}", rows[-1][0] if rows else None)
    for lineno, row in rows:
        if len(row) != n:
            raise ParseError(f"cost row has {len(row)} entries, expected {n}", lineno)
    s = _floats(fields["supplies"][1], fields["supplies"][0])
    d = _floats(fields["demands"][1], fields["demands"][0])
    if len(s) != m:
        raise ParseError(f"expected {m} supplies, got {len(s)}", fields["supplies"][0])
    if len(d) != n:
        raise ParseError(f"expected {n} demands, got {len(d)}", fields["demands"][0])
    try:
        return TransportProblem(np.array([r for _, r in rows]), np.array(s), np.array(d), reg)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc


def _floats(value: str, lineno: int) -> list[float]:
    try:
        return [float(t) for t in value.replace(",", " ").split()]
    except ValueError:
        raise ParseError(f"invalid number in {value!r}", lineno) from None


def _int(lineno: int, value: str) -> int:
    try:
        out = int(value)
    except ValueError:
        raise ParseError(f"expected an integer, got {value!r}", lineno) from None
    if out < 1:
        raise ParseError(f"dimension must be positive, got {out}", lineno)
    return out
