"""Distances and losses: GAP baseline, flow-weighted region distance, structural distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, FeatureSet, _check_channels, gap, normalize_rows
from .diffgrad import backprop_to_features, normalize_backward
from .transport import DEFAULT_REG, FlowSolution, TransportProblem, problem_from_features, solve


@dataclass(frozen=True)
class AdjacencyMatrix:
    size: int
    values: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    margin_global: float = 0.3
    margin_region: float = 0.3
    margin_struct: float = 0.3
    alpha: float = 0.01

    def __post_init__(self) -> None:
        if min(self.margin_global, self.margin_region, self.margin_struct) <= 0:
            raise ValueError("margins must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def baseline_distance(u: FeatureSet, v: FeatureSet, normalized: bool = True) -> float:
    """Cosine distance between the pooled vectors.

    ``normalized=False`` uses the raw means, for which the value equals the
    average of all pairwise ``1 - u_i . v_j``.
    """
    _check_channels(u, v)
    return float(1.0 - gap(u, normalized) @ gap(v, normalized))


def d_w(u: FeatureSet, v: FeatureSet, flow: FlowSolution | np.ndarray) -> float:
    """Flow-weighted region distance ``(1/mn) sum_ij (1 - u_i . v_j) x_ij`` on unit-norm rows."""
    _check_channels(u, v)
    x = flow.flow if isinstance(flow, FlowSolution) else np.asarray(flow, dtype=np.float64)
    m, n = u.size, v.size
    if x.shape != (m, n):
        raise DimensionError(f"flow has shape {x.shape}, expected {(m, n)}")
    cost = 1.0 - normalize_rows(u.data) @ normalize_rows(v.data).T
    return float(np.sum(cost * x) / (m * n))


def region_distance(u: FeatureSet, v: FeatureSet, reg: float = DEFAULT_REG) -> float:
    """Solve the transport problem for (u, v) and return d_W."""
    return d_w(u, v, solve(problem_from_features(u, v, reg)))


def d_w_and_grad(u: FeatureSet, v: FeatureSet, reg: float = DEFAULT_REG, flow_path: bool = True,
                 problem: TransportProblem | None = None,
                 sol: FlowSolution | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """d_W and its gradient w.r.t. the raw (unnormalized) local features."""
    un, vn = u.normalize(), v.normalize()
    if problem is None or sol is None:
        problem = problem_from_features(u, v, reg)
        sol = solve(problem)
    m, n = u.size, v.size
    cost = problem.cost
    value = float(np.sum(cost * sol.flow) / (m * n))
    gun, gvn = backprop_to_features(un, vn, cost / (m * n), problem, sol,
                                    cost_grad=sol.flow / (m * n), flow_path=flow_path)
    return value, normalize_backward(u.data, gun), normalize_backward(v.data, gvn)


def adjacency(fs: FeatureSet) -> AdjacencyMatrix:
    """Region self-similarity: cosine of every pair of cells, scaled by 1/m^2."""
    x = normalize_rows(fs.data)
    m = fs.size
    vals = (x @ x.T) / (m * m)
    return AdjacencyMatrix(m, 0.5 * (vals + vals.T))


def interpolation_matrix(n: int, m: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation from n samples onto m samples.

    Sample ``k`` sits at ``t_k = k (n-1)/(m-1)``; for ``m == 1`` the single
    output averages the two end points.
    """
    p = np.zeros((m, n))
    if n == 1:
        p[:, 0] = 1.0
        return p
    if m == 1:
        p[0, 0] += 0.5
        p[0, n - 1] += 0.5
        return p
    t = np.arange(m) * (n - 1) / (m - 1)
    lo = np.minimum(np.floor(t).astype(int), n - 2)
    frac = t - lo
    rows = np.arange(m)
    p[rows, lo] = 1.0 - frac
    p[rows, lo + 1] += frac
    return p


def resize_adjacency(a: AdjacencyMatrix, target: int) -> AdjacencyMatrix:
    """Bilinear resize of an n x n adjacency onto an m x m lattice, keeping the 1/m^2 scale."""
    n = a.size
    if target < 1:
        raise ValueError("target size must be positive")
    if target == n:
        return a
    p = interpolation_matrix(n, target)
    vals = p @ a.values @ p.T * (n * n) / (target * target)
    return AdjacencyMatrix(target, vals)


def _resized_photo(v: np.ndarray, m: int) -> np.ndarray:
    """Unit-norm photo features interpolated onto the sketch's m regions."""
    vn = normalize_rows(v)
    if vn.shape[0] == m:
        return vn
    return normalize_rows(interpolation_matrix(vn.shape[0], m) @ vn)


def omega(u: FeatureSet, v: FeatureSet) -> np.ndarray:
    """Cross-modal weight ``relu(u_i.v_i) relu(u_i.v_j) relu(u_j.v_i) relu(u_j.v_j)``.

    ``v`` is resized to the sketch's region count first.
    """
    _check_channels(u, v)
    un = normalize_rows(u.data)
    vr = _resized_photo(v.data, u.size)
    return _omega(np.maximum(un @ vr.T, 0.0))


def _omega(s: np.ndarray) -> np.ndarray:
    diag = np.diag(s)
    return np.outer(diag, diag) * s * s.T


def d_g(u: FeatureSet, v: FeatureSet, weighted: bool = True) -> float:
    """Structural distance: (weighted) L1 gap between the two adjacency matrices.

    ``weighted=False`` gives the naive variant with every weight equal to 1.
    """
    _check_channels(u, v)
    au = adjacency(u).values
    av = resize_adjacency(adjacency(v), u.size).values
    w = omega(u, v) if weighted else 1.0
    return float(np.sum(w * np.abs(au - av)))


def d_g_and_grad(u: FeatureSet, v: FeatureSet, weighted: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
    """d_G and its gradient w.r.t. the raw local features (subgradient 0 at kinks)."""
    _check_channels(u, v)
    m, n = u.size, v.size
    un = normalize_rows(u.data)
    vn = normalize_rows(v.data)
    p = interpolation_matrix(n, m) if n != m else None
    scale = (n * n) / (m * m)
    au = un @ un.T / (m * m)
    av = vn @ vn.T / (n * n)
    av_r = p @ av @ p.T * scale if p is not None else av
    diff = au - av_r
    e = np.abs(diff)
    sign = np.sign(diff)

    if p is not None:
        vr_raw = p @ vn
        vr = normalize_rows(vr_raw)
    else:
        vr = vn
    pre = un @ vr.T
    s = np.maximum(pre, 0.0)
    w = _omega(s) if weighted else np.ones((m, m))
    value = float(np.sum(w * e))

    # adjacency path
    ga = w * sign
    gun = (ga + ga.T) @ un / (m * m)
    gav_r = -ga
    gav = p.T @ gav_r @ p * scale if p is not None else gav_r
    gvn = (gav + gav.T) @ vn / (n * n)

    # weight path: w_ij = a_i a_j s_ij s_ji with a = diag(s)
    if weighted:
        ee = e + e.T
        a = np.diag(s)
        gs = np.outer(a, a) * s.T * ee
        gdiag = np.sum(ee * a[None, :] * s * s.T, axis=1)
        gs[np.diag_indices(m)] += gdiag
        gpre = gs * (pre > 0)
        gun += gpre @ vr
        gvr = gpre.T @ un
        if p is not None:
            gvn += p.T @ normalize_backward(vr_raw, gvr)
        else:
            gvn += gvr
    return value, normalize_backward(u.data, gun), normalize_backward(v.data, gvn)


def triplet(beta_pos: float, beta_neg: float, margin: float) -> float:
    return max(0.0, margin + beta_pos - beta_neg)


def total_loss(lr: float, lg: float, cfg: LossConfig = LossConfig()) -> float:
    return lr + cfg.alpha * lg


def combined_distance(u: FeatureSet, v: FeatureSet, alpha: float = LossConfig.alpha,
                      reg: float = DEFAULT_REG) -> float:
    """Scoring distance ``d_W + alpha * d_G``."""
    return region_distance(u, v, reg) + alpha * d_g(u, v)
