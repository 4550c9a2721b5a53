"""A linear embedding trained with the region and structural triplet losses.

The linear map stands in for the feature extractor; it exists to show that
gradients flow end to end through the optimal flow.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, FeatureSet, normalize_rows
from .diffgrad import DegeneracyError
from .metrics import LossConfig, d_g_and_grad, d_w_and_grad
from .synth import generate_pair, make_prototypes, random_scene
from .transport import DEFAULT_REG, ConvergenceError

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss_total", "loss_region", "loss_struct"]


@dataclass(frozen=True)
class EmbeddingParams:
    weight: np.ndarray
    learning_rate: float = 1e-4
    step_count: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.weight, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 2:
            raise ValueError(f"weight must be c_in x c_out with c_out >= 2, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weight has non-finite entries")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "weight", w)

    @classmethod
    def random(cls, c_in: int, c_out: int, seed: int = 0, learning_rate: float = 1e-4) -> "EmbeddingParams":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((c_in, c_out)) / np.sqrt(c_in), learning_rate)


@dataclass(frozen=True)
class TrainConfig:
    """Loop settings.  The step size lives on EmbeddingParams.

    The Adam entries are recorded for reference only; updates are plain
    gradient descent.
    """

    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    steps: int = 200
    reg: float = DEFAULT_REG
    flow_path: bool = True
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")


Triplet = tuple[FeatureSet, FeatureSet, FeatureSet]


def _project(params: EmbeddingParams, fs: FeatureSet) -> FeatureSet:
    if fs.channels != params.weight.shape[0]:
        raise DimensionError(f"feature set has {fs.channels} channels, embedding expects {params.weight.shape[0]}")
    return FeatureSet(fs.height, fs.width, params.weight.shape[1], fs.data @ params.weight)


def embed(params: EmbeddingParams, fs: FeatureSet) -> FeatureSet:
    """Per-cell linear map followed by L2 row normalization (zero rows map to e_1)."""
    out = _project(params, fs)
    return out.with_data(normalize_rows(out.data))


def triplet_losses(params: EmbeddingParams, triplet: Triplet, cfg: LossConfig = LossConfig(),
                   reg: float = DEFAULT_REG, flow_path: bool = True,
                   with_grad: bool = True) -> tuple[float, float, np.ndarray | None]:
    """``(L_region, L_struct, dL_total/dW)`` for one (sketch, positive, negative) triplet."""
    sketch, pos, neg = (_project(params, fs) for fs in triplet)
    wp, gsp, gp = d_w_and_grad(sketch, pos, reg, flow_path)
    wn, gsn, gn = d_w_and_grad(sketch, neg, reg, flow_path)
    gp_, gsp_g, gp_g = d_g_and_grad(sketch, pos)
    gn_, gsn_g, gn_g = d_g_and_grad(sketch, neg)
    lr = max(0.0, cfg.margin_region + wp - wn)
    lg = max(0.0, cfg.margin_struct + gp_ - gn_)
    if not with_grad:
        return lr, lg, None

    c = params.weight.shape[1]
    g_sketch = np.zeros((sketch.size, c))
    g_pos = np.zeros((pos.size, c))
    g_neg = np.zeros((neg.size, c))
    if lr > 0:
        g_sketch += gsp - gsn
        g_pos += gp
        g_neg -= gn
    if lg > 0:
        g_sketch += cfg.alpha * (gsp_g - gsn_g)
        g_pos += cfg.alpha * gp_g
        g_neg -= cfg.alpha * gn_g
    gw = triplet[0].data.T @ g_sketch + triplet[1].data.T @ g_pos + triplet[2].data.T @ g_neg
    return lr, lg, gw


def batch_loss(params: EmbeddingParams, triplets: list[Triplet], cfg: LossConfig = LossConfig(),
               reg: float = DEFAULT_REG) -> tuple[float, float, float]:
    """Mean ``(L_total, L_region, L_struct)`` over ``triplets`` without gradients."""
    parts = np.array([triplet_losses(params, t, cfg, reg, with_grad=False)[:2] for t in triplets])
    lr, lg = parts.mean(axis=0)
    return float(lr + cfg.alpha * lg), float(lr), float(lg)


def train_step(params: EmbeddingParams, triplets: Triplet | list[Triplet], cfg: LossConfig = LossConfig(),
               reg: float = DEFAULT_REG, flow_path: bool = True) -> tuple[EmbeddingParams, float, float, float]:
    """One gradient-descent step on the mean loss of ``triplets``.

    Returns ``(params', L_total, L_region, L_struct)`` with losses evaluated
    before the update.  A degenerate or unconverged solve skips the step:
    a warning is emitted and ``params`` is returned unchanged.
    """
    if isinstance(triplets, tuple):
        triplets = [triplets]
    if not triplets:
        raise ValueError("empty triplet batch")
    gw = np.zeros_like(params.weight)
    lrs, lgs = [], []
    try:
        for t in triplets:
            lr, lg, g = triplet_losses(params, t, cfg, reg, flow_path)
            lrs.append(lr)
            lgs.append(lg)
            gw += g
    except (DegeneracyError, ConvergenceError) as exc:
        msg = f"step {params.step_count}: skipped ({exc})"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return params, float("nan"), float("nan"), float("nan")
    lr, lg = float(np.mean(lrs)), float(np.mean(lgs))
    total = lr + cfg.alpha * lg
    if not np.isfinite(total):
        raise FloatingPointError("non-finite loss")
    gw /= len(triplets)
    if not np.any(gw):
        return EmbeddingParams(params.weight, params.learning_rate, params.step_count + 1), total, lr, lg
    new = EmbeddingParams(params.weight - params.learning_rate * gw, params.learning_rate, params.step_count + 1)
    return new, total, lr, lg


def train(params: EmbeddingParams, triplets: list[Triplet], cfg: TrainConfig = TrainConfig(),
          progress=None) -> tuple[EmbeddingParams, list[tuple[int, float, float, float]]]:
    """Run ``cfg.steps`` steps over consecutive batches of ``cfg.batch_size`` triplets (cycling)."""
    if not triplets:
        raise ValueError("no triplets")
    history = []
    n = len(triplets)
    for step in range(cfg.steps):
        start = (step * cfg.batch_size) % n
        batch = [triplets[(start + k) % n] for k in range(min(cfg.batch_size, n))]
        params, total, lr, lg = train_step(params, batch, cfg.loss, cfg.reg, cfg.flow_path)
        history.append((step, total, lr, lg))
        if progress:
            progress(step, total)
    return params, history


def write_training_log(history, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for step, total, lr, lg in history:
            writer.writerow([step, f"{total:.10g}", f"{lr:.10g}", f"{lg:.10g}"])


def make_triplets(count: int, seed: int = 0, grid: tuple[int, int] = (3, 3), channels: int = 16,
                  num_classes: int = 4, num_objects: int = 4, noise_sigma: float = 0.1,
                  **scene_kwargs) -> list[Triplet]:
    """Seeded (sketch, matching photo, other photo) triplets from synthetic scenes.

    The negative for scene ``k`` is the photo of scene ``k + 1`` (cyclically).
    """
    if count < 2:
        raise ValueError("need at least two scenes for triplets")
    rng = np.random.default_rng(seed)
    protos = make_prototypes(num_classes, channels, rng)
    pairs = []
    for _ in range(count):
        spec = random_scene(rng, grid, channels, num_classes, num_objects, noise_sigma, **scene_kwargs)
        photo, sketch, _ = generate_pair(spec, int(rng.integers(2**63)), protos)
        pairs.append((sketch, photo))
    return [(pairs[k][0], pairs[k][1], pairs[(k + 1) % count][1]) for k in range(count)]
