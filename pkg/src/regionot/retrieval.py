"""Gallery scoring, Acc@q and the complete-vs-partial masking experiment."""

from __future__ import annotations

import configparser
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, FeatureSet, normalize_rows, read_pfs, write_pfs
from .metrics import interpolation_matrix
from .synth import SceneSpec, generate_pair, make_prototypes, mask_objects, random_scene
from .transport import DEFAULT_REG, MARGINAL_FLOOR, solve_batch

METRICS = ("gap", "ot", "ot+adj")
DEFAULT_ALPHA = 0.01
CSV_HEADER = ["metric", "p_mask", "q", "mean_acc", "std_acc", "runs", "num_queries", "seed"]


class Gallery:
    """Read-only photo gallery with features derived once at construction.

    ``feature_computations`` counts how many items have had their derived
    features (normalized rows, pooled vector, adjacency) computed.
    """

    def __init__(self, items: list[tuple[str, FeatureSet]]):
        if not items:
            raise ValueError("empty gallery")
        ids = [i for i, _ in items]
        if len(set(ids)) != len(ids):
            raise ValueError("gallery ids must be unique")
        shapes = {fs.data.shape for _, fs in items}
        channels = {fs.channels for _, fs in items}
        if len(channels) != 1:
            raise DimensionError("gallery items must share a channel count")
        self.items = list(items)
        self.index = {i: k for k, i in enumerate(ids)}
        self.channels = channels.pop()
        self.feature_computations = 0
        self._uniform = len(shapes) == 1
        self._normed = []
        self._pooled = []
        self._adj = []
        for _, fs in self.items:
            vn = normalize_rows(fs.data)
            g = fs.data.mean(axis=0)
            self._normed.append(vn)
            self._pooled.append(normalize_rows(g[None])[0])
            self._adj.append(vn @ vn.T / (fs.size * fs.size))
            self.feature_computations += 1
        self._pooled_stack = np.stack(self._pooled)
        if self._uniform:
            self._normed_stack = np.stack(self._normed)
            self._adj_stack = np.stack(self._adj)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    def save(self, directory: str | Path) -> None:
        """Write each item as a PFS1 file plus ``manifest.json`` (id -> filename)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for k, (item_id, fs) in enumerate(self.items):
            name = f"item_{k:05d}.pfs"
            write_pfs(directory / name, fs)
            manifest[item_id] = name
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "Gallery":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        return cls([(item_id, read_pfs(directory / name)) for item_id, name in manifest.items()])


# -- batched distances ------------------------------------------------------------


def _groups(g: Gallery):
    if g._uniform:
        yield np.arange(len(g)), g._normed_stack, g._adj_stack
    else:
        by_size: dict[int, list[int]] = {}
        for k, vn in enumerate(g._normed):
            by_size.setdefault(vn.shape[0], []).append(k)
        for idx in by_size.values():
            yield np.array(idx), np.stack([g._normed[k] for k in idx]), np.stack([g._adj[k] for k in idx])


def gap_distances(query: FeatureSet, g: Gallery) -> np.ndarray:
    q = normalize_rows(query.data.mean(axis=0)[None])[0]
    return 1.0 - g._pooled_stack @ q


def ot_distances(query: FeatureSet, g: Gallery, reg: float = DEFAULT_REG) -> np.ndarray:
    """d_W between the query and every gallery item, solved as one batch per item shape."""
    un = normalize_rows(query.data)
    m = un.shape[0]
    usum = un.sum(axis=0)
    out = np.empty(len(g))
    for idx, vn, _ in _groups(g):
        n = vn.shape[1]
        cost = 1.0 - np.einsum("ic,bjc->bij", un, vn)
        s = np.maximum(np.einsum("ic,bc->bi", un, vn.sum(axis=1)), 0.0) + MARGINAL_FLOOR
        d = np.maximum(vn @ usum, 0.0) + MARGINAL_FLOOR
        d = d * (s.sum(axis=1) / d.sum(axis=1))[:, None]
        d[:, -1] += s.sum(axis=1) - d.sum(axis=1)
        sol = solve_batch(cost, s, d, reg, polish=False)
        out[idx] = np.sum(cost * sol["flow"], axis=(1, 2)) / (m * n)
    return out


def structural_distances(query: FeatureSet, g: Gallery, weighted: bool = True) -> np.ndarray:
    un = normalize_rows(query.data)
    m = un.shape[0]
    au = un @ un.T / (m * m)
    out = np.empty(len(g))
    for idx, vn, av in _groups(g):
        n = vn.shape[1]
        if n != m:
            p = interpolation_matrix(n, m)
            av = np.einsum("ij,bjk,lk->bil", p, av, p) * (n * n) / (m * m)
            vn = normalize_rows(np.einsum("ij,bjc->bic", p, vn))
        diff = np.abs(au[None] - av)
        if weighted:
            s = np.maximum(np.einsum("ic,bjc->bij", un, vn), 0.0)
            diag = np.diagonal(s, axis1=1, axis2=2)
            w = diag[:, :, None] * diag[:, None, :] * s * np.transpose(s, (0, 2, 1))
            diff = w * diff
        out[idx] = diff.sum(axis=(1, 2))
    return out


def gallery_distances(query: FeatureSet, g: Gallery, metric: str, alpha: float = DEFAULT_ALPHA,
                      reg: float = DEFAULT_REG) -> np.ndarray:
    if query.channels != g.channels:
        raise DimensionError(f"query has {query.channels} channels, gallery {g.channels}")
    if metric == "gap":
        return gap_distances(query, g)
    if metric == "ot":
        return ot_distances(query, g, reg)
    if metric == "ot+adj":
        return ot_distances(query, g, reg) + alpha * structural_distances(query, g)
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def rank(distances: np.ndarray, ids: list[str]) -> list[tuple[str, float]]:
    """Ascending by distance; stable, so ties keep gallery order."""
    order = np.argsort(distances, kind="stable")
    return [(ids[k], float(distances[k])) for k in order]


def score_gallery(query: FeatureSet, g: Gallery, metric: str = "gap", alpha: float = DEFAULT_ALPHA,
                  reg: float = DEFAULT_REG) -> list[tuple[str, float]]:
    return rank(gallery_distances(query, g, metric, alpha, reg), g.ids)


def rank_of(ranking: list[tuple[str, float]], true_id: str) -> int:
    """1-based position of ``true_id`` in a ranking."""
    for pos, (item_id, _) in enumerate(ranking, start=1):
        if item_id == true_id:
            return pos
    raise KeyError(true_id)


def acc_at_q(ranks: list[int] | np.ndarray, q: int, gallery_size: int | None = None) -> float:
    """Fraction of queries whose true match is within the top ``q``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if gallery_size is not None:
        q = min(q, gallery_size)
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return 0.0
    return float(np.mean(ranks <= q))


# -- experiment -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    gallery_size: int = 100
    num_queries: int = 50
    metrics: tuple[str, ...] = METRICS
    p_mask_levels: tuple[float, ...] = (0.0, 0.3, 0.5)
    qs: tuple[int, ...] = (1, 10)
    runs: int = 10
    seed: int = 0
    grid: tuple[int, int] = (5, 5)
    channels: int = 32
    num_classes: int = 8
    num_objects: int = 16
    noise_sigma: float = 0.2
    instance_spread: float = 0.6
    background_scale: float = 0.6
    jitter: int = 1
    nonnegative: bool = True
    alpha: float = DEFAULT_ALPHA
    reg: float = DEFAULT_REG

    def __post_init__(self) -> None:
        if self.gallery_size < 1 or self.num_queries < 1 or self.runs < 1:
            raise ValueError("gallery_size, num_queries and runs must be positive")
        if self.num_queries > self.gallery_size:
            raise ValueError("num_queries cannot exceed gallery_size (queries are gallery sketches)")
        for metric in self.metrics:
            if metric not in METRICS:
                raise ValueError(f"unknown metric {metric!r}")
        for p in self.p_mask_levels:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"p_mask {p} outside [0, 1]")
        if any(q < 1 for q in self.qs):
            raise ValueError("q values must be >= 1")


@dataclass
class RetrievalReport:
    metric_name: str
    p_mask: float
    acc_at: dict[int, float]
    std_at: dict[int, float]
    num_queries: int
    seed: int
    runs: int
    per_run: dict[int, list[float]] = field(default_factory=dict)


def _run_seed(seed: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, run]).generate_state(1)[0])


def run_experiment(cfg: ExperimentConfig, progress=None) -> list[RetrievalReport]:
    """Every metric x p_mask level, averaged over ``cfg.runs`` independent scene draws.

    Each run draws a fresh gallery of scenes, keeps the photos as the
    gallery and uses the first ``num_queries`` sketches (masked per level)
    as queries.  Masking uses the same draws for every metric, and the
    ``ot`` flows are shared with ``ot+adj``.
    """
    acc: dict[tuple[str, float], dict[int, list[float]]] = {
        (m, p): {q: [] for q in cfg.qs} for m in cfg.metrics for p in cfg.p_mask_levels
    }
    for run in range(cfg.runs):
        rng = np.random.default_rng(_run_seed(cfg.seed, run))
        protos = make_prototypes(cfg.num_classes, cfg.channels, rng)
        photos, sketches, truths = [], [], []
        for k in range(cfg.gallery_size):
            spec = random_scene(rng, cfg.grid, cfg.channels, cfg.num_classes, cfg.num_objects,
                                cfg.noise_sigma, jitter=cfg.jitter, instance_spread=cfg.instance_spread,
                                background_scale=cfg.background_scale, nonnegative=cfg.nonnegative)
            photo, sketch, truth = generate_pair(spec, int(rng.integers(2**63)), protos)
            photos.append((f"scene{k:04d}", photo))
            sketches.append(sketch)
            truths.append(truth)
        gallery = Gallery(photos)
        mask_seeds = rng.integers(2**63, size=cfg.num_queries)
        for p_mask in cfg.p_mask_levels:
            ranks: dict[str, list[int]] = {m: [] for m in cfg.metrics}
            for k in range(cfg.num_queries):
                query, _ = mask_objects(sketches[k], truths[k], p_mask, int(mask_seeds[k]))
                cache = {}
                for metric in cfg.metrics:
                    if metric == "gap":
                        dist = gap_distances(query, gallery)
                    else:
                        if "ot" not in cache:
                            cache["ot"] = ot_distances(query, gallery, cfg.reg)
                        dist = cache["ot"]
                        if metric == "ot+adj":
                            dist = dist + cfg.alpha * structural_distances(query, gallery)
                    order = np.argsort(dist, kind="stable")
                    ranks[metric].append(int(np.flatnonzero(order == k)[0]) + 1)
            for metric in cfg.metrics:
                for q in cfg.qs:
                    acc[(metric, p_mask)][q].append(acc_at_q(ranks[metric], q, len(gallery)))
            if progress:
                progress(run, p_mask)
    reports = []
    for metric in cfg.metrics:
        for p_mask in cfg.p_mask_levels:
            vals = acc[(metric, p_mask)]
            reports.append(RetrievalReport(
                metric, p_mask,
                {q: float(np.mean(v)) for q, v in vals.items()},
                {q: float(np.std(v)) for q, v in vals.items()},
                cfg.num_queries, cfg.seed, cfg.runs, {q: list(v) for q, v in vals.items()},
            ))
    return reports


def reports_to_csv(reports: list[RetrievalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in reports:
        for q in sorted(r.acc_at):
            writer.writerow([r.metric_name, f"{r.p_mask:.2f}", q, f"{r.acc_at[q]:.6f}",
                             f"{r.std_at[q]:.6f}", r.runs, r.num_queries, r.seed])
    return buf.getvalue()


def summary_table(reports: list[RetrievalReport]) -> str:
    qs = sorted({q for r in reports for q in r.acc_at})
    levels = sorted({r.p_mask for r in reports})
    head = f"{'metric':<8}" + "".join(f"  p={p:.1f} Acc@{q:<3}" for p in levels for q in qs)
    lines = [head]
    for metric in dict.fromkeys(r.metric_name for r in reports):
        row = f"{metric:<8}"
        for p in levels:
            r = next(x for x in reports if x.metric_name == metric and x.p_mask == p)
            for q in qs:
                row += f"  {100 * r.acc_at[q]:6.1f}±{100 * r.std_at[q]:4.1f}"
        lines.append(row)
    return "\n".join(lines)


# -- config file -------------------------------------------------------------------

_EXPERIMENT_KEYS = {
    "gallery_size": int, "num_queries": int, "runs": int, "seed": int, "channels": int,
    "num_classes": int, "num_objects": int, "noise_sigma": float, "instance_spread": float,
    "background_scale": float, "jitter": int, "alpha": float, "reg": float,
}


def parse_experiment_config(text: str, source: str = "<config>", **overrides) -> ExperimentConfig:
    """Parse an ``[experiment]`` section; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from exc
    for section in cp.sections():
        if section != "experiment":
            raise ValueError(f"{source}: unknown section [{section}]")
    values: dict = {}
    if cp.has_section("experiment"):
        lines = _key_lines(text)
        for key, raw in cp["experiment"].items():
            where = f"{source}:{lines.get(key, '?')}"
            try:
                if key in _EXPERIMENT_KEYS:
                    values[key] = _EXPERIMENT_KEYS[key](raw)
                elif key == "nonnegative":
                    values[key] = cp["experiment"].getboolean(key)
                elif key == "metrics":
                    values[key] = tuple(t for t in raw.replace(",", " ").split())
                elif key == "p_mask_levels":
                    values[key] = tuple(float(t) for t in raw.replace(",", " ").split())
                elif key == "qs":
                    values[key] = tuple(int(t) for t in raw.replace(",", " ").split())
                elif key == "grid":
                    h, w = (int(t) for t in raw.lower().replace("x", " ").split())
                    values[key] = (h, w)
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"{where}: field {key!r}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from exc


def _key_lines(text: str) -> dict[str, int]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if "=" in line and not line.lstrip().startswith(("#", ";", "[")):
            out.setdefault(line.split("=", 1)[0].strip().lower(), lineno)
    return out
