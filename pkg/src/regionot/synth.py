"""Synthetic scene features standing in for a CNN backbone.

Every object class has a unit prototype; every object instance perturbs its
class prototype so that scenes sharing classes are still distinguishable.
Photos carry every object plus low-norm background clutter.  Sketches carry
the same instances (shifted by up to one cell, with optional noise) and exact
zero vectors everywhere else.  Channel 0 is left out of all content vectors
so the canonical vector used for empty cells carries no content.

With ``nonnegative=True`` object vectors are rectified (absolute value)
before normalization, mimicking post-ReLU CNN activations: prototypes stay
near-orthogonal but every pair of objects correlates positively.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import FeatureSet


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    cell: tuple[int, int]
    radius: int = 0


@dataclass(frozen=True)
class SceneSpec:
    grid: tuple[int, int]
    channels: int
    num_classes: int
    objects: tuple[SceneObject, ...]
    noise_sigma: float = 0.0
    empty_fraction_target: float = 0.0
    jitter: int = 1
    instance_spread: float = 0.6
    background_scale: float = 0.1
    nonnegative: bool = False

    def __post_init__(self) -> None:
        h, w = self.grid
        if h < 1 or w < 1 or self.channels < 2 or self.num_classes < 1:
            raise ValueError("invalid grid, channels or class count")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.empty_fraction_target <= 1.0:
            raise ValueError("empty_fraction_target must be in [0, 1]")
        for obj in self.objects:
            r, c = obj.cell
            if not (0 <= r < h and 0 <= c < w):
                raise ValueError(f"object cell {obj.cell} outside {h}x{w} grid")
            if not 0 <= obj.class_id < self.num_classes:
                raise ValueError(f"class_id {obj.class_id} out of range")
            if obj.radius < 0:
                raise ValueError("radius must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    """Where each object landed in the photo and the sketch."""

    photo_cells: tuple[tuple[int, ...], ...]
    sketch_cells: tuple[tuple[int, ...], ...]
    instances: np.ndarray = field(repr=False)
    empty_mask: np.ndarray = field(repr=False)   # sketch cells holding no object

    @property
    def num_objects(self) -> int:
        return len(self.sketch_cells)


@dataclass(frozen=True)
class MaskRecord:
    masked_object_indices: frozenset[int]
    p_mask: float
    seed: int


def make_prototypes(num_classes: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit class prototypes with channel 0 kept at zero."""
    protos = np.zeros((num_classes, channels))
    protos[:, 1:] = rng.standard_normal((num_classes, channels - 1))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def footprint(cell: tuple[int, int], radius: int, grid: tuple[int, int]) -> list[int]:
    """Flat indices of grid cells within Chebyshev distance ``radius`` of ``cell``."""
    h, w = grid
    r0, c0 = cell
    out = []
    for r in range(max(0, r0 - radius), min(h, r0 + radius + 1)):
        for c in range(max(0, c0 - radius), min(w, c0 + radius + 1)):
            out.append(r * w + c)
    return out


def generate_pair(spec: SceneSpec, seed: int,
                  prototypes: np.ndarray | None = None) -> tuple[FeatureSet, FeatureSet, GroundTruth]:
    """Deterministic (photo, sketch, truth) for ``(spec, seed)``.

    ``prototypes`` lets several scenes share class prototypes; when omitted
    they are drawn from the same seeded generator.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.grid
    c = spec.channels
    if prototypes is None:
        prototypes = make_prototypes(spec.num_classes, c, rng)
    k = len(spec.objects)

    inst = prototypes[[o.class_id for o in spec.objects]].copy() if k else np.zeros((0, c))
    if k and spec.instance_spread > 0:
        delta = rng.standard_normal((k, c)) * (spec.instance_spread / np.sqrt(c - 1))
        delta[:, 0] = 0.0
        inst = inst + delta
    if k and spec.nonnegative:
        inst = np.abs(inst)
    if k:
        inst /= np.linalg.norm(inst, axis=1, keepdims=True)

    background = rng.standard_normal((h * w, c))
    background[:, 0] = 0.0
    background *= spec.background_scale / np.linalg.norm(background, axis=1, keepdims=True)

    photo = background.copy()
    sketch = np.zeros((h * w, c))
    photo_owner = np.full(h * w, -1)
    sketch_owner = np.full(h * w, -1)
    for idx, obj in enumerate(spec.objects):
        cells = footprint(obj.cell, obj.radius, spec.grid)
        photo[cells] = inst[idx]
        photo_owner[cells] = idx

        dr, dc = rng.integers(-spec.jitter, spec.jitter + 1, size=2) if spec.jitter else (0, 0)
        moved = (int(np.clip(obj.cell[0] + dr, 0, h - 1)), int(np.clip(obj.cell[1] + dc, 0, w - 1)))
        cells = footprint(moved, obj.radius, spec.grid)
        sketch[cells] = inst[idx]
        sketch_owner[cells] = idx

    occupied = sketch_owner >= 0
    if spec.noise_sigma > 0:
        noise = rng.standard_normal((h * w, c)) * (spec.noise_sigma / np.sqrt(c - 1))
        noise[:, 0] = 0.0
        sketch[occupied] += noise[occupied]
    photo_cells = [tuple(np.flatnonzero(photo_owner == i).tolist()) for i in range(k)]
    sketch_cells = [tuple(np.flatnonzero(sketch_owner == i).tolist()) for i in range(k)]

    # overlapping footprints: the later object owns the cell
    truth = GroundTruth(tuple(photo_cells), tuple(sketch_cells), inst, ~occupied)
    return (FeatureSet(h, w, c, photo), FeatureSet(h, w, c, sketch), truth)


def empty_fraction(fs: FeatureSet, threshold: float = 1e-6) -> float:
    """Fraction of cells whose feature norm is below ``threshold``."""
    return float(np.mean(np.linalg.norm(fs.data, axis=1) < threshold))


def mask_objects(sketch: FeatureSet, truth: GroundTruth, p_mask: float,
                 seed: int) -> tuple[FeatureSet, MaskRecord]:
    """Zero the sketch footprint of ``round(p_mask * K)`` objects chosen uniformly at random."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must lie in [0, 1]")
    k = truth.num_objects
    count = int(np.floor(p_mask * k + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(k, size=count, replace=False) if count else np.array([], dtype=int)
    record = MaskRecord(frozenset(int(i) for i in chosen), p_mask, seed)
    return apply_mask(sketch, truth, record), record


def apply_mask(sketch: FeatureSet, truth: GroundTruth, record: MaskRecord) -> FeatureSet:
    if not record.masked_object_indices:
        return sketch
    data = sketch.data.copy()
    for i in record.masked_object_indices:
        data[list(truth.sketch_cells[i])] = 0.0
    return sketch.with_data(data)


def random_scene(rng: np.random.Generator, grid: tuple[int, int], channels: int, num_classes: int,
                 num_objects: int, noise_sigma: float = 0.0, radius: int = 0, **kwargs) -> SceneSpec:
    """Scene with ``num_objects`` objects on distinct cells and random classes."""
    h, w = grid
    if num_objects > h * w:
        raise ValueError("more objects than grid cells")
    cells = rng.choice(h * w, size=num_objects, replace=False)
    classes = rng.integers(0, num_classes, size=num_objects)
    objects = tuple(SceneObject(int(k), (int(c) // w, int(c) % w), radius) for c, k in zip(cells, classes))
    empty = 1.0 - num_objects * (2 * radius + 1) ** 2 / (h * w)
    return SceneSpec(grid, channels, num_classes, objects, noise_sigma,
                     float(min(1.0, max(0.0, empty))), **kwargs)


# -- config ---------------------------------------------------------------------

_SCENE_KEYS = {"h", "w", "c", "num_classes", "objects", "noise_sigma", "empty_fraction_target",
               "jitter", "instance_spread", "background_scale", "nonnegative"}


def parse_scene_config(text: str, source: str = "<config>") -> SceneSpec:
    """Read a ``[scene]`` section; ``objects`` is ``class:row:col[:radius]`` items separated by spaces or commas."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from exc
    if not cp.has_section("scene"):
        raise ValueError(f"{source}: missing [scene] section")
    sec = cp["scene"]
    unknown = set(sec) - _SCENE_KEYS
    if unknown:
        raise ValueError(f"{source}: [scene] unknown key(s): {', '.join(sorted(unknown))}")
    for key in ("h", "w", "c", "num_classes"):
        if key not in sec:
            raise ValueError(f"{source}: [scene] missing key {key!r}")
    try:
        objects = []
        for item in sec.get("objects", "").replace(",", " ").split():
            parts = [int(t) for t in item.split(":")]
            if len(parts) not in (3, 4):
                raise ValueError(f"bad object {item!r}, expected class:row:col[:radius]")
            objects.append(SceneObject(parts[0], (parts[1], parts[2]), parts[3] if len(parts) == 4 else 0))
        extra = {}
        if "nonnegative" in sec:
            extra["nonnegative"] = sec.getboolean("nonnegative")
        for key, conv in (("jitter", int), ("instance_spread", float), ("background_scale", float),
                          ("empty_fraction_target", float)):
            if key in sec:
                extra[key] = conv(sec[key])
        return SceneSpec((int(sec["h"]), int(sec["w"])), int(sec["c"]), int(sec["num_classes"]),
                         tuple(objects), float(sec.get("noise_sigma", "0")), **extra)
    except ValueError as exc:
        raise ValueError(f"{source}: [scene] {exc}") from exc


def load_scene_config(path: str | Path) -> SceneSpec:
    return parse_scene_config(Path(path).read_text(), str(path))


def without_jitter(spec: SceneSpec) -> SceneSpec:
    return replace(spec, jitter=0)
