"""Feature sets, global pooling and the cosine machinery shared by every metric."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PFS_MAGIC = b"PFS1"
_HEADER = struct.Struct("<4sIII")


class DimensionError(ValueError):
    """Raised when two feature sets (or a set and a matrix) disagree in shape."""


class FormatError(ValueError):
    """Raised when a PFS1 payload is malformed."""


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """A grid of local feature vectors stored row-major as an (h*w, c) matrix.

    Row ``i`` holds the feature of grid cell ``(i // width, i % width)``.
    The data array is copied on construction and made read-only.
    """

    height: int
    width: int
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise DimensionError(
                f"grid dimensions must be positive, got {self.height}x{self.width}x{self.channels}"
            )
        data = np.array(self.data, dtype=np.float64, copy=True)
        expected = (self.height * self.width, self.channels)
        if data.shape != expected:
            raise DimensionError(f"data has shape {data.shape}, expected {expected}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FeatureSet":
        """Build from an (h, w, c) array."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise DimensionError(f"expected an (h, w, c) array, got ndim={grid.ndim}")
        h, w, c = grid.shape
        return cls(h, w, c, grid.reshape(h * w, c))

    @property
    def size(self) -> int:
        return self.height * self.width

    def to_grid(self) -> np.ndarray:
        return self.data.reshape(self.height, self.width, self.channels)

    def with_data(self, data: np.ndarray) -> "FeatureSet":
        return FeatureSet(self.height, self.width, self.channels, data)

    def normalize(self) -> "FeatureSet":
        return self.with_data(normalize_rows(self.data))

    def __repr__(self) -> str:
        return f"FeatureSet({self.height}x{self.width}x{self.channels})"


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize each row; exactly-zero rows become (1, 0, ..., 0)."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0.0
    out = x / np.where(norms == 0.0, 1.0, norms)
    if np.any(zero):
        out[zero] = 0.0
        out[zero, 0] = 1.0
    return out


def flatten(grid: FeatureSet) -> list[np.ndarray]:
    return [row for row in grid.data]


def gap(fs: FeatureSet, normalized: bool = False) -> np.ndarray:
    """Global average pooling over all grid cells.

    With ``normalized=True`` the mean vector is scaled to unit length
    (a zero mean follows the same canonical-vector rule as local rows).
    """
    g = fs.data.mean(axis=0)
    if normalized:
        g = normalize_rows(g[None, :])[0]
    return g


def _check_channels(u: FeatureSet, v: FeatureSet) -> None:
    if u.channels != v.channels:
        raise DimensionError(f"channel mismatch: {u.channels} vs {v.channels}")


def pairwise_cost(u: FeatureSet, v: FeatureSet) -> np.ndarray:
    """Cosine transport cost ``1 - u_i . v_j`` for unit-norm rows."""
    _check_channels(u, v)
    return 1.0 - u.data @ v.data.T


def read_pfs(path: str | Path) -> FeatureSet:
    return decode_pfs(Path(path).read_bytes())


def write_pfs(path: str | Path, fs: FeatureSet) -> None:
    Path(path).write_bytes(encode_pfs(fs))


def encode_pfs(fs: FeatureSet) -> bytes:
    header = _HEADER.pack(PFS_MAGIC, fs.height, fs.width, fs.channels)
    return header + fs.data.astype("<f4").tobytes(order="C")


def decode_pfs(payload: bytes) -> FeatureSet:
    if len(payload) < _HEADER.size:
        raise FormatError("truncated PFS1 header")
    magic, h, w, c = _HEADER.unpack_from(payload)
    if magic != PFS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w * c
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    return FeatureSet(h, w, c, data.reshape(h * w, c))
