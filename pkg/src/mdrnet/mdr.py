"""Dense slice sequences: pack a voxel grid into 3k 2D occupancy-sum slices.

The grid is cut into k equal-thickness segments along each axis (z, then
x, then y); each segment is summed along its axis into a 2D integer
slice. Segment ranges are half-open [i*n, (i+1)*n) so the k slices of an
axis partition the grid exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .voxel import VoxelGrid

AXIS_ORDER = ("z", "x", "y")


class MdrError(ValueError):
    """Invalid slicing parameter or malformed sequence."""


@dataclass(frozen=True)
class MdrSequence:
    """3k integer slices, k per axis in z, x, y order."""

    k: int
    n: int  # segment thickness along the sliced axis
    slices: np.ndarray  # (3k, H, W) int64

    def __post_init__(self):
        sl = np.asarray(self.slices, dtype=np.int64)
        if sl.ndim != 3 or sl.shape[0] != 3 * self.k:
            raise MdrError(f"expected {3 * self.k} slices, got shape {sl.shape}")
        if sl.min(initial=0) < 0 or sl.max(initial=0) > self.n:
            raise MdrError(f"slice values must lie in [0, {self.n}]")
        object.__setattr__(self, "slices", sl)
        sl.setflags(write=False)


@dataclass(frozen=True)
class NormalizedMdr:
    """MdrSequence scaled by 1/n so cells lie in [0, 1]."""

    k: int
    n: int
    slices: np.ndarray  # (3k, H, W) float64

    def __post_init__(self):
        sl = np.asarray(self.slices, dtype=np.float64)
        if sl.min(initial=0.0) < 0.0 or sl.max(initial=0.0) > 1.0:
            raise MdrError("normalized cells must lie in [0, 1]")
        object.__setattr__(self, "slices", sl)
        sl.setflags(write=False)


def valid_slice_counts(dim):
    return [k for k in range(1, dim + 1) if dim % k == 0]


def compute_mdr(grid: VoxelGrid, k: int) -> MdrSequence:
    """Sum k half-open segments of the grid along each of z, x, y."""
    dx, dy, dz = grid.dims
    if k <= 0:
        raise MdrError("k must be positive")
    for d in grid.dims:
        if d % k != 0:
            raise MdrError(
                f"k={k} does not divide dimension {d}; valid: {valid_slice_counts(d)}"
            )
    arr = grid.to_array().astype(np.int64)  # [x, y, z]
    n = dz // k
    slices = []
    for i in range(k):  # z segments -> rows x, cols y
        slices.append(arr[:, :, i * n : (i + 1) * n].sum(axis=2))
    n_x = dx // k
    for i in range(k):  # x segments -> rows y, cols z
        slices.append(arr[i * n_x : (i + 1) * n_x].sum(axis=0))
    n_y = dy // k
    for i in range(k):  # y segments -> rows x, cols z
        slices.append(arr[:, i * n_y : (i + 1) * n_y, :].sum(axis=1))
    return MdrSequence(k=k, n=n, slices=np.stack(slices))


def normalize_mdr(seq: MdrSequence) -> NormalizedMdr:
    return NormalizedMdr(k=seq.k, n=seq.n, slices=seq.slices / seq.n)


def slice_name(seq: MdrSequence, index: int) -> str:
    axis = AXIS_ORDER[index // seq.k]
    return f"{axis}{index % seq.k}"


def export_slice_pgm(seq: MdrSequence, index: int) -> bytes:
    """Binary PGM (P5) of one slice, scaled so a full column maps to 255."""
    if not 0 <= index < 3 * seq.k:
        raise MdrError(f"slice index {index} out of [0, {3 * seq.k})")
    sl = seq.slices[index]
    pixels = np.rint(255.0 * sl / seq.n).astype(np.uint8)
    h, w = sl.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def export_mdr_text(seq: MdrSequence) -> str:
    """Flat text form: header line, then one 900-integer line per slice."""
    dim = seq.slices.shape[1]
    lines = [f"MDR k={seq.k} dim={dim}"]
    for sl in seq.slices:
        lines.append(" ".join(str(int(v)) for v in sl.reshape(-1)))
    return "\n".join(lines) + "\n"
