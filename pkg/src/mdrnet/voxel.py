"""Binary voxel occupancy grids: binvox I/O, synthetic shapes, datasets.

Cell ordering follows the binvox convention: x-major with y fastest,
flat index = x*dy*dz + z*dy + y. Other modules address cells as
(x, y, z) through VoxelGrid accessors, never through raw indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BinvoxError(ValueError):
    """Malformed binvox stream."""


class DatasetError(ValueError):
    """Inconsistent dataset, manifest, or split."""


SYNTHETIC_CLASSES = ("sphere", "box", "cross", "pyramid")
GRID_SIZE = 30


@dataclass(frozen=True)
class VoxelGrid:
    """Dense binary occupancy over a (dx, dy, dz) lattice."""

    dims: tuple
    occupancy: np.ndarray  # uint8, flat, x-major / y-fastest

    def __post_init__(self):
        dx, dy, dz = self.dims
        if dx <= 0 or dy <= 0 or dz <= 0:
            raise ValueError("grid dimensions must be positive")
        occ = np.asarray(self.occupancy, dtype=np.uint8)
        if occ.shape != (dx * dy * dz,):
            raise ValueError(
                f"occupancy length {occ.shape} != dx*dy*dz = {dx * dy * dz}"
            )
        if not np.isin(occ, (0, 1)).all():
            raise ValueError("occupancy cells must be 0 or 1")
        object.__setattr__(self, "occupancy", occ)
        occ.setflags(write=False)

    @classmethod
    def from_array(cls, arr):
        """Build from a bool/int array indexed [x, y, z]."""
        arr = np.asarray(arr)
        dx, dy, dz = arr.shape
        flat = np.ascontiguousarray(arr.transpose(0, 2, 1)).reshape(-1)
        return cls((dx, dy, dz), flat.astype(np.uint8))

    def to_array(self):
        """Dense occupancy indexed [x, y, z]."""
        dx, dy, dz = self.dims
        return self.occupancy.reshape(dx, dz, dy).transpose(0, 2, 1)

    def get(self, x, y, z):
        dx, dy, dz = self.dims
        return int(self.occupancy[x * dy * dz + z * dy + y])

    def __eq__(self, other):
        return (
            isinstance(other, VoxelGrid)
            and self.dims == other.dims
            and np.array_equal(self.occupancy, other.occupancy)
        )


@dataclass(frozen=True)
class LabeledShape:
    """A voxel grid with its 1-based class label and identifier."""

    grid: VoxelGrid
    label: int
    class_name: str
    shape_id: str


@dataclass
class ShapeDataset:
    classes: list
    shapes: list
    split: dict  # shape_id -> "train" | "test"

    def __post_init__(self):
        n = len(self.classes)
        for s in self.shapes:
            if not 1 <= s.label <= n:
                raise DatasetError(f"label {s.label} outside [1, {n}]")
            if s.shape_id not in self.split:
                raise DatasetError(f"shape {s.shape_id} missing from split")
        if len(self.split) != len(self.shapes):
            raise DatasetError("split does not cover shapes exactly")

    def subset(self, part):
        return [s for s in self.shapes if self.split[s.shape_id] == part]


def count_occupied(grid):
    return int(grid.occupancy.sum())


# ---------------------------------------------------------------------------
# binvox format


def load_binvox(data: bytes) -> VoxelGrid:
    """Decode a binvox byte stream (RLE pairs after the `data` line)."""
    nl = data.find(b"\n")
    if nl < 0 or data[:nl].strip() != b"#binvox 1":
        raise BinvoxError("missing '#binvox 1' header")
    pos = nl + 1
    dims = None
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise BinvoxError("truncated header")
        line = data[pos:nl].strip()
        pos = nl + 1
        parts = line.split()
        if not parts:
            continue
        if parts[0] == b"dim":
            if len(parts) != 4:
                raise BinvoxError("malformed dim line")
            try:
                dims = tuple(int(p) for p in parts[1:])
            except ValueError as e:
                raise BinvoxError("non-integer dim") from e
        elif parts[0] in (b"translate", b"scale"):
            continue  # parsed and discarded
        elif parts[0] == b"data":
            break
        else:
            raise BinvoxError(f"unexpected header line {line!r}")
    if dims is None:
        raise BinvoxError("missing dim line")
    total = dims[0] * dims[1] * dims[2]
    rle = np.frombuffer(data[pos:], dtype=np.uint8)
    if rle.size % 2 != 0:
        raise BinvoxError("odd RLE payload length")
    values = rle[0::2]
    counts = rle[1::2].astype(np.int64)
    if not np.isin(values, (0, 1)).all():
        raise BinvoxError("RLE value octet not in {0, 1}")
    if (counts < 1).any():
        raise BinvoxError("RLE count octet out of [1, 255]")
    if int(counts.sum()) != total:
        raise BinvoxError(
            f"RLE decodes to {int(counts.sum())} cells, expected {total}"
        )
    flat = np.repeat(values, counts)
    return VoxelGrid(dims, flat)


def save_binvox(grid: VoxelGrid) -> bytes:
    """Canonical binvox encoding: maximal runs, capped at 255."""
    dx, dy, dz = grid.dims
    header = (
        f"#binvox 1\ndim {dx} {dy} {dz}\ntranslate 0 0 0\nscale 1\ndata\n"
    ).encode("ascii")
    occ = grid.occupancy
    boundaries = np.flatnonzero(np.diff(occ)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [occ.size]))
    out = bytearray(header)
    for s, e in zip(starts, ends):
        value = int(occ[s])
        run = int(e - s)
        while run > 0:
            chunk = min(run, 255)
            out.append(value)
            out.append(chunk)
            run -= chunk
    return bytes(out)


# ---------------------------------------------------------------------------
# synthetic shapes


def _rng_for(class_name, seed):
    return np.random.default_rng(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, SYNTHETIC_CLASSES.index(class_name)]
    )


def generate_synthetic(class_name, seed):
    """Deterministic 30^3 test shape for the given class and seed."""
    if class_name not in SYNTHETIC_CLASSES:
        raise ValueError(f"unknown synthetic class {class_name!r}")
    rng = _rng_for(class_name, seed)
    n = GRID_SIZE
    arr = np.zeros((n, n, n), dtype=np.uint8)
    coords = np.arange(n)
    if class_name == "sphere":
        radius = rng.uniform(6.0, 11.0)
        center = (n - 1) / 2.0 + rng.uniform(-3.0, 3.0, size=3)
        dist2 = (
            (coords[:, None, None] - center[0]) ** 2
            + (coords[None, :, None] - center[1]) ** 2
            + (coords[None, None, :] - center[2]) ** 2
        )
        arr[dist2 <= radius**2] = 1
    elif class_name == "box":
        edges = rng.integers(10, 23, size=3)
        origin = [int(rng.integers(0, n - e + 1)) for e in edges]
        arr[
            origin[0] : origin[0] + edges[0],
            origin[1] : origin[1] + edges[1],
            origin[2] : origin[2] + edges[2],
        ] = 1
    elif class_name == "cross":
        center = n // 2 + rng.integers(-3, 4, size=3)
        half = 3  # 6x6 bar cross-section
        lo = [max(0, c - half) for c in center]
        hi = [min(n, c + half) for c in center]
        arr[:, lo[1] : hi[1], lo[2] : hi[2]] = 1
        arr[lo[0] : hi[0], :, lo[2] : hi[2]] = 1
        arr[lo[0] : hi[0], lo[1] : hi[1], :] = 1
    else:  # pyramid
        base = int(rng.integers(14, 25))
        cx = n // 2 + int(rng.integers(-2, 3))
        cy = n // 2 + int(rng.integers(-2, 3))
        z0 = int(rng.integers(0, 5))
        width = base
        z = z0
        while width >= 1 and z < n:
            half_lo = width // 2
            half_hi = width - half_lo
            arr[
                max(0, cx - half_lo) : min(n, cx + half_hi),
                max(0, cy - half_lo) : min(n, cy + half_hi),
                z,
            ] = 1
            width -= 2
            z += 1
    return VoxelGrid.from_array(arr)


# ---------------------------------------------------------------------------
# dataset manifests


def train_test_counts(per_class):
    """Deterministic 75/25 split sizes; at least one test shape per class."""
    if per_class < 2:
        raise DatasetError("per-class count must be >= 2 to split")
    n_test = max(1, per_class // 4)
    return per_class - n_test, n_test


def build_synthetic_dataset(classes, per_class, seed):
    """In-memory labeled dataset with a 75/25 split by per-class index."""
    for c in classes:
        if c not in SYNTHETIC_CLASSES:
            raise DatasetError(f"unknown synthetic class {c!r}")
    n_train, _ = train_test_counts(per_class)
    shapes = []
    split = {}
    for label, cname in enumerate(classes, start=1):
        for i in range(per_class):
            sid = f"{cname}_{i:04d}"
            grid = generate_synthetic(cname, seed * 100003 + i)
            shapes.append(LabeledShape(grid, label, cname, sid))
            split[sid] = "train" if i < n_train else "test"
    return ShapeDataset(list(classes), shapes, split)


def write_dataset(dataset, out_dir):
    """Write binvox files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for shape in dataset.shapes:
        rel = f"{shape.shape_id}.binvox"
        (out_dir / rel).write_bytes(save_binvox(shape.grid))
        lines.append(f"{rel}\t{shape.class_name}\t{dataset.split[shape.shape_id]}")
    manifest = out_dir / "manifest.tsv"
    tmp = manifest.with_suffix(".tsv.tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.rename(manifest)
    return manifest


def load_dataset(manifest_path):
    """Load a dataset from a manifest of `path<TAB>class<TAB>train|test` lines."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    classes = []
    shapes = []
    split = {}
    for raw in manifest_path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("train", "test"):
            raise DatasetError(f"bad manifest line {raw!r}")
        rel, cname, part = parts
        if cname not in classes:
            classes.append(cname)
        grid = load_binvox((base / rel).read_bytes())
        sid = rel[:-len(".binvox")] if rel.endswith(".binvox") else rel
        shapes.append(LabeledShape(grid, classes.index(cname) + 1, cname, sid))
        split[sid] = part
    if not shapes:
        raise DatasetError("empty manifest")
    return ShapeDataset(classes, shapes, split)
