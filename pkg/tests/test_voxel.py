import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdrnet import voxel
from mdrnet.voxel import (
    BinvoxError,
    DatasetError,
    VoxelGrid,
    count_occupied,
    generate_synthetic,
    load_binvox,
    save_binvox,
)


def random_grid(rng, dim=30, p=0.5):
    return VoxelGrid.from_array(rng.random((dim, dim, dim)) < p)


def encode(pairs, dims=(30, 30, 30)):
    header = f"#binvox 1\ndim {dims[0]} {dims[1]} {dims[2]}\ndata\n".encode()
    return header + bytes(itertools.chain.from_iterable(pairs))


class TestLoadBinvox:
    def test_all_empty_decode(self):
        pairs = [(0, 255)] * 105 + [(0, 225)]
        grid = load_binvox(encode(pairs))
        assert grid.dims == (30, 30, 30)
        assert count_occupied(grid) == 0

    def test_leading_run_of_255(self):
        grid = load_binvox(encode([(1, 255)] + [(0, 255)] * 104 + [(0, 225)]))
        assert count_occupied(grid) == 255
        assert grid.occupancy[:255].all() and not grid.occupancy[255:].any()

    def test_translate_scale_ignored(self):
        data = (
            b"#binvox 1\ndim 2 2 2\ntranslate 1 2 3\nscale 0.5\ndata\n"
            + bytes([1, 8])
        )
        assert count_occupied(load_binvox(data)) == 8

    def test_bad_header(self):
        with pytest.raises(BinvoxError):
            load_binvox(b"#voxels 1\ndim 2 2 2\ndata\n" + bytes([0, 8]))

    def test_wrong_cell_count(self):
        with pytest.raises(BinvoxError):
            load_binvox(b"#binvox 1\ndim 2 2 2\ndata\n" + bytes([0, 7]))

    def test_bad_value_octet(self):
        with pytest.raises(BinvoxError):
            load_binvox(b"#binvox 1\ndim 2 2 2\ndata\n" + bytes([2, 8]))


class TestSaveBinvox:
    def test_empty_grid_runs(self):
        data = save_binvox(VoxelGrid((30, 30, 30), np.zeros(27000, dtype=np.uint8)))
        payload = data[data.index(b"data\n") + 5 :]
        pairs = [(payload[i], payload[i + 1]) for i in range(0, len(payload), 2)]
        assert pairs == [(0, 255)] * 105 + [(0, 225)]

    def test_full_grid_runs(self):
        data = save_binvox(VoxelGrid((30, 30, 30), np.ones(27000, dtype=np.uint8)))
        payload = data[data.index(b"data\n") + 5 :]
        pairs = [(payload[i], payload[i + 1]) for i in range(0, len(payload), 2)]
        assert pairs == [(1, 255)] * 105 + [(1, 225)]

    def test_single_voxel_at_origin(self):
        occ = np.zeros(27000, dtype=np.uint8)
        occ[0] = 1
        payload = save_binvox(VoxelGrid((30, 30, 30), occ))
        payload = payload[payload.index(b"data\n") + 5 :]
        assert payload[:2] == bytes([1, 1])
        zero_runs = payload[2:]
        counts = [zero_runs[i + 1] for i in range(0, len(zero_runs), 2)]
        assert all(zero_runs[i] == 0 for i in range(0, len(zero_runs), 2))
        assert sum(counts) == 26999

    def test_round_trip_50_random_grids(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            g = random_grid(rng)
            stream = save_binvox(g)
            g2 = load_binvox(stream)
            assert g2 == g
            assert save_binvox(g2) == stream

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, seed):
        g = random_grid(np.random.default_rng(seed), dim=6, p=0.4)
        assert load_binvox(save_binvox(g)) == g


class TestCellOrdering:
    def test_index_is_x_major_y_fastest(self):
        arr = np.zeros((3, 4, 5), dtype=np.uint8)
        arr[1, 2, 3] = 1
        g = VoxelGrid.from_array(arr)
        # index = x*dy*dz + z*dy + y
        assert g.occupancy[1 * 4 * 5 + 3 * 4 + 2] == 1
        assert g.get(1, 2, 3) == 1
        assert np.array_equal(g.to_array(), arr)


class TestGenerateSynthetic:
    def test_deterministic(self):
        for cname in voxel.SYNTHETIC_CLASSES:
            assert generate_synthetic(cname, 42) == generate_synthetic(cname, 42)

    def test_unknown_class(self):
        with pytest.raises(ValueError):
            generate_synthetic("torus", 0)

    def test_box_count_is_edge_product(self):
        for seed in range(10):
            g = generate_synthetic("box", seed)
            arr = g.to_array()
            xs, ys, zs = np.nonzero(arr)
            edges = [np.ptp(xs) + 1, np.ptp(ys) + 1, np.ptp(zs) + 1]
            assert count_occupied(g) == edges[0] * edges[1] * edges[2]
            # the occupied region really is one solid cuboid
            assert arr[xs.min() : xs.max() + 1, ys.min() : ys.max() + 1, zs.min() : zs.max() + 1].all()

    def test_cross_symmetry_when_centered(self):
        # find a seed whose jittered center lands exactly at the midpoint
        centered_seed = None
        for seed in range(2000):
            rng = voxel._rng_for("cross", seed)
            if (rng.integers(-3, 4, size=3) == 0).all():
                centered_seed = seed
                break
        assert centered_seed is not None
        arr = generate_synthetic("cross", centered_seed).to_array()
        for perm in itertools.permutations(range(3)):
            assert np.array_equal(arr, arr.transpose(perm))

    def test_sphere_occupancy_plausible(self):
        g = generate_synthetic("sphere", 7)
        n = count_occupied(g)
        # solid ball of radius 6..11, possibly clipped by the grid
        assert 0 < n <= 4.0 / 3.0 * np.pi * 11.0**3


class TestCountOccupied:
    def test_empty_and_full(self):
        assert count_occupied(VoxelGrid((30, 30, 30), np.zeros(27000, dtype=np.uint8))) == 0
        assert count_occupied(VoxelGrid((30, 30, 30), np.ones(27000, dtype=np.uint8))) == 27000

    def test_matches_triple_loop(self):
        g = random_grid(np.random.default_rng(3), dim=8)
        total = 0
        for x in range(8):
            for y in range(8):
                for z in range(8):
                    total += g.get(x, y, z)
        assert count_occupied(g) == total


class TestDataset:
    def test_split_counts(self):
        ds = voxel.build_synthetic_dataset(["sphere", "box"], 50, 1)
        assert sum(1 for p in ds.split.values() if p == "train") == 76
        assert sum(1 for p in ds.split.values() if p == "test") == 24

    def test_per_class_one_rejected(self):
        with pytest.raises(DatasetError):
            voxel.build_synthetic_dataset(["sphere"], 1, 0)

    def test_write_load_round_trip(self, tmp_path):
        ds = voxel.build_synthetic_dataset(["cross", "pyramid"], 3, 5)
        manifest = voxel.write_dataset(ds, tmp_path)
        loaded = voxel.load_dataset(manifest)
        assert loaded.classes == ds.classes
        assert loaded.split == ds.split
        for a, b in zip(loaded.shapes, ds.shapes):
            assert a.grid == b.grid and a.label == b.label

    def test_bad_manifest_line(self, tmp_path):
        p = tmp_path / "manifest.tsv"
        p.write_text("foo.binvox\tsphere\tvalidation\n")
        with pytest.raises(DatasetError):
            voxel.load_dataset(p)

    def test_invalid_grid_rejected(self):
        with pytest.raises(ValueError):
            VoxelGrid((2, 2, 2), np.zeros(7, dtype=np.uint8))
        with pytest.raises(ValueError):
            VoxelGrid((2, 2, 2), np.full(8, 3, dtype=np.uint8))
