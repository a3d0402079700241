import numpy as np
import pytest

from crfseg.errors import FormatError, InvalidArgumentError
from crfseg.superpixels import (
    SuperpixelMap,
    boundary_overlay,
    build_graph,
    load_spmap,
    oversegment,
    save_spmap,
    to_color_image,
)


def flood_fill_components(mask):
    """Independent 4-connectivity check (plain BFS, no scipy)."""
    seen = np.zeros_like(mask, dtype=bool)
    comps = 0
    h, w = mask.shape
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        comps += 1
        stack = [(sy, sx)]
        seen[sy, sx] = True
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return comps


class TestOversegment:
    def test_constant_image_partition(self):
        img = np.full((8, 8, 1), 0.5)
        spmap = oversegment(img, 4)
        assert spmap.region_count == 4
        assert spmap.region_sizes().sum() == 64
        for rid in range(4):
            assert flood_fill_components(spmap.assignment == rid) == 1

    def test_two_tone_halves_follow_color(self):
        img = np.zeros((16, 16, 1))
        img[:, 8:] = 1.0
        spmap = oversegment(img, 2, compactness=40.0)
        assert spmap.region_count == 2
        # brute force: each region at least 95% one color
        for rid in range(2):
            vals = img[..., 0][spmap.assignment == rid]
            assert max((vals == 0).mean(), (vals == 1).mean()) >= 0.95

    def test_ids_dense_after_connectivity(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (24, 24, 3))
        for target in (2, 5, 16, 30):
            spmap = oversegment(img, target)
            ids = np.unique(spmap.assignment)
            assert ids[0] == 0 and ids[-1] == spmap.region_count - 1
            assert ids.size == spmap.region_count
            assert spmap.region_count >= target // 2
            assert spmap.region_count <= 2 * target

    def test_regions_connected_on_noisy_input(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0, 1, (32, 32, 3))
        spmap = oversegment(img, 20)
        spmap.validate()

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 1, (16, 16, 3))
        a = oversegment(img, 9).assignment
        b = oversegment(img, 9).assignment
        assert np.array_equal(a, b)

    def test_target_too_large_rejected(self):
        img = np.full((8, 8, 1), 0.5)
        with pytest.raises(InvalidArgumentError):
            oversegment(img, 32)

    def test_target_too_small_rejected(self):
        img = np.full((8, 8, 1), 0.5)
        with pytest.raises(InvalidArgumentError):
            oversegment(img, 1)

    def test_image_too_small_rejected(self):
        with pytest.raises(InvalidArgumentError):
            oversegment(np.zeros((4, 4, 1)), 2)

    def test_non_finite_rejected(self):
        img = np.full((8, 8, 1), 0.5)
        img[0, 0, 0] = np.nan
        with pytest.raises(InvalidArgumentError):
            oversegment(img, 4)


class TestBuildGraph:
    def test_two_halves_hand_enumeration(self):
        a = np.zeros((4, 4), np.int32)
        a[2:] = 1
        graph = build_graph(SuperpixelMap(a, 2))
        assert graph.edges.tolist() == [[0, 1]]
        assert graph.edge_pair_counts.tolist() == [4]
        hp, vp = graph.boundary_pairs(0, 1)
        assert hp.shape[0] == 0
        assert sorted(vp.tolist()) == [[1, 0], [1, 1], [1, 2], [1, 3]]

    def test_single_region_no_edges(self):
        graph = build_graph(SuperpixelMap(np.zeros((4, 4), np.int32), 1))
        assert graph.n_edges == 0

    def test_four_quadrants(self):
        a = np.array([[0, 1], [2, 3]], np.int32)
        graph = build_graph(SuperpixelMap(a, 4))
        assert graph.edges.tolist() == [[0, 1], [0, 2], [1, 3], [2, 3]]
        assert graph.edge_pair_counts.tolist() == [1, 1, 1, 1]

    def test_every_straddling_pair_in_exactly_one_edge(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(0, 1, (16, 16, 3))
        spmap = oversegment(img, 8)
        graph = build_graph(spmap)
        a = spmap.assignment
        n_h = int(np.sum(a[:, :-1] != a[:, 1:]))
        n_v = int(np.sum(a[:-1, :] != a[1:, :]))
        assert graph.h_pairs.shape[0] == n_h
        assert graph.v_pairs.shape[0] == n_v
        assert graph.edge_pair_counts.sum() == n_h + n_v
        # symmetry: querying either direction gives the same pairs
        p, q = graph.edges[0]
        hp1, vp1 = graph.boundary_pairs(p, q)
        hp2, vp2 = graph.boundary_pairs(q, p)
        assert np.array_equal(hp1, hp2) and np.array_equal(vp1, vp2)

    def test_region_sizes_match_assignment(self):
        rng = np.random.default_rng(7)
        img = rng.uniform(0, 1, (16, 16, 3))
        spmap = oversegment(img, 6)
        graph = build_graph(spmap)
        expected = [int((spmap.assignment == rid).sum()) for rid in range(spmap.region_count)]
        assert graph.region_sizes.tolist() == expected
        assert graph.region_sizes.sum() == 16 * 16


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        img = rng.uniform(0, 1, (16, 16, 3))
        spmap = oversegment(img, 8)
        path = tmp_path / "map.spx"
        save_spmap(spmap, path)
        loaded = load_spmap(path)
        assert loaded.region_count == spmap.region_count
        assert np.array_equal(loaded.assignment, spmap.assignment)

    def test_truncated_file_reports_offset(self, tmp_path):
        path = tmp_path / "map.spx"
        spmap = SuperpixelMap(np.zeros((8, 8), np.int32), 1)
        save_spmap(spmap, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:30])
        with pytest.raises(FormatError) as err:
            load_spmap(path)
        assert err.value.byte_offset is not None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "map.spx"
        path.write_bytes(b"JUNK" + b"\0" * 32)
        with pytest.raises(FormatError):
            load_spmap(path)

    def test_color_and_overlay_shapes(self):
        rng = np.random.default_rng(9)
        img = rng.uniform(0, 1, (16, 16, 3))
        spmap = oversegment(img, 6)
        color = to_color_image(spmap)
        overlay = boundary_overlay(img, spmap)
        assert color.shape == (16, 16, 3) and color.dtype == np.uint8
        assert overlay.shape == (16, 16, 3) and overlay.dtype == np.uint8
