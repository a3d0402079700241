import numpy as np
import pytest

from crfseg import pooling
from crfseg.errors import InvalidArgumentError
from crfseg.superpixels import SuperpixelMap, build_graph, oversegment


@pytest.fixture
def random_partition():
    rng = np.random.default_rng(10)
    img = rng.uniform(0, 1, (16, 16, 3))
    spmap = oversegment(img, 8)
    return spmap, build_graph(spmap)


class TestPoolUnary:
    def test_constant_field(self, random_partition):
        spmap, _ = random_partition
        z = np.full((16, 16, 2), 7.0)
        assert np.allclose(pooling.pool_unary(z, spmap), 7.0)

    def test_two_pixel_mean(self):
        a = np.zeros((1, 8), np.int32)
        a[0, :2] = 0
        a[0, 2:] = 1
        spmap = SuperpixelMap(a, 2)
        z = np.zeros((1, 8, 1))
        z[0, 0, 0], z[0, 1, 0] = 1.0, 3.0
        assert pooling.pool_unary(z, spmap)[0, 0] == 2.0

    def test_matches_brute_force(self, random_partition):
        spmap, _ = random_partition
        rng = np.random.default_rng(1)
        z = rng.standard_normal((16, 16, 3))
        z_s = pooling.pool_unary(z, spmap)
        for rid in range(spmap.region_count):
            mask = spmap.assignment == rid
            for c in range(3):
                assert np.isclose(z_s[rid, c], z[..., c][mask].mean(), atol=1e-12)

    def test_mass_conservation(self, random_partition):
        spmap, _ = random_partition
        rng = np.random.default_rng(2)
        z = rng.standard_normal((16, 16, 3))
        z_s = pooling.pool_unary(z, spmap)
        sizes = spmap.region_sizes()[:, None]
        assert np.allclose((z_s * sizes).sum(axis=0), z.sum(axis=(0, 1)))

    def test_idempotent_on_region_constant_fields(self, random_partition):
        # exact up to the rounding of a float mean of identical values
        spmap, _ = random_partition
        rng = np.random.default_rng(3)
        z_s = rng.standard_normal((spmap.region_count, 3))
        broadcast = z_s[spmap.assignment]
        pooled = pooling.pool_unary(broadcast, spmap)
        assert np.abs(pooled - z_s).max() <= 1e-13 * np.abs(z_s).max()

    def test_dim_mismatch_rejected(self, random_partition):
        spmap, _ = random_partition
        with pytest.raises(InvalidArgumentError):
            pooling.pool_unary(np.zeros((8, 8, 1)), spmap)


class TestPoolUnaryBackward:
    def test_global_mean_adjoint(self):
        spmap = SuperpixelMap(np.zeros((4, 4), np.int32), 1)
        grad = pooling.pool_unary_backward(np.ones((1, 1)), spmap)
        assert np.allclose(grad, 1.0 / 16)

    def test_singleton_regions_identity(self):
        a = np.arange(16, dtype=np.int32).reshape(4, 4)
        spmap = SuperpixelMap(a, 16)
        g = np.random.default_rng(4).standard_normal((16, 2))
        grad = pooling.pool_unary_backward(g, spmap)
        assert np.allclose(grad.reshape(16, 2), g)

    def test_finite_differences(self, random_partition):
        spmap, _ = random_partition
        rng = np.random.default_rng(5)
        z = rng.standard_normal((16, 16, 2))
        r = rng.standard_normal((spmap.region_count, 2))
        grad = pooling.pool_unary_backward(r, spmap)
        eps = 1e-5
        for f in rng.choice(z.size, size=30, replace=False):
            idx = np.unravel_index(f, z.shape)
            old = z[idx]
            z[idx] = old + eps
            up = float((pooling.pool_unary(z, spmap) * r).sum())
            z[idx] = old - eps
            down = float((pooling.pool_unary(z, spmap) * r).sum())
            z[idx] = old
            numeric = (up - down) / (2 * eps)
            assert abs(grad[idx] - numeric) / max(abs(numeric), 1e-6) < 1e-6

    def test_adjoint_identity(self, random_partition):
        spmap, _ = random_partition
        rng = np.random.default_rng(6)
        for _ in range(50):
            z = rng.standard_normal((16, 16, 2))
            g = rng.standard_normal((spmap.region_count, 2))
            lhs = float((pooling.pool_unary(z, spmap) * g).sum())
            rhs = float((z * pooling.pool_unary_backward(g, spmap)).sum())
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    def test_factorless_variant_broadcasts(self, random_partition):
        spmap, _ = random_partition
        g = np.ones((spmap.region_count, 1))
        raw = pooling.pool_unary_backward(g, spmap, averaged=False)
        assert np.all(raw == 1.0)
        scaled = pooling.pool_unary_backward(g, spmap, averaged=True)
        sizes = spmap.region_sizes()
        assert np.allclose(scaled[..., 0], (1.0 / sizes)[spmap.assignment])


class TestPoolPairwise:
    def test_constant_affinity(self, random_partition):
        _, graph = random_partition
        wph = np.full((16, 15), 0.4)
        wpv = np.full((15, 16), 0.4)
        w = pooling.pool_pairwise(wph, wpv, graph)
        assert np.allclose(w.values, 0.4)

    def test_hand_mean_over_boundary(self):
        a = np.zeros((4, 4), np.int32)
        a[2:] = 1
        graph = build_graph(SuperpixelMap(a, 2))
        wph = np.zeros((4, 3))
        wpv = np.zeros((3, 4))
        wpv[1] = [1.0, 2.0, 3.0, 4.0]  # the 4 straddling vertical pairs
        w = pooling.pool_pairwise(wph, wpv, graph)
        assert w.values.tolist() == [2.5]

    def test_support_is_adjacency(self, random_partition):
        _, graph = random_partition
        rng = np.random.default_rng(7)
        w = pooling.pool_pairwise(
            rng.uniform(0, 1, (16, 15)), rng.uniform(0, 1, (15, 16)), graph
        )
        assert np.array_equal(w.edges, graph.edges)
        dense = w.to_dense()
        assert np.allclose(dense, dense.T)
        for p in range(graph.n_regions):
            for q in range(p + 1, graph.n_regions):
                if graph.edge_index(p, q) < 0:
                    assert dense[p, q] == 0.0

    def test_dim_mismatch_rejected(self, random_partition):
        _, graph = random_partition
        with pytest.raises(InvalidArgumentError):
            pooling.pool_pairwise(np.zeros((16, 16)), np.zeros((15, 16)), graph)


class TestPoolPairwiseBackward:
    def test_even_split_over_pairs(self):
        a = np.zeros((4, 4), np.int32)
        a[2:] = 1
        graph = build_graph(SuperpixelMap(a, 2))
        dh, dv = pooling.pool_pairwise_backward(np.array([1.0]), graph)
        assert np.allclose(dv[1], 0.25)
        assert dv[0].tolist() == [0.0] * 4 and dv[2].tolist() == [0.0] * 4
        assert np.all(dh == 0.0)

    def test_interior_pairs_zero(self, random_partition):
        _, graph = random_partition
        rng = np.random.default_rng(8)
        dh, dv = pooling.pool_pairwise_backward(rng.standard_normal(graph.n_edges), graph)
        boundary_h = np.zeros_like(dh, dtype=bool)
        boundary_h[graph.h_pairs[:, 0], graph.h_pairs[:, 1]] = True
        assert np.all(dh[~boundary_h] == 0.0)

    def test_finite_differences(self, random_partition):
        _, graph = random_partition
        rng = np.random.default_rng(9)
        wph = rng.uniform(0, 1, (16, 15))
        wpv = rng.uniform(0, 1, (15, 16))
        r = rng.standard_normal(graph.n_edges)
        dh, dv = pooling.pool_pairwise_backward(r, graph)
        eps = 1e-5
        for arr, grad in ((wph, dh), (wpv, dv)):
            for f in rng.choice(arr.size, size=20, replace=False):
                idx = np.unravel_index(f, arr.shape)
                old = arr[idx]
                arr[idx] = old + eps
                up = float((pooling.pool_pairwise(wph, wpv, graph).values * r).sum())
                arr[idx] = old - eps
                down = float((pooling.pool_pairwise(wph, wpv, graph).values * r).sum())
                arr[idx] = old
                numeric = (up - down) / (2 * eps)
                assert abs(grad[idx] - numeric) <= 1e-6 * max(abs(numeric), 1.0)

    def test_adjoint_identity(self, random_partition):
        _, graph = random_partition
        rng = np.random.default_rng(10)
        for _ in range(50):
            wph = rng.standard_normal((16, 15))
            wpv = rng.standard_normal((15, 16))
            g = rng.standard_normal(graph.n_edges)
            lhs = float((pooling.pool_pairwise(wph, wpv, graph).values * g).sum())
            dh, dv = pooling.pool_pairwise_backward(g, graph)
            rhs = float((wph * dh).sum() + (wpv * dv).sum())
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)

    def test_edge_dump_format(self, random_partition, tmp_path):
        _, graph = random_partition
        rng = np.random.default_rng(11)
        w = pooling.pool_pairwise(
            rng.uniform(0, 1, (16, 15)), rng.uniform(0, 1, (15, 16)), graph
        )
        import io

        buf = io.StringIO()
        w.dump_edges(buf)
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) == graph.n_edges
        p, q, v = lines[0].split()
        assert int(p) < int(q)
        assert float(v) == w.values[0]
