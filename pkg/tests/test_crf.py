import numpy as np
import pytest

from crfseg import crf
from crfseg.errors import InvalidArgumentError, SolverConvergenceError
from crfseg.pooling import RegionAffinity


def make_affinity(n, edges, values):
    return RegionAffinity(n, np.asarray(edges, dtype=np.int64), np.asarray(values, float))


def random_grid_affinity(rng, n, lam_unused=None):
    """Planar-like graph: a path plus longer-range chords."""
    edges = []
    for i in range(n):
        for j in (i + 1, i + int(np.sqrt(n))):
            if j < n and rng.random() < 0.85:
                edges.append((i, j))
    edges = sorted(set(edges))
    return make_affinity(n, edges, rng.uniform(0, 1, len(edges)))


HAND = make_affinity(2, [[0, 1]], [1.0])


class TestAssemble:
    def test_empty_graph_is_identity(self):
        system = crf.assemble_system(make_affinity(3, np.empty((0, 2), np.int64), []), 1.0)
        assert np.allclose(system.matrix.toarray(), np.eye(3))

    def test_hand_two_node(self):
        system = crf.assemble_system(HAND, 1.0)
        assert system.matrix.toarray().tolist() == [[2.0, -1.0], [-1.0, 2.0]]

    def test_row_sums_equal_lam(self):
        rng = np.random.default_rng(0)
        for lam in (0.1, 1.0, 10.0):
            system = crf.assemble_system(random_grid_affinity(rng, 20), lam)
            assert np.allclose(system.matrix.toarray().sum(axis=1), lam)

    def test_strict_diagonal_dominance(self):
        rng = np.random.default_rng(1)
        a = crf.assemble_system(random_grid_affinity(rng, 25), 0.5).matrix.toarray()
        off = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
        assert np.all(np.diag(a) > off - 1e-12)
        assert np.all(np.diag(a) - off >= 0.5 - 1e-12)

    def test_invalid_lam_rejected(self):
        for lam in (0.0, -1.0):
            with pytest.raises(InvalidArgumentError):
                crf.assemble_system(HAND, lam)

    def test_negative_affinity_rejected(self):
        with pytest.raises(InvalidArgumentError):
            crf.assemble_system(make_affinity(2, [[0, 1]], [-0.5]), 1.0)


class TestGaussSeidel:
    def test_identity_system_one_sweep(self):
        system = crf.assemble_system(make_affinity(4, np.empty((0, 2), np.int64), []), 1.0)
        b = np.array([3.0, -1.0, 0.5, 2.0])
        res = crf.gauss_seidel_solve(system, b)
        assert res.converged
        assert res.iterations <= 1
        assert np.allclose(res.x, b)

    def test_hand_inverse(self):
        system = crf.assemble_system(HAND, 1.0, tolerance=1e-14)
        res = crf.gauss_seidel_solve(system, np.array([3.0, 0.0]))
        assert res.converged
        assert np.allclose(res.x, [2.0, 1.0], atol=1e-12)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(2)
        for n in (5, 50):
            for lam in (0.1, 1.0, 10.0):
                system = crf.assemble_system(
                    random_grid_affinity(rng, n), lam, tolerance=1e-10
                )
                b = rng.standard_normal(n)
                res = crf.gauss_seidel_solve(system, b)
                assert res.converged
                direct = np.linalg.solve(system.matrix.toarray(), b)
                assert np.abs(res.x - direct).max() <= 1e-6

    def test_residual_non_increasing(self):
        rng = np.random.default_rng(3)
        system = crf.assemble_system(random_grid_affinity(rng, 40), 0.1, tolerance=1e-10)
        res = crf.gauss_seidel_solve(system, rng.standard_normal(40))
        hist = np.array(res.residual_history)
        assert np.all(np.diff(hist) <= hist[:-1] * 1e-12)

    def test_non_convergence_is_explicit(self):
        rng = np.random.default_rng(4)
        system = crf.assemble_system(
            random_grid_affinity(rng, 30), 0.01, tolerance=1e-14, max_sweeps=2
        )
        res = crf.gauss_seidel_solve(system, rng.standard_normal(30))
        assert not res.converged
        assert res.iterations == 2

    def test_bad_shapes_rejected(self):
        system = crf.assemble_system(HAND, 1.0)
        with pytest.raises(InvalidArgumentError):
            crf.gauss_seidel_solve(system, np.zeros(3))


class TestForward:
    def test_identity_when_no_affinity(self):
        rng = np.random.default_rng(5)
        system = crf.assemble_system(make_affinity(6, np.empty((0, 2), np.int64), []), 1.0)
        z_s = rng.standard_normal((6, 3))
        out = crf.ccrf_forward(z_s, system)
        assert np.abs(out.z_c - z_s).max() <= 1e-12

    def test_hand_example_per_channel(self):
        system = crf.assemble_system(HAND, 1.0, tolerance=1e-14)
        z_s = np.array([[3.0, 6.0], [0.0, 0.0]])
        out = crf.ccrf_forward(z_s, system)
        assert np.allclose(out.z_c[:, 0], [2.0, 1.0], atol=1e-12)
        assert np.allclose(out.z_c[:, 1], [4.0, 2.0], atol=1e-12)

    def test_constant_input_is_fixed_point(self):
        rng = np.random.default_rng(6)
        system = crf.assemble_system(random_grid_affinity(rng, 12), 1.0)
        z_s = np.full((12, 2), 3.7)
        out = crf.ccrf_forward(z_s, system)
        assert np.abs(out.z_c - 3.7).max() <= 1e-10

    def test_nonconvergence_names_channel(self):
        rng = np.random.default_rng(7)
        system = crf.assemble_system(
            random_grid_affinity(rng, 30), 0.01, tolerance=1e-15, max_sweeps=1
        )
        with pytest.raises(SolverConvergenceError) as err:
            crf.ccrf_forward(rng.standard_normal((30, 2)), system)
        assert err.value.channel == 0

    def test_smoothing_contracts_variance(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            system = crf.assemble_system(random_grid_affinity(rng, 15), 1.0)
            z_s = rng.standard_normal((15, 2)) * 3
            z_c = crf.ccrf_forward(z_s, system).z_c
            assert np.all(z_c.var(axis=0) <= z_s.var(axis=0) + 1e-12)


class TestEnergy:
    def test_zero_at_identity_minimum(self):
        system = crf.assemble_system(make_affinity(2, np.empty((0, 2), np.int64), []), 1.0)
        z = np.array([[1.0], [2.0]])
        assert abs(crf.energy(z, z, system)) <= 1e-12

    def test_hand_value(self):
        system = crf.assemble_system(HAND, 1.0)
        value = crf.energy(np.array([[2.0], [1.0]]), np.array([[3.0], [0.0]]), system)
        assert np.isclose(value, 1.5)

    def test_minimizer_beats_perturbations(self):
        rng = np.random.default_rng(9)
        system = crf.assemble_system(random_grid_affinity(rng, 10), 1.0, tolerance=1e-12)
        z_s = rng.standard_normal((10, 2))
        z_c = crf.ccrf_forward(z_s, system).z_c
        base = crf.energy(z_c, z_s, system)
        for _ in range(100):
            perturbed = z_c + rng.standard_normal(z_c.shape) * rng.uniform(1e-3, 1.0)
            assert crf.energy(perturbed, z_s, system) >= base


class TestBackward:
    def test_zs_identity_system(self):
        system = crf.assemble_system(make_affinity(3, np.empty((0, 2), np.int64), []), 1.0)
        g = np.random.default_rng(10).standard_normal((3, 2))
        assert np.abs(crf.ccrf_backward_zs(g, system) - g).max() <= 1e-12

    def test_zs_hand_value(self):
        system = crf.assemble_system(HAND, 1.0, tolerance=1e-14)
        d_zs = crf.ccrf_backward_zs(np.array([[1.0], [0.0]]), system)
        assert np.allclose(d_zs.ravel(), [2 / 3, 1 / 3], atol=1e-12)

    def test_phi_outer_product_hand_value(self):
        d_zs = np.array([[2 / 3], [1 / 3]])
        z_c = np.array([[2.0], [1.0]])
        d_phi = crf.ccrf_backward_phi(d_zs, z_c, HAND.edges)
        assert np.allclose(d_phi.diag, [-4 / 3, -1 / 3])
        assert np.isclose(d_phi.off_pq[0], -2 / 3)
        assert np.isclose(d_phi.off_qp[0], -2 / 3)

    def test_phi_zero_gradient(self):
        d_phi = crf.ccrf_backward_phi(np.zeros((2, 1)), np.ones((2, 1)), HAND.edges)
        assert np.all(d_phi.diag == 0) and np.all(d_phi.off_pq == 0)

    def test_w_hand_value(self):
        d_phi = crf.PhiGradient(
            edges=HAND.edges,
            diag=np.array([-4 / 3, -1 / 3]),
            off_pq=np.array([-2 / 3]),
            off_qp=np.array([-2 / 3]),
        )
        assert np.allclose(crf.ccrf_backward_w(d_phi), [-1 / 3])

    def test_w_end_to_end_finite_differences(self):
        rng = np.random.default_rng(11)
        affinity = random_grid_affinity(rng, 8)
        lam = 1.0
        z_s = rng.standard_normal((8, 2))
        r = rng.standard_normal((8, 2))

        def loss(values):
            a = crf.assemble_system(
                RegionAffinity(8, affinity.edges, values), lam
            ).matrix.toarray()
            return float((np.linalg.solve(a, z_s) * r).sum())

        system = crf.assemble_system(affinity, lam, tolerance=1e-12)
        z_c = crf.ccrf_forward(z_s, system).z_c
        d_zs = crf.ccrf_backward_zs(r, system)
        d_w = crf.ccrf_backward_w(crf.ccrf_backward_phi(d_zs, z_c, affinity.edges))
        eps = 1e-5
        for e in range(affinity.edges.shape[0]):
            values = affinity.values.copy()
            values[e] += eps
            up = loss(values)
            values[e] -= 2 * eps
            down = loss(values)
            numeric = (up - down) / (2 * eps)
            assert abs(d_w[e] - numeric) / max(abs(numeric), 1e-6) <= 1e-4

    def test_laplacian_nullspace(self):
        rng = np.random.default_rng(12)
        affinity = random_grid_affinity(rng, 30)
        system = crf.assemble_system(affinity, 1.0)
        phi = system.matrix.toarray() - np.eye(30)
        ones = np.ones(30)
        bound = 1e-12 * 30 * max(affinity.values.max(), 1.0)
        assert np.abs(phi @ ones).max() <= bound
