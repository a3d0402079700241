"""Numerical verification suite: every backward pass against central
finite differences, the iterative solver against a dense direct solve,
and the hand-workable 2-node CRF system against its exact values.

All checks run at float64 on small seeded instances.  `run_all` can
corrupt a backward operation on purpose (``mutate``) to demonstrate the
suite actually catches such defects.
"""

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import crf, layers, networks, pipeline, pooling
from .networks import Architecture
from .superpixels import build_graph, oversegment

FD_STEP = 1e-5

MUTATIONS = ("crf-phi-sign", "crf-w-sign", "pairwise-pool-unscaled")


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: max_rel_err={self.error:.3e} threshold={self.threshold:.1e}"
        if self.detail:
            text += f"  [{self.detail}]"
        return text


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def fd_entry(f, array, index, eps=FD_STEP):
    """Central difference of scalar f w.r.t. one array entry (in place)."""
    old = array[index]
    array[index] = old + eps
    up = f()
    array[index] = old - eps
    down = f()
    array[index] = old
    return (up - down) / (2 * eps)


def _probe_indices(rng, arrays, count):
    """Pick `count` (array_key, multi_index) probes across a dict of arrays."""
    keys = sorted(arrays)
    sizes = np.array([arrays[k].size for k in keys])
    total = sizes.sum()
    flat = rng.choice(total, size=min(count, total), replace=False)
    probes = []
    for f in np.sort(flat):
        k = 0
        while f >= sizes[k]:
            f -= sizes[k]
            k += 1
        probes.append((keys[k], np.unravel_index(f, arrays[keys[k]].shape)))
    return probes


def _check_fd(name, loss_fn, arrays, grads, probes, threshold, eps=FD_STEP):
    worst = 0.0
    for key, index in probes:
        numeric = fd_entry(loss_fn, arrays[key], index, eps)
        worst = max(worst, rel_err(grads[key][index], numeric))
    return CheckResult(name, worst, threshold, worst <= threshold)


# ---------------------------------------------------------------------------
# primitive layers


def check_conv2d(rng):
    x = rng.standard_normal((5, 5, 2))
    f = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((5, 5, 3))
    loss = lambda: float((layers.conv2d(x, f, b, padding=1) * r).sum())
    dx, df, db = layers.conv2d_backward(r, x, f, padding=1)
    arrays = {"x": x, "f": f, "b": b}
    grads = {"x": dx, "f": df, "b": db}
    probes = _probe_indices(rng, arrays, 45)
    return _check_fd("conv2d_backward", loss, arrays, grads, probes, 1e-4)


def _gapped_field(rng, shape, min_gap=1e-3):
    """Random field whose 2x2 windows have a clear max (keeps FD valid)."""
    while True:
        x = rng.uniform(0.0, 1.0, size=shape)
        h, w, c = shape
        win = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) > min_gap:
            return x


def check_maxpool(rng):
    x = _gapped_field(rng, (6, 6, 2))
    r = rng.standard_normal((3, 3, 2))
    _, idx = layers.maxpool2x2(x)
    loss = lambda: float((layers.maxpool2x2(x)[0] * r).sum())
    dx = layers.maxpool2x2_backward(r, idx, x.shape)
    probes = _probe_indices(rng, {"x": x}, 30)
    return _check_fd("maxpool2x2_backward", loss, {"x": x}, {"x": dx}, probes, 1e-4)


def check_unpool(rng):
    base = _gapped_field(rng, (6, 6, 2))
    _, idx = layers.maxpool2x2(base)
    y = rng.standard_normal((3, 3, 2))
    r = rng.standard_normal((6, 6, 2))
    loss = lambda: float((layers.unpool2x2(y, idx, (6, 6)) * r).sum())
    dy = layers.unpool2x2_backward(r, idx)
    probes = _probe_indices(rng, {"y": y}, 18)
    return _check_fd("unpool2x2_backward", loss, {"y": y}, {"y": dy}, probes, 1e-4)


def check_relu(rng):
    x = rng.uniform(0.1, 1.0, size=(6, 6, 3)) * rng.choice([-1.0, 1.0], size=(6, 6, 3))
    r = rng.standard_normal(x.shape)
    loss = lambda: float((layers.relu(x) * r).sum())
    dx = layers.relu_backward(r, x)
    probes = _probe_indices(rng, {"x": x}, 30)
    return _check_fd("relu_backward", loss, {"x": x}, {"x": dx}, probes, 1e-6)


def check_bilinear(rng):
    x = rng.standard_normal((4, 6, 2))
    r = rng.standard_normal((8, 12, 2))
    loss = lambda: float((layers.bilinear_upsample(x, 2) * r).sum())
    dx = layers.bilinear_upsample_backward(r, 2, x.shape)
    probes = _probe_indices(rng, {"x": x}, 30)
    return _check_fd("bilinear_upsample_backward", loss, {"x": x}, {"x": dx}, probes, 1e-4)


def check_softplus(rng):
    x = rng.standard_normal((5, 5, 2)) * 2
    r = rng.standard_normal(x.shape)
    loss = lambda: float((layers.softplus(x) * r).sum())
    dx = layers.softplus_backward(r, x)
    probes = _probe_indices(rng, {"x": x}, 25)
    return _check_fd("softplus_backward", loss, {"x": x}, {"x": dx}, probes, 1e-6)


# ---------------------------------------------------------------------------
# superpixel pooling


def _random_partition(rng, size=16, regions=8):
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    spmap = oversegment(image, regions)
    return image, spmap, build_graph(spmap)


def check_pool_unary(rng):
    _, spmap, _ = _random_partition(rng)
    z = rng.standard_normal((16, 16, 3))
    r = rng.standard_normal((spmap.region_count, 3))
    loss = lambda: float((pooling.pool_unary(z, spmap) * r).sum())
    dz = pooling.pool_unary_backward(r, spmap)
    probes = _probe_indices(rng, {"z": z}, 40)
    return _check_fd("pool_unary_backward", loss, {"z": z}, {"z": dz}, probes, 1e-6)


def check_pool_unary_adjoint(rng):
    _, spmap, _ = _random_partition(rng)
    worst = 0.0
    for _ in range(20):
        z = rng.standard_normal((16, 16, 3))
        g = rng.standard_normal((spmap.region_count, 3))
        lhs = float((pooling.pool_unary(z, spmap) * g).sum())
        rhs = float((z * pooling.pool_unary_backward(g, spmap)).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    return CheckResult("pool_unary_adjoint", worst, 1e-12, worst <= 1e-12)


def check_pool_pairwise(rng):
    _, _, graph = _random_partition(rng)
    wph = rng.uniform(0.0, 1.0, size=(16, 15))
    wpv = rng.uniform(0.0, 1.0, size=(15, 16))
    r = rng.standard_normal(graph.n_edges)
    loss = lambda: float(
        (pooling.pool_pairwise(wph, wpv, graph).values * r).sum()
    )
    dh, dv = pooling.pool_pairwise_backward(r, graph)
    arrays = {"wph": wph, "wpv": wpv}
    grads = {"wph": dh, "wpv": dv}
    probes = _probe_indices(rng, arrays, 40)
    return _check_fd("pool_pairwise_backward", loss, arrays, grads, probes, 1e-6)


def check_pool_pairwise_adjoint(rng):
    _, _, graph = _random_partition(rng)
    worst = 0.0
    for _ in range(20):
        wph = rng.standard_normal((16, 15))
        wpv = rng.standard_normal((15, 16))
        g = rng.standard_normal(graph.n_edges)
        lhs = float((pooling.pool_pairwise(wph, wpv, graph).values * g).sum())
        dh, dv = pooling.pool_pairwise_backward(g, graph)
        rhs = float((wph * dh).sum() + (wpv * dv).sum())
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1.0))
    return CheckResult("pool_pairwise_adjoint", worst, 1e-12, worst <= 1e-12)


# ---------------------------------------------------------------------------
# CRF layer


def _random_affinity(rng, n, extra_reach=7, density=0.8):
    edges = []
    for i in range(n):
        for j in (i + 1, i + extra_reach):
            if j < n and rng.random() < density:
                edges.append((i, j))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return pooling.RegionAffinity(n, edges, rng.uniform(0.0, 1.0, edges.shape[0]))


def check_gauss_seidel_oracle(rng):
    worst = 0.0
    for lam in (0.1, 1.0, 10.0):
        affinity = _random_affinity(rng, 30)
        system = crf.assemble_system(affinity, lam, tolerance=1e-10)
        b = rng.standard_normal(30)
        res = crf.gauss_seidel_solve(system, b)
        direct = np.linalg.solve(system.matrix.toarray(), b)
        worst = max(worst, float(np.abs(res.x - direct).max()))
    return CheckResult("gauss_seidel_oracle", worst, 1e-6, worst <= 1e-6)


def check_gauss_seidel_monotone(rng):
    worst = 0.0
    for lam in (0.1, 1.0, 10.0):
        affinity = _random_affinity(rng, 40)
        system = crf.assemble_system(affinity, lam, tolerance=1e-10)
        res = crf.gauss_seidel_solve(system, rng.standard_normal(40))
        hist = np.array(res.residual_history)
        if hist.size > 1:
            increase = np.max((hist[1:] - hist[:-1]) / np.maximum(hist[:-1], 1e-300))
            worst = max(worst, float(max(increase, 0.0)))
    return CheckResult("gauss_seidel_monotone", worst, 1e-12, worst <= 1e-12)


def _dense_solve_loss(a_dense, z_s, r):
    return float((np.linalg.solve(a_dense, z_s) * r).sum())


def check_ccrf_backward_zs(rng):
    affinity = _random_affinity(rng, 10)
    system = crf.assemble_system(affinity, 1.0, tolerance=1e-12)
    z_s = rng.standard_normal((10, 2))
    r = rng.standard_normal((10, 2))
    d_zs = crf.ccrf_backward_zs(r, system)
    a_dense = system.matrix.toarray()
    loss = lambda: _dense_solve_loss(a_dense, z_s, r)
    probes = _probe_indices(rng, {"z_s": z_s}, 20)
    return _check_fd("ccrf_backward_zs", loss, {"z_s": z_s}, {"z_s": d_zs}, probes, 1e-5)


def check_ccrf_backward_phi(rng):
    affinity = _random_affinity(rng, 8)
    system = crf.assemble_system(affinity, 1.0, tolerance=1e-12)
    z_s = rng.standard_normal((8, 2))
    r = rng.standard_normal((8, 2))
    z_c = crf.ccrf_forward(z_s, system).z_c
    d_zs = crf.ccrf_backward_zs(r, system)
    d_phi = crf.ccrf_backward_phi(d_zs, z_c, system.edges)
    a = system.matrix.toarray()
    eps = FD_STEP
    worst = 0.0
    for p in range(8):  # diagonal entries
        a[p, p] += eps
        up = _dense_solve_loss(a, z_s, r)
        a[p, p] -= 2 * eps
        down = _dense_solve_loss(a, z_s, r)
        a[p, p] += eps
        worst = max(worst, rel_err(d_phi.diag[p], (up - down) / (2 * eps)))
    for e, (p, q) in enumerate(system.edges):  # symmetrized off-diagonal pairs
        a[p, q] += eps
        a[q, p] += eps
        up = _dense_solve_loss(a, z_s, r)
        a[p, q] -= 2 * eps
        a[q, p] -= 2 * eps
        down = _dense_solve_loss(a, z_s, r)
        a[p, q] += eps
        a[q, p] += eps
        numeric = (up - down) / (2 * eps)
        worst = max(worst, rel_err(d_phi.off_pq[e] + d_phi.off_qp[e], numeric))
    return CheckResult("ccrf_backward_phi", worst, 1e-4, worst <= 1e-4)


def check_ccrf_backward_w(rng):
    affinity = _random_affinity(rng, 8)
    system = crf.assemble_system(affinity, 1.0, tolerance=1e-12)
    z_s = rng.standard_normal((8, 2))
    r = rng.standard_normal((8, 2))
    z_c = crf.ccrf_forward(z_s, system).z_c
    d_zs = crf.ccrf_backward_zs(r, system)
    d_w = crf.ccrf_backward_w(crf.ccrf_backward_phi(d_zs, z_c, system.edges))
    eps = FD_STEP
    worst = 0.0
    for e, (p, q) in enumerate(system.edges):
        def perturbed(delta):
            a = system.matrix.toarray()
            a[p, p] += delta
            a[q, q] += delta
            a[p, q] -= delta
            a[q, p] -= delta
            return _dense_solve_loss(a, z_s, r)

        numeric = (perturbed(eps) - perturbed(-eps)) / (2 * eps)
        worst = max(worst, rel_err(d_w[e], numeric))
    return CheckResult("ccrf_backward_w", worst, 1e-4, worst <= 1e-4)


def check_crf_hand_n2(_rng):
    """2-node system with W01=1, lam=1: all quantities known in closed form."""
    affinity = pooling.RegionAffinity(2, np.array([[0, 1]]), np.array([1.0]))
    system = crf.assemble_system(affinity, 1.0, tolerance=1e-14)
    z_s = np.array([[3.0], [0.0]])
    z_c = crf.ccrf_forward(z_s, system).z_c
    d_zs = crf.ccrf_backward_zs(np.array([[1.0], [0.0]]), system)
    d_phi = crf.ccrf_backward_phi(d_zs, z_c, system.edges)
    d_w = crf.ccrf_backward_w(d_phi)
    deviations = [
        np.abs(z_c.ravel() - [2.0, 1.0]).max(),
        np.abs(d_zs.ravel() - [2 / 3, 1 / 3]).max(),
        np.abs(d_phi.diag - [-4 / 3, -1 / 3]).max(),
        abs(d_phi.off_pq[0] + 2 / 3),
        abs(d_phi.off_qp[0] + 2 / 3),
        abs(d_w[0] + 1 / 3),
        abs(crf.energy(z_c, z_s, system) - 1.5),
    ]
    worst = float(max(deviations))
    detail = (
        f"z_c={np.round(z_c.ravel(), 9).tolist()} "
        f"d_zs={np.round(d_zs.ravel(), 9).tolist()} dW={d_w[0]:.9f}"
    )
    return CheckResult("crf_hand_n2", worst, 1e-12, worst <= 1e-12, detail)


# ---------------------------------------------------------------------------
# networks and full pipeline


def check_softmax_xent(rng):
    logits = rng.standard_normal((6, 6, 4))
    labels = rng.integers(0, 4, size=(6, 6))
    loss = lambda: pipeline.softmax_xent(logits, labels)[0]
    _, grad = pipeline.softmax_xent(logits, labels)
    probes = _probe_indices(rng, {"logits": logits}, 30)
    return _check_fd(
        "softmax_xent_grad", loss, {"logits": logits}, {"logits": grad}, probes, 1e-6
    )


def _param_check(name, rng, loss_and_grads, params, probes_count, threshold):
    loss_fn, grads = loss_and_grads()
    probes = _probe_indices(rng, params, probes_count)
    worst = 0.0
    for key, index in probes:
        numeric = fd_entry(loss_fn, params[key], index)
        worst = max(worst, rel_err(grads[key][index], numeric))
    return CheckResult(name, worst, threshold, worst <= threshold)


def check_unary_params(rng):
    arch = Architecture()
    params = networks.init_params(arch, int(rng.integers(1 << 30)))
    image = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    r = rng.standard_normal((16, 16, 3))

    def build():
        def loss():
            z, _ = networks.unary_forward(image, params, arch)
            return float((z * r).sum())

        z, cache = networks.unary_forward(image, params, arch)
        grads = networks.unary_backward(r, cache, params, arch)
        return loss, grads

    shared, unary, _ = arch.partition()
    probed = {name: params[name] for name in shared + unary}
    return _param_check("unary_params", rng, build, probed, 20, 1e-3)


def check_pairwise_params(rng):
    arch = Architecture()
    params = networks.init_params(arch, int(rng.integers(1 << 30)))
    image = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    rh = rng.standard_normal((16, 15))
    rv = rng.standard_normal((15, 16))

    def build():
        def loss():
            wph, wpv, _ = networks.pairwise_forward(image, params, arch)
            return float((wph * rh).sum() + (wpv * rv).sum())

        _, _, cache = networks.pairwise_forward(image, params, arch)
        grads = networks.pairwise_backward(rh, rv, cache, params, arch)
        return loss, grads

    shared, _, pairwise = arch.partition()
    probed = {name: params[name] for name in shared + pairwise}
    return _param_check("pairwise_params", rng, build, probed, 20, 1e-3)


def check_pipeline_params(rng):
    arch = Architecture()
    config = pipeline.TrainConfig(
        arch=arch,
        superpixel_regions=8,
        solver_tolerance=1e-12,
        seed=0,
    )
    image = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    labels = rng.integers(0, 3, size=(16, 16))
    spmap = oversegment(image, 8)
    graph = build_graph(spmap)
    params = networks.init_params(arch, int(rng.integers(1 << 30)))

    def build():
        def loss():
            return pipeline.forward(image, labels, params, spmap, graph, config).loss

        fp = pipeline.forward(image, labels, params, spmap, graph, config)
        grads = pipeline.backward(fp)
        return loss, grads

    return _param_check("pipeline_params", rng, build, params, 30, 1e-3)


# ---------------------------------------------------------------------------
# harness


@contextmanager
def _mutated(name):
    """Temporarily corrupt one backward operation (self-test of the suite)."""
    if name is None:
        yield
        return
    if name == "crf-phi-sign":
        original = crf.ccrf_backward_phi

        def corrupted(d_zs, z_c, edges):
            g = original(d_zs, z_c, edges)
            return crf.PhiGradient(g.edges, -g.diag, -g.off_pq, -g.off_qp)

        crf.ccrf_backward_phi = corrupted
        try:
            yield
        finally:
            crf.ccrf_backward_phi = original
    elif name == "crf-w-sign":
        original = crf.ccrf_backward_w

        def corrupted(d_phi):
            return -original(d_phi)

        crf.ccrf_backward_w = corrupted
        try:
            yield
        finally:
            crf.ccrf_backward_w = original
    elif name == "pairwise-pool-unscaled":
        def corrupted(d_w, graph):
            d_w = np.asarray(d_w, dtype=np.float64)
            dwp_h = np.zeros((graph.height, graph.width - 1))
            dwp_v = np.zeros((graph.height - 1, graph.width))
            dwp_h[graph.h_pairs[:, 0], graph.h_pairs[:, 1]] = d_w[graph.h_edge]
            dwp_v[graph.v_pairs[:, 0], graph.v_pairs[:, 1]] = d_w[graph.v_edge]
            return dwp_h, dwp_v

        original = pooling.pool_pairwise_backward
        pooling.pool_pairwise_backward = corrupted
        try:
            yield
        finally:
            pooling.pool_pairwise_backward = original
    else:
        raise ValueError(f"unknown mutation '{name}' (choose from {MUTATIONS})")


ALL_CHECKS = (
    check_conv2d,
    check_maxpool,
    check_unpool,
    check_relu,
    check_bilinear,
    check_softplus,
    check_pool_unary,
    check_pool_unary_adjoint,
    check_pool_pairwise,
    check_pool_pairwise_adjoint,
    check_gauss_seidel_oracle,
    check_gauss_seidel_monotone,
    check_ccrf_backward_zs,
    check_ccrf_backward_phi,
    check_ccrf_backward_w,
    check_crf_hand_n2,
    check_softmax_xent,
    check_unary_params,
    check_pairwise_params,
    check_pipeline_params,
)


def run_all(seed=2024, mutate=None):
    """Run every check; returns (results, all_passed)."""
    results = []
    with _mutated(mutate):
        for position, check in enumerate(ALL_CHECKS):
            rng = np.random.default_rng([seed, position])
            results.append(check(rng))
    return results, all(r.passed for r in results)
