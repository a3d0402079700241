"""Continuous CRF layer: exact MAP inference as a sparse SPD linear
solve, plus the closed-form backward passes.

The system matrix is A = D - W + lam*I where W holds the region
affinities and D the row sums of W.  For W >= 0 and lam > 0, A is
strictly diagonally dominant with positive diagonal, hence symmetric
positive definite, and Gauss-Seidel converges.  One Gauss-Seidel sweep
in fixed ascending node order equals x <- (D_A + L)^{-1} (b - U x) with
A = (D_A + L) + U split into its lower-triangular and strictly-upper
parts; the lower-triangular solve is done by a cached sparse
factorization so sweeps stay cheap.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import InvalidArgumentError, SolverConvergenceError
from .pooling import RegionAffinity

DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_SWEEPS = 500


@dataclass
class CrfSystem:
    """A = D - W + lam*I with cached Gauss-Seidel sweep state."""

    n: int
    lam: float
    matrix: sparse.csr_matrix
    edges: np.ndarray  # (E, 2) support of W, p < q
    tolerance: float = DEFAULT_TOLERANCE
    max_sweeps: int = DEFAULT_MAX_SWEEPS
    _lower: object = field(default=None, repr=False)
    _upper: sparse.csr_matrix = field(default=None, repr=False)

    def sweep(self, b, x):
        """One Gauss-Seidel sweep in ascending node order."""
        return self._lower.solve(b - self._upper @ x)


@dataclass
class GaussSeidelResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    residual_history: list


@dataclass
class CrfOutput:
    z_c: np.ndarray          # (N, C)
    residuals: np.ndarray    # (C,)
    iterations: np.ndarray   # (C,)


def assemble_system(
    affinity: RegionAffinity,
    lam,
    tolerance=DEFAULT_TOLERANCE,
    max_sweeps=DEFAULT_MAX_SWEEPS,
) -> CrfSystem:
    """Build A = D - W + lam*I from edge affinities.

    Requires lam > 0 and W >= 0; that combination makes A strictly
    diagonally dominant (row sums of D - W are zero), which both the
    MAP solve and the solver's convergence rely on.
    """
    lam = float(lam)
    if not lam > 0:
        raise InvalidArgumentError("lam must be > 0")
    values = np.asarray(affinity.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("affinities must be finite")
    if values.size and values.min() < 0:
        raise InvalidArgumentError("affinities must be non-negative")
    n = affinity.n_regions
    p, q = affinity.edges[:, 0], affinity.edges[:, 1]
    diag = np.full(n, lam)
    np.add.at(diag, p, values)
    np.add.at(diag, q, values)
    rows = np.concatenate([np.arange(n), p, q])
    cols = np.concatenate([np.arange(n), q, p])
    vals = np.concatenate([diag, -values, -values])
    a = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    a.sort_indices()
    lower = splu(
        sparse.tril(a).tocsc(),
        permc_spec="NATURAL",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": False},
    )
    upper = sparse.triu(a, k=1).tocsr()
    return CrfSystem(
        n=n,
        lam=lam,
        matrix=a,
        edges=affinity.edges,
        tolerance=tolerance,
        max_sweeps=max_sweeps,
        _lower=lower,
        _upper=upper,
    )


def gauss_seidel_solve(system: CrfSystem, b, x0=None) -> GaussSeidelResult:
    """Iterate Gauss-Seidel sweeps until the relative residual
    ||Ax - b|| / max(||b||, eps) drops below the system tolerance.

    Never raises on non-convergence; the returned status says whether
    the tolerance was met within the sweep budget.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (system.n,):
        raise InvalidArgumentError(f"b must have shape ({system.n},)")
    x = np.zeros(system.n) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != (system.n,):
        raise InvalidArgumentError(f"x0 must have shape ({system.n},)")
    scale = max(float(np.linalg.norm(b)), 1e-300)
    history = []
    residual = float(np.linalg.norm(system.matrix @ x - b)) / scale
    if residual <= system.tolerance:
        return GaussSeidelResult(x, residual, 0, True, [residual])
    for sweep in range(1, system.max_sweeps + 1):
        x = system.sweep(b, x)
        residual = float(np.linalg.norm(system.matrix @ x - b)) / scale
        history.append(residual)
        if residual <= system.tolerance:
            return GaussSeidelResult(x, residual, sweep, True, history)
    return GaussSeidelResult(x, residual, system.max_sweeps, False, history)


def ccrf_forward(z_s, system: CrfSystem) -> CrfOutput:
    """Per-channel MAP solve A x = z_s[:, c], warm-started from z_s."""
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_s.ndim != 2 or z_s.shape[0] != system.n:
        raise InvalidArgumentError(f"z_s must be {system.n} x C")
    z_c = np.empty_like(z_s)
    residuals = np.empty(z_s.shape[1])
    iterations = np.empty(z_s.shape[1], dtype=int)
    for c in range(z_s.shape[1]):
        res = gauss_seidel_solve(system, z_s[:, c], x0=z_s[:, c])
        if not res.converged:
            raise SolverConvergenceError(
                f"channel {c}: residual {res.residual:.3e} after "
                f"{res.iterations} sweeps (tolerance {system.tolerance:.1e})",
                channel=c,
                residual=res.residual,
                iterations=res.iterations,
            )
        z_c[:, c] = res.x
        residuals[c] = res.residual
        iterations[c] = res.iterations
    return CrfOutput(z_c=z_c, residuals=residuals, iterations=iterations)


def energy(z_c, z_s, system: CrfSystem):
    """Quadratic CRF energy 0.5 x'Ax - x'b + 0.5 b'b, summed over channels."""
    z_c = np.asarray(z_c, dtype=np.float64)
    z_s = np.asarray(z_s, dtype=np.float64)
    if z_c.shape != z_s.shape:
        raise InvalidArgumentError("z_c and z_s shapes must match")
    ax = system.matrix @ z_c
    return float(0.5 * np.sum(z_c * ax) - np.sum(z_c * z_s) + 0.5 * np.sum(z_s * z_s))


def ccrf_backward_zs(d_zc, system: CrfSystem):
    """dL/dz_s = A^{-1} dL/dz_c per channel (A is symmetric)."""
    d_zc = np.asarray(d_zc, dtype=np.float64)
    if d_zc.ndim != 2 or d_zc.shape[0] != system.n:
        raise InvalidArgumentError(f"gradient must be {system.n} x C")
    out = np.empty_like(d_zc)
    for c in range(d_zc.shape[1]):
        res = gauss_seidel_solve(system, d_zc[:, c], x0=d_zc[:, c])
        if not res.converged:
            raise SolverConvergenceError(
                f"backward channel {c}: residual {res.residual:.3e} after "
                f"{res.iterations} sweeps",
                channel=c,
                residual=res.residual,
                iterations=res.iterations,
            )
        out[:, c] = res.x
    return out


@dataclass
class PhiGradient:
    """dL/dPhi restricted to its sparse support (diagonal + edges).

    off_pq[e] is the (p, q) entry and off_qp[e] the (q, p) entry of
    edge e; the outer-product gradient is not symmetric in general.
    """

    edges: np.ndarray
    diag: np.ndarray    # (N,)
    off_pq: np.ndarray  # (E,)
    off_qp: np.ndarray  # (E,)


def ccrf_backward_phi(d_zs, z_c, edges) -> PhiGradient:
    """dL/dPhi = -(dL/dz_s) outer z_c, summed over channels, on the support."""
    d_zs = np.asarray(d_zs, dtype=np.float64)
    z_c = np.asarray(z_c, dtype=np.float64)
    if d_zs.shape != z_c.shape:
        raise InvalidArgumentError("d_zs and z_c shapes must match")
    p, q = edges[:, 0], edges[:, 1]
    diag = -np.sum(d_zs * z_c, axis=1)
    off_pq = -np.sum(d_zs[p] * z_c[q], axis=1)
    off_qp = -np.sum(d_zs[q] * z_c[p], axis=1)
    return PhiGradient(edges=edges, diag=diag, off_pq=off_pq, off_qp=off_qp)


def ccrf_backward_w(d_phi: PhiGradient):
    """Chain dL/dPhi through Phi = D - W onto the shared edge weights.

    Raising W_pq raises both diagonal entries (via D) and lowers both
    off-diagonals, so each undirected edge collects four terms."""
    p, q = d_phi.edges[:, 0], d_phi.edges[:, 1]
    return d_phi.diag[p] + d_phi.diag[q] - d_phi.off_pq - d_phi.off_qp
