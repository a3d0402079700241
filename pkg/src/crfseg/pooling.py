"""Superpixel pooling: pixel features -> region features, pixel
affinities -> edge affinities, and the exact adjoints of both.

The unary pooling is a per-region mean, so its backward carries the
1/|region| factor (true adjoint).  A factorless variant, which treats
the backward as a plain broadcast, is kept behind the ``averaged`` flag
for comparison experiments; it does not pass finite-difference checks.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .superpixels import SuperpixelGraph, SuperpixelMap


@dataclass
class RegionAffinity:
    """Symmetric edge weights with support exactly on the adjacency graph.

    values[e] is the weight of graph edge e (edges sorted, p < q)."""

    n_regions: int
    edges: np.ndarray   # (E, 2)
    values: np.ndarray  # (E,)

    def to_dense(self):
        w = np.zeros((self.n_regions, self.n_regions))
        p, q = self.edges[:, 0], self.edges[:, 1]
        w[p, q] = self.values
        w[q, p] = self.values
        return w

    def dump_edges(self, stream):
        """Debug export: one `p q weight` line per edge."""
        for (p, q), v in zip(self.edges, self.values):
            stream.write(f"{p} {q} {float(v)!r}\n")


def _check_field(z, spmap: SuperpixelMap):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise InvalidArgumentError("features must be H x W x C")
    if z.shape[:2] != (spmap.height, spmap.width):
        raise InvalidArgumentError(
            f"feature dims {z.shape[:2]} do not match map {spmap.height}x{spmap.width}"
        )
    return z


def pool_unary(z, spmap: SuperpixelMap):
    """Per-region channel means: (H,W,C) -> (N,C)."""
    z = _check_field(z, spmap)
    flat = spmap.assignment.ravel()
    n, c = spmap.region_count, z.shape[2]
    sums = np.zeros((n, c))
    np.add.at(sums, flat, z.reshape(-1, c))
    return sums / spmap.region_sizes()[:, None]


def pool_unary_backward(d_zs, spmap: SuperpixelMap, averaged=True):
    """Adjoint of pool_unary: spread each region gradient over its pixels.

    averaged=True divides by the region size (exact adjoint of the
    mean); averaged=False broadcasts the raw region gradient.
    """
    d_zs = np.asarray(d_zs, dtype=np.float64)
    if d_zs.ndim != 2 or d_zs.shape[0] != spmap.region_count:
        raise InvalidArgumentError("gradient must be N x C")
    per_region = d_zs / spmap.region_sizes()[:, None] if averaged else d_zs
    return per_region[spmap.assignment]


def _check_affinity(wp_h, wp_v, graph: SuperpixelGraph):
    wp_h = np.asarray(wp_h, dtype=np.float64)
    wp_v = np.asarray(wp_v, dtype=np.float64)
    if wp_h.shape != (graph.height, graph.width - 1):
        raise InvalidArgumentError(
            f"horizontal affinity must be {graph.height}x{graph.width - 1}, "
            f"got {wp_h.shape}"
        )
    if wp_v.shape != (graph.height - 1, graph.width):
        raise InvalidArgumentError(
            f"vertical affinity must be {graph.height - 1}x{graph.width}, "
            f"got {wp_v.shape}"
        )
    return wp_h, wp_v


def pool_pairwise(wp_h, wp_v, graph: SuperpixelGraph) -> RegionAffinity:
    """Mean pixel affinity over each edge's boundary pairs."""
    wp_h, wp_v = _check_affinity(wp_h, wp_v, graph)
    e = graph.n_edges
    sums = np.zeros(e)
    sums += np.bincount(
        graph.h_edge, weights=wp_h[graph.h_pairs[:, 0], graph.h_pairs[:, 1]], minlength=e
    )
    sums += np.bincount(
        graph.v_edge, weights=wp_v[graph.v_pairs[:, 0], graph.v_pairs[:, 1]], minlength=e
    )
    values = sums / graph.edge_pair_counts if e else sums
    return RegionAffinity(n_regions=graph.n_regions, edges=graph.edges, values=values)


def pool_pairwise_backward(d_w, graph: SuperpixelGraph):
    """Adjoint of pool_pairwise: each boundary pair of edge e receives
    d_w[e]/|pairs(e)|; interior pixel pairs get zero."""
    d_w = np.asarray(d_w, dtype=np.float64)
    if d_w.shape != (graph.n_edges,):
        raise InvalidArgumentError("gradient must have one value per edge")
    dwp_h = np.zeros((graph.height, graph.width - 1))
    dwp_v = np.zeros((graph.height - 1, graph.width))
    scaled = d_w / graph.edge_pair_counts if graph.n_edges else d_w
    # each pixel pair belongs to exactly one edge, so plain assignment is exact
    dwp_h[graph.h_pairs[:, 0], graph.h_pairs[:, 1]] = scaled[graph.h_edge]
    dwp_v[graph.v_pairs[:, 0], graph.v_pairs[:, 1]] = scaled[graph.v_edge]
    return dwp_h, dwp_v
