"""SLIC oversegmentation and the superpixel adjacency graph.

A superpixel map partitions the image into N 4-connected regions with
dense ids 0..N-1.  The graph records, for every pair of adjacent
regions, the exact list of 4-adjacent pixel pairs straddling their
shared boundary; those pairs are what the pairwise-affinity pooling
reads and writes, so they are kept as flat index arrays into the
horizontal / vertical affinity maps.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, InvalidArgumentError

SLIC_ITERATIONS = 10
DEFAULT_COMPACTNESS = 10.0

# Color distances are measured on a 0..100 scale (inputs are 0..1) so the
# conventional compactness ~10 balances color against normalized position.
_COLOR_SCALE = 100.0

_SPMAP_MAGIC = b"SPXM"
_SPMAP_VERSION = 1


@dataclass
class SuperpixelMap:
    """Per-pixel region assignment with dense ids 0..region_count-1."""

    assignment: np.ndarray  # (H, W) int32
    region_count: int

    @property
    def height(self):
        return self.assignment.shape[0]

    @property
    def width(self):
        return self.assignment.shape[1]

    def region_sizes(self):
        return np.bincount(self.assignment.ravel(), minlength=self.region_count)

    def validate(self):
        """Check the partition invariants; raises InvalidArgumentError."""
        a = self.assignment
        if a.ndim != 2:
            raise InvalidArgumentError("assignment must be 2-D")
        ids = np.unique(a)
        if ids.size != self.region_count or ids[0] != 0 or ids[-1] != self.region_count - 1:
            raise InvalidArgumentError(
                f"region ids must be exactly 0..{self.region_count - 1}"
            )
        for rid in range(self.region_count):
            mask = a == rid
            _, n_comp = ndimage.label(mask)
            if n_comp != 1:
                raise InvalidArgumentError(f"region {rid} is not 4-connected")


@dataclass
class SuperpixelGraph:
    """Region adjacency with per-edge boundary pixel-pair bookkeeping.

    Edges are stored lexicographically sorted as (p, q) with p < q.
    h_pairs[k] = (y, x) indexes the horizontal affinity map entry for the
    pixel pair (y,x)-(y,x+1); h_edge[k] is the owning edge index.
    v_pairs / v_edge do the same for vertical pairs (y,x)-(y+1,x).
    """

    n_regions: int
    height: int
    width: int
    edges: np.ndarray          # (E, 2) int64, p < q, sorted
    region_sizes: np.ndarray   # (N,) int64
    h_pairs: np.ndarray        # (Kh, 2) int64
    h_edge: np.ndarray         # (Kh,) int64
    v_pairs: np.ndarray        # (Kv, 2) int64
    v_edge: np.ndarray         # (Kv,) int64
    edge_pair_counts: np.ndarray = field(default=None)  # (E,) int64

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def edge_index(self, p, q):
        """Index of the undirected edge (p, q), or -1 if absent."""
        lo, hi = (p, q) if p < q else (q, p)
        key = lo * self.n_regions + hi
        keys = self.edges[:, 0] * self.n_regions + self.edges[:, 1]
        pos = np.searchsorted(keys, key)
        if pos < keys.size and keys[pos] == key:
            return int(pos)
        return -1

    def boundary_pairs(self, p, q):
        """(horizontal, vertical) boundary pair coordinates of edge (p, q)."""
        e = self.edge_index(p, q)
        if e < 0:
            return np.empty((0, 2), np.int64), np.empty((0, 2), np.int64)
        return self.h_pairs[self.h_edge == e], self.v_pairs[self.v_edge == e]


def validate_image(image):
    """Check basic image-plane invariants, returning a float64 H*W*C array."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise InvalidArgumentError("image must be H x W or H x W x C")
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise InvalidArgumentError(f"image too small: {h}x{w}, need at least 8x8")
    if not np.all(np.isfinite(img)):
        raise InvalidArgumentError("image contains non-finite values")
    if img.min() < -1e-9 or img.max() > 1 + 1e-9:
        raise InvalidArgumentError("image values must lie in [0, 1]")
    return img


def _seed_grid(height, width, target):
    """Deterministic seed layout: ny*nx seeds with ny*nx in [target/2, 2*target]."""
    ny = max(1, int(round(np.sqrt(target * height / width))))
    ny = min(ny, height)
    nx = max(1, int(round(target / ny)))
    nx = min(nx, width)
    while ny * nx < (target + 1) // 2 and nx < width:
        nx += 1
    while ny * nx > 2 * target and nx > 1:
        nx -= 1
    ys = (np.arange(ny) + 0.5) * height / ny
    xs = (np.arange(nx) + 0.5) * width / nx
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([cy.ravel(), cx.ravel()], axis=1)


def oversegment(image, target_regions, compactness=DEFAULT_COMPACTNESS):
    """Partition an image into roughly `target_regions` connected superpixels.

    SLIC: localized k-means in color+position space from a fixed seed
    grid (no randomness), followed by connectivity enforcement that
    absorbs orphan components into the largest adjacent region.

    Args:
        image: H x W x C array with values in [0, 1].
        target_regions: requested superpixel count; the result has
            between target/2 and 2*target regions.
        compactness: weight of spatial distance against color distance;
            higher values give more regular, grid-like regions.

    Returns:
        SuperpixelMap with dense region ids.
    """
    img = validate_image(image)
    h, w, _ = img.shape
    target = int(target_regions)
    if target < 2:
        raise InvalidArgumentError("target_regions must be >= 2")
    if target > h * w // 4:
        raise InvalidArgumentError(
            f"target_regions={target} too large for a {h}x{w} image"
        )

    centers = _seed_grid(h, w, target)
    n_seeds = centers.shape[0]
    color = img * _COLOR_SCALE
    seed_colors = color[
        np.clip(centers[:, 0].astype(int), 0, h - 1),
        np.clip(centers[:, 1].astype(int), 0, w - 1),
    ]
    interval = np.sqrt(h * w / n_seeds)
    m2 = float(compactness) ** 2 / interval**2
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)

    label = np.zeros((h, w), dtype=np.int64)
    for _ in range(SLIC_ITERATIONS):
        best = np.full((h, w), np.inf)
        for k in range(n_seeds):
            cy, cx = centers[k]
            y0, y1 = max(0, int(cy - 2 * interval)), min(h, int(cy + 2 * interval) + 1)
            x0, x1 = max(0, int(cx - 2 * interval)), min(w, int(cx + 2 * interval) + 1)
            dc2 = ((color[y0:y1, x0:x1] - seed_colors[k]) ** 2).sum(axis=-1)
            ds2 = (ys[y0:y1, None] - cy) ** 2 + (xs[None, x0:x1] - cx) ** 2
            d = dc2 + m2 * ds2
            win = best[y0:y1, x0:x1]
            upd = d < win
            win[upd] = d[upd]
            label[y0:y1, x0:x1][upd] = k
        flat = label.ravel()
        cnt = np.bincount(flat, minlength=n_seeds).astype(np.float64)
        occupied = cnt > 0
        cy_new = np.bincount(flat, weights=np.repeat(ys, w), minlength=n_seeds)
        cx_new = np.bincount(flat, weights=np.tile(xs, h), minlength=n_seeds)
        centers[occupied, 0] = cy_new[occupied] / cnt[occupied]
        centers[occupied, 1] = cx_new[occupied] / cnt[occupied]
        for c in range(color.shape[2]):
            sc = np.bincount(flat, weights=color[:, :, c].ravel(), minlength=n_seeds)
            seed_colors[occupied, c] = sc[occupied] / cnt[occupied]

    assignment = _enforce_connectivity(label)
    n_regions = int(assignment.max()) + 1
    return SuperpixelMap(assignment=assignment.astype(np.int32), region_count=n_regions)


def _enforce_connectivity(label):
    """Keep the largest component per label; absorb orphans into the
    largest adjacent region, then relabel ids densely."""
    h, w = label.shape
    comp = np.full((h, w), -1, dtype=np.int64)
    comp_label = []
    n_comp = 0
    for rid in np.unique(label):
        cc, k = ndimage.label(label == rid)
        comp[cc > 0] = cc[cc > 0] - 1 + n_comp
        comp_label.extend([rid] * k)
        n_comp += k
    comp_label = np.asarray(comp_label)
    comp_size = np.bincount(comp.ravel(), minlength=n_comp)

    # Keeper = largest component of each label (ties: lowest component id,
    # which is deterministic because components are enumerated per label).
    keeper = np.zeros(n_comp, dtype=bool)
    for rid in np.unique(comp_label):
        members = np.flatnonzero(comp_label == rid)
        keeper[members[np.argmax(comp_size[members])]] = True

    region_of = comp_label.copy()          # final region per component
    resolved = keeper.copy()
    region_size = np.zeros(int(label.max()) + 1, dtype=np.int64)
    for ci in np.flatnonzero(keeper):
        region_size[region_of[ci]] += comp_size[ci]

    pending = list(np.flatnonzero(~keeper))
    while pending:
        progressed = False
        still = []
        for ci in pending:
            mask = comp == ci
            nb = np.zeros_like(mask)
            nb[:-1, :] |= mask[1:, :]
            nb[1:, :] |= mask[:-1, :]
            nb[:, :-1] |= mask[:, 1:]
            nb[:, 1:] |= mask[:, :-1]
            nb &= ~mask
            nb_comps = np.unique(comp[nb])
            nb_comps = nb_comps[resolved[nb_comps]]
            if nb_comps.size == 0:
                still.append(ci)
                continue
            cand = np.unique(region_of[nb_comps])
            sizes = region_size[cand]
            tgt = int(cand[np.argmax(sizes)])  # argmax ties -> lowest id
            region_of[ci] = tgt
            region_size[tgt] += comp_size[ci]
            resolved[ci] = True
            progressed = True
        if not progressed and still:
            raise RuntimeError("connectivity enforcement stalled")  # unreachable
        pending = still

    merged = region_of[comp]
    ids = np.unique(merged)
    remap = np.zeros(ids.max() + 1, dtype=np.int64)
    remap[ids] = np.arange(ids.size)
    return remap[merged]


def build_graph(spmap: SuperpixelMap) -> SuperpixelGraph:
    """Build the region adjacency graph with boundary pixel-pair lists.

    Every 4-adjacent pixel pair with differing region ids lands in the
    boundary list of exactly one undirected edge.
    """
    a = spmap.assignment.astype(np.int64)
    h, w = a.shape
    n = spmap.region_count

    hy, hx = np.nonzero(a[:, :-1] != a[:, 1:])
    hp = a[hy, hx]
    hq = a[hy, hx + 1]
    vy, vx = np.nonzero(a[:-1, :] != a[1:, :])
    vp = a[vy, vx]
    vq = a[vy + 1, vx]

    h_keys = np.minimum(hp, hq) * n + np.maximum(hp, hq)
    v_keys = np.minimum(vp, vq) * n + np.maximum(vp, vq)
    all_keys = np.unique(np.concatenate([h_keys, v_keys]))
    edges = np.stack([all_keys // n, all_keys % n], axis=1)

    h_edge = np.searchsorted(all_keys, h_keys)
    v_edge = np.searchsorted(all_keys, v_keys)
    counts = np.bincount(h_edge, minlength=all_keys.size) + np.bincount(
        v_edge, minlength=all_keys.size
    )

    return SuperpixelGraph(
        n_regions=n,
        height=h,
        width=w,
        edges=edges,
        region_sizes=np.bincount(a.ravel(), minlength=n),
        h_pairs=np.stack([hy, hx], axis=1),
        h_edge=h_edge,
        v_pairs=np.stack([vy, vx], axis=1),
        v_edge=v_edge,
        edge_pair_counts=counts,
    )


def save_spmap(spmap: SuperpixelMap, path):
    """Write the binary map format: magic, version, H, W, N, row-major int32 ids."""
    header = (
        _SPMAP_MAGIC
        + np.asarray(
            [_SPMAP_VERSION, spmap.height, spmap.width, spmap.region_count],
            dtype="<u4",
        ).tobytes()
    )
    data = spmap.assignment.astype("<i4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(data)


def load_spmap(path) -> SuperpixelMap:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 20:
        raise FormatError("truncated header", path=path, byte_offset=len(blob))
    if blob[:4] != _SPMAP_MAGIC:
        raise FormatError("bad magic", path=path, byte_offset=0)
    version, h, w, n = np.frombuffer(blob[4:20], dtype="<u4")
    if version != _SPMAP_VERSION:
        raise FormatError(f"unsupported version {version}", path=path, byte_offset=4)
    expected = 20 + 4 * int(h) * int(w)
    if len(blob) != expected:
        raise FormatError(
            f"expected {expected} bytes, got {len(blob)}",
            path=path,
            byte_offset=min(len(blob), expected),
        )
    assignment = (
        np.frombuffer(blob[20:], dtype="<i4").reshape(int(h), int(w)).astype(np.int32)
    )
    if assignment.min() < 0 or assignment.max() >= int(n):
        raise FormatError("region ids exceed declared count", path=path, byte_offset=20)
    return SuperpixelMap(assignment=assignment, region_count=int(n))


def to_color_image(spmap: SuperpixelMap):
    """Indexed-color rendering of the map for visual inspection (uint8 RGB)."""
    hue = (np.arange(spmap.region_count) * 0.61803398875) % 1.0
    palette = _hsv_to_rgb(hue, 0.6, 0.95)
    return (palette[spmap.assignment] * 255).astype(np.uint8)


def boundary_overlay(image, spmap: SuperpixelMap):
    """Image copy with region boundaries drawn in red (uint8 RGB)."""
    img = validate_image(image)
    rgb = img if img.shape[2] == 3 else np.repeat(img[:, :, :1], 3, axis=2)
    out = (rgb * 255).astype(np.uint8)
    a = spmap.assignment
    edge = np.zeros(a.shape, dtype=bool)
    edge[:, :-1] |= a[:, :-1] != a[:, 1:]
    edge[:-1, :] |= a[:-1, :] != a[1:, :]
    out[edge] = (255, 0, 0)
    return out


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6).astype(int) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    p = np.full_like(f, p)
    vv = np.full_like(f, v)
    choices = [
        (vv, t, p), (q, vv, p), (p, vv, t), (p, q, vv), (t, p, vv), (vv, p, q),
    ]
    rgb = np.zeros((h.size, 3))
    for idx, (r, g, b) in enumerate(choices):
        m = i == idx
        rgb[m] = np.stack([r[m], g[m], b[m]], axis=1)
    return rgb
