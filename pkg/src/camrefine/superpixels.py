"""Image simplification: SLIC or Quickshift over-segmentation, then greedy
region merging down to at most ``q`` colour-coherent clusters."""
from __future__ import annotations

import heapq
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .imagecore import FormatError, RasterImage, atomic_write_bytes, load_pgm, rgb_to_lab, save_pgm

log = logging.getLogger(__name__)

METHODS = ("slic", "quickshift")


@dataclass(frozen=True)
class SimplifyParams:
    method: str = "slic"
    q: int = 32
    slic_k: int = 256
    slic_compactness: float = 10.0
    slic_iters: int = 10
    qs_kernel_size: float = 5.0
    qs_max_dist: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.q < 2:
            raise ValueError("q must be >= 2")
        if self.slic_k < self.q:
            raise ValueError("slic_k must be >= q")
        if self.slic_iters < 1:
            raise ValueError("slic_iters must be >= 1")
        for name in ("slic_compactness", "qs_kernel_size", "qs_max_dist"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SegmentMap:
    """Row-major segment ids in ``[0, num_segments)``."""

    segments: np.ndarray

    def __post_init__(self):
        seg = np.ascontiguousarray(self.segments, dtype=np.int32)
        if seg.ndim != 2 or seg.size == 0:
            raise ValueError(f"expected non-empty (h, w) array, got shape {seg.shape}")
        present = np.unique(seg)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise ValueError("segment ids must form a contiguous range starting at 0")
        seg.flags.writeable = False
        object.__setattr__(self, "segments", seg)
        object.__setattr__(self, "_n", len(present))

    @property
    def num_segments(self):
        return self._n

    @property
    def height(self):
        return self.segments.shape[0]

    @property
    def width(self):
        return self.segments.shape[1]

    def __eq__(self, other):
        return isinstance(other, SegmentMap) and np.array_equal(self.segments, other.segments)


def relabel_sequential(labels):
    """Map arbitrary ids to 0..n-1 in order of first raster occurrence."""
    flat = labels.ravel()
    uniq, first, inv = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int32)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq), dtype=np.int32)
    return rank[inv].reshape(labels.shape)


def _lab_xy(image):
    lab = rgb_to_lab(image)
    h, w = lab.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return lab, xx, yy


# -- SLIC -----------------------------------------------------------------------

def _seed_grid(h, w, k):
    nx = min(w, max(1, int(np.ceil(np.sqrt(k * w / h)))))
    ny = min(h, max(1, int(round(k / nx))))
    step_x, step_y = w / nx, h / ny
    cx = (np.arange(nx) + 0.5) * step_x - 0.5
    cy = (np.arange(ny) + 0.5) * step_y - 0.5
    return nx, ny, step_x, step_y, cx, cy


def _gradient_energy(lab):
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return (dx ** 2).sum(-1) + (dy ** 2).sum(-1)


def slic_energy(lab, xx, yy, labels, centers, spatial_weight):
    """Sum of squared 5-D distances of every pixel to its assigned centre."""
    c = centers[labels]
    dlab = ((lab - c[..., :3]) ** 2).sum(-1)
    dxy = (xx - c[..., 3]) ** 2 + (yy - c[..., 4]) ** 2
    return float((dlab + spatial_weight * dxy).sum())


def slic(image, params=SimplifyParams(), debug=False):
    h, w = image.height, image.width
    k = params.slic_k
    if h * w < k:
        raise ValueError(f"degenerate image: {w}x{h} pixels but slic_k={k}")
    lab, xx, yy = _lab_xy(image)
    S = np.sqrt(h * w / k)
    m2 = (params.slic_compactness / S) ** 2
    nx, ny, step_x, step_y, cx, cy = _seed_grid(h, w, k)

    # seeds: grid cell centres, moved to the lowest-gradient pixel of the 3x3 window.
    # The window is clipped to the seed's own cell so two seeds never coincide.
    grad = _gradient_energy(lab)
    pix_cell_x = np.floor((np.arange(w) + 0.5) / step_x).astype(int)
    pix_cell_y = np.floor((np.arange(h) + 0.5) / step_y).astype(int)
    centers = np.empty((ny * nx, 5))
    for j, y0 in enumerate(cy):
        for i, x0 in enumerate(cx):
            px, py = int(np.floor(x0 + 0.5)), int(np.floor(y0 + 0.5))
            bx, by, best = px, py, grad[py, px]
            for yy_ in range(max(py - 1, 0), min(py + 2, h)):
                if pix_cell_y[yy_] != j:
                    continue
                for xx_ in range(max(px - 1, 0), min(px + 2, w)):
                    if pix_cell_x[xx_] == i and grad[yy_, xx_] < best:
                        bx, by, best = xx_, yy_, grad[yy_, xx_]
            if (bx, by) != (px, py):
                x0, y0 = float(bx), float(by)
            centers[j * nx + i] = (*lab[by, bx], x0, y0)

    # candidate centres per pixel: nearby grid cells, enough to cover a 2S x 2S window
    rx = int(np.ceil(S / step_x)) + 2
    ry = int(np.ceil(S / step_y)) + 2
    cell_x = np.minimum((np.arange(w) / step_x).astype(int), nx - 1)
    cell_y = np.minimum((np.arange(h) / step_y).astype(int), ny - 1)
    cand = []
    for dy in range(-ry, ry + 1):
        for dx in range(-rx, rx + 1):
            gy = cell_y[:, None] + dy
            gx = cell_x[None, :] + dx
            valid = (gy >= 0) & (gy < ny) & (gx >= 0) & (gx < nx)
            cand.append((dy, dx, np.where(valid, gy * nx + gx, -1)))

    labels = np.full((h, w), -1, dtype=np.int64)
    prev_energy = np.inf
    n_centers = len(centers)
    L, A, B = lab[..., 0], lab[..., 1], lab[..., 2]

    def dist2(cidx):
        c = centers[cidx]  # (h, w, 5)
        d = (L - c[..., 0]) ** 2
        d += (A - c[..., 1]) ** 2
        d += (B - c[..., 2]) ** 2
        dxy = (xx - c[..., 3]) ** 2
        dxy += (yy - c[..., 4]) ** 2
        d += m2 * dxy
        return d, c

    for _ in range(params.slic_iters):
        assigned = labels >= 0
        if assigned.any():
            d, _c = dist2(np.where(assigned, labels, 0))
            best = np.where(assigned, d, np.inf)
        else:
            best = np.full((h, w), np.inf)
        # how many cells away (left/right/up/down) any centre's window can reach
        gxs = np.arange(n_centers) % nx
        gys = np.arange(n_centers) // nx
        reach_l = int((gxs - np.floor((centers[:, 3] - S) / step_x)).max())
        reach_r = int((np.floor((centers[:, 3] + S) / step_x) - gxs).max())
        reach_u = int((gys - np.floor((centers[:, 4] - S) / step_y)).max())
        reach_d = int((np.floor((centers[:, 4] + S) / step_y) - gys).max())
        for dy, dx, ci in cand:
            if dx > reach_l or -dx > reach_r or dy > reach_u or -dy > reach_d:
                continue
            valid = ci >= 0
            d, c = dist2(np.where(valid, ci, 0))
            inside = valid & (np.abs(xx - c[..., 3]) <= S) & (np.abs(yy - c[..., 4]) <= S)
            better = inside & ((d < best) | ((d == best) & (ci < labels)))
            best[better] = d[better]
            labels[better] = ci[better]
        orphan = labels < 0
        if orphan.any():
            # pixels outside every search window go to the nearest centre overall
            for y, x in zip(*np.nonzero(orphan)):
                d = ((centers[:, :3] - lab[y, x]) ** 2).sum(-1) + m2 * (
                    (centers[:, 3] - x) ** 2 + (centers[:, 4] - y) ** 2)
                labels[y, x] = int(np.argmin(d))
        if debug:
            e = slic_energy(lab, xx, yy, labels, centers, m2)
            assert e <= prev_energy * (1 + 1e-12), f"SLIC energy rose after assignment: {prev_energy} -> {e}"
            prev_energy = e
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers)
        feats = np.concatenate([lab.reshape(-1, 3), xx.reshape(-1, 1), yy.reshape(-1, 1)], axis=1)
        sums = np.stack([np.bincount(flat, weights=feats[:, d], minlength=n_centers) for d in range(5)], 1)
        nz = counts > 0
        centers[nz] = sums[nz] / counts[nz, None]
        if debug:
            e = slic_energy(lab, xx, yy, labels, centers, m2)
            assert e <= prev_energy * (1 + 1e-12), f"SLIC energy rose after update: {prev_energy} -> {e}"
            prev_energy = e
    return SegmentMap(relabel_sequential(labels))


# -- Quickshift -------------------------------------------------------------------

def _window_offsets(radius):
    r = int(np.floor(radius))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if (dy or dx) and dy * dy + dx * dx <= radius * radius]
    return offs  # raster order of the neighbour relative to the centre


DENSITY_DECIMALS = 9


def quickshift_forest(image, params=SimplifyParams()):
    """Return (density, parent) arrays of the Quickshift forest, both flat.

    Neighbours are restricted to a disc of radius ``qs_max_dist``. A pixel
    links to the nearest (joint colour + position distance) neighbour that
    ranks above it, where rank is density with ties broken by lower raster
    index; remaining pixels are roots (``parent[i] == i``). Distance ties
    go to the neighbour with the lower raster index. Densities are rounded
    to ``DENSITY_DECIMALS`` places before ranking.
    """
    lab = rgb_to_lab(image)
    h, w = lab.shape[:2]
    R = int(np.floor(params.qs_max_dist))
    # only offsets after (0, 0) in raster order; the mirrored pair is handled alongside
    half = [(dy, dx) for dy, dx in _window_offsets(params.qs_max_dist) if (dy, dx) > (0, 0)]
    inv2s2 = 1.0 / (2.0 * params.qs_kernel_size ** 2)
    max_d2 = params.qs_max_dist ** 2

    chans = [np.pad(lab[..., c], R, constant_values=np.nan) for c in range(3)]
    core = (slice(R, R + h), slice(R, R + w))

    def pair_d2(dy, dx):
        nb = (slice(R + dy, R + dy + h), slice(R + dx, R + dx + w))
        d2 = float(dy * dy + dx * dx)
        for c in chans:
            d2 = d2 + (c[core] - c[nb]) ** 2
        return d2, nb

    acc = np.zeros((h + 2 * R, w + 2 * R))
    acc[core] += 1.0  # self term
    for dy, dx in half:
        d2, nb = pair_d2(dy, dx)
        k = np.exp(-d2 * inv2s2)
        k[np.isnan(k)] = 0.0
        acc[core] += k
        acc[nb] += k
    # quantised so that mirror-symmetric pixels tie exactly regardless of summation order
    density = np.round(acc[core], DENSITY_DECIMALS)

    den_p = np.pad(density, R, constant_values=-np.inf)
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    idx_p = np.pad(idx, R, constant_values=-1)
    best_p = np.full((h + 2 * R, w + 2 * R), np.inf)
    parent_p = idx_p.copy()
    for dy, dx in half:
        d2, nb = pair_d2(dy, dx)
        close = d2 <= max_d2  # False where the neighbour is outside the image
        nb_den, nb_idx = den_p[nb], idx_p[nb]
        # forward: pixel at core links to neighbour at nb (neighbour has the larger raster index)
        up = close & (nb_den > density)
        bc, pc = best_p[core], parent_p[core]
        take = up & ((d2 < bc) | ((d2 == bc) & (nb_idx < pc)))
        best_p[core] = np.where(take, d2, bc)
        parent_p[core] = np.where(take, nb_idx, pc)
        # backward: pixel at nb links to the core pixel (lower raster index wins density ties)
        down = close & (density >= nb_den)
        bn, pn = best_p[nb], parent_p[nb]
        take = down & ((d2 < bn) | ((d2 == bn) & (idx < pn)))
        best_p[nb] = np.where(take, d2, bn)
        parent_p[nb] = np.where(take, idx, pn)
    return density.ravel(), parent_p[core].ravel()


def quickshift(image, params=SimplifyParams()):
    density, parent = quickshift_forest(image, params)
    nonroot = parent != np.arange(parent.size)
    assert np.all(density[parent[nonroot]] >= density[nonroot]), "quickshift parent density decreased"
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    return SegmentMap(relabel_sequential(root.reshape(image.height, image.width)))


# -- connectivity and merging -------------------------------------------------------

def _adjacent_pairs(seg):
    """Unique (a, b) pairs with a < b of 4-adjacent distinct labels."""
    a = np.concatenate([seg[:, :-1].ravel(), seg[:-1, :].ravel()])
    b = np.concatenate([seg[:, 1:].ravel(), seg[1:, :].ravel()])
    diff = a != b
    lo = np.minimum(a[diff], b[diff])
    hi = np.maximum(a[diff], b[diff])
    if lo.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(np.stack([lo, hi], 1), axis=0)


def connected_regions(seg):
    """Label 4-connected components of equal ids, numbered by first raster pixel."""
    h, w = seg.shape
    idx = np.arange(h * w).reshape(h, w)
    rows = [idx[:, :-1][seg[:, :-1] == seg[:, 1:]], idx[:-1, :][seg[:-1, :] == seg[1:, :]]]
    cols = [idx[:, 1:][seg[:, :-1] == seg[:, 1:]], idx[1:, :][seg[:-1, :] == seg[1:, :]]]
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(r.size, dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    return relabel_sequential(comp.reshape(h, w))


def enforce_connectivity(seg, image=None):
    """Split segments into 4-connected pieces and absorb undersized pieces.

    A piece smaller than ``w*h / (4*num_segments)`` joins one of its
    4-neighbouring pieces. Without ``image`` that is the largest neighbour;
    with ``image`` it is the neighbour of closest mean CIELAB colour, which
    keeps background slivers from being swallowed by an adjacent object.
    Ties go to the larger piece, then the lower id. Pieces are visited in
    order of first raster pixel.
    """
    segments = seg.segments if isinstance(seg, SegmentMap) else np.asarray(seg)
    n_in = len(np.unique(segments))
    comp = connected_regions(segments)
    min_size = segments.size / (4 * n_in)
    sizes = np.bincount(comp.ravel()).astype(np.int64)
    n = len(sizes)
    parent = np.arange(n)
    if image is not None:
        if (image.height, image.width) != segments.shape:
            raise ValueError("image and segment map dimensions differ")
        lab = rgb_to_lab(image).reshape(-1, 3)
        sums = np.stack([np.bincount(comp.ravel(), weights=lab[:, c], minlength=n) for c in range(3)], 1)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    small = [i for i in range(n) if sizes[i] < min_size]
    if small and n > 1:
        nbrs = [set() for _ in range(n)]
        for a, b in _adjacent_pairs(comp):
            nbrs[a].add(int(b))
            nbrs[b].add(int(a))
        for i in small:
            ri = find(i)
            if sizes[ri] >= min_size:
                continue
            cands = {find(j) for j in nbrs[ri]} - {ri}
            if not cands:
                continue
            if image is None:
                target = min(cands, key=lambda r: (-sizes[r], r))
            else:
                mean = sums[ri] / sizes[ri]
                target = min(cands, key=lambda r: (float(((sums[r] / sizes[r] - mean) ** 2).sum()), -sizes[r], r))
                sums[target] += sums[ri]
            parent[ri] = target
            sizes[target] += sizes[ri]
            nbrs[target] |= nbrs[ri]
        roots = np.array([find(i) for i in range(n)])
        comp = roots[comp]
    return SegmentMap(relabel_sequential(comp))


def merge_to_cap(image, seg, q):
    """Greedily merge segments until at most ``q`` remain.

    Each step takes the smallest segment (lowest id on ties) and merges it
    into the 4-adjacent segment whose mean CIELAB colour is closest (lowest
    id on ties); the merged region keeps the neighbour's id. Ids are
    compacted in ascending order at the end.
    """
    if q < 2:
        raise ValueError("q must be >= 2")
    if seg.num_segments <= q:
        return seg
    lab = rgb_to_lab(image).reshape(-1, 3)
    labels = seg.segments.ravel()
    n = seg.num_segments
    size = np.bincount(labels, minlength=n).astype(np.int64)
    lab_sum = np.stack([np.bincount(labels, weights=lab[:, c], minlength=n) for c in range(3)], 1)
    nbrs = [set() for _ in range(n)]
    for a, b in _adjacent_pairs(seg.segments):
        nbrs[a].add(int(b))
        nbrs[b].add(int(a))
    alive = np.ones(n, dtype=bool)
    into = np.arange(n)
    heap = [(int(size[i]), i) for i in range(n)]
    heapq.heapify(heap)
    remaining = n
    while remaining > q:
        s, i = heapq.heappop(heap)
        if not alive[i] or s != size[i]:
            continue
        mean_i = lab_sum[i] / size[i]
        target = min(nbrs[i], key=lambda j: (float(((lab_sum[j] / size[j] - mean_i) ** 2).sum()), j))
        alive[i] = False
        into[i] = target
        size[target] += size[i]
        lab_sum[target] += lab_sum[i]
        for j in nbrs[i]:
            nbrs[j].discard(i)
            if j != target:
                nbrs[j].add(target)
                nbrs[target].add(j)
        nbrs[i] = set()
        remaining -= 1
        heapq.heappush(heap, (int(size[target]), target))
    final = np.arange(n)
    for i in range(n):
        r = i
        while into[r] != r:
            r = into[r]
        final[i] = r
    keep = np.flatnonzero(alive)
    compact = np.zeros(n, dtype=np.int32)
    compact[keep] = np.arange(len(keep), dtype=np.int32)
    return SegmentMap(compact[final][seg.segments])


def flatten(image, seg):
    """Replace every pixel by its segment's mean RGB (rounded half up)."""
    if seg.segments.shape != image.data.shape[:2]:
        raise ValueError("segment map and image dimensions differ")
    labels = seg.segments.ravel()
    n = seg.num_segments
    rgb = image.data.reshape(-1, 3).astype(np.int64)
    counts = np.bincount(labels, minlength=n).astype(np.int64)
    out = np.empty((n, 3), dtype=np.int64)
    for c in range(3):
        sums = np.bincount(labels, weights=rgb[:, c], minlength=n).astype(np.int64)
        out[:, c] = (2 * sums + counts) // (2 * np.maximum(counts, 1))
    return RasterImage(out[labels].reshape(image.data.shape).astype(np.uint8))


def simplify(image, params=SimplifyParams()):
    """Over-segment with the configured method, then merge down to ``q``."""
    if params.method == "slic":
        seg = slic(image, params)
    else:
        seg = quickshift(image, params)
    seg = enforce_connectivity(seg, image)
    return merge_to_cap(image, seg, params.q)


# -- serialisation --------------------------------------------------------------

def save_segment_map(seg, path):
    """PGM when ids fit a byte, otherwise a SEG1 little-endian uint32 raster."""
    if seg.num_segments <= 255:
        save_pgm(seg.segments.astype(np.uint8), path)
    else:
        header = f"SEG1 {seg.width} {seg.height}\n".encode("ascii")
        atomic_write_bytes(path, header + seg.segments.astype("<u4").tobytes())


def load_segment_map(path):
    buf = Path(path).read_bytes()
    if buf[:2] == b"P5":
        return SegmentMap(load_pgm(path).astype(np.int32))
    if not buf.startswith(b"SEG1 "):
        raise FormatError("wrong magic, expected P5 or SEG1", 0)
    nl = buf.find(b"\n")
    try:
        w, h = (int(t) for t in buf[5:nl].split())
    except ValueError:
        raise FormatError("bad SEG1 header", 5) from None
    payload = buf[nl + 1:]
    if len(payload) != 4 * w * h:
        raise FormatError(f"size mismatch: {len(payload)} bytes, expected {4 * w * h}", nl + 1)
    return SegmentMap(np.frombuffer(payload, dtype="<u4").reshape(h, w).astype(np.int32))
