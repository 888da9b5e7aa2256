"""Perimeter-guided pruning of thresholded class activation maps.

A perimeter map splits the image into target clusters: 4-connected regions
of non-edge pixels. Any cluster that contains a background pixel of the
thresholded CAM is cleared entirely, so only foreground fully enclosed by
perimeter edges survives.
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .edges import CannyParams, canny
from .imagecore import BACKGROUND, IGNORE, LabelMap, PerimeterMap
from .superpixels import SimplifyParams, flatten, simplify

FUSIONS = ("union", "intersection", "slic_only", "quick_only")

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class RefineParams:
    threshold_slic: float = 0.15
    threshold_quick: float = 0.15
    fusion: str = "union"

    def __post_init__(self):
        for name in ("threshold_slic", "threshold_quick"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")

    def to_dict(self):
        return asdict(self)


def _edge_array(pm):
    if isinstance(pm, PerimeterMap):
        return pm.edges
    arr = np.asarray(pm)
    if arr.dtype == bool:
        return arr
    return arr == 255


def threshold_cam(plane, t):
    """Foreground iff score > t."""
    if not 0 < t < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return np.asarray(plane) > t


def build_perimeter_map(image, simplify_params=SimplifyParams(), canny_params=CannyParams()):
    seg = simplify(image, simplify_params)
    return canny(flatten(image, seg), canny_params)


def _check_shapes(mask, edges, plane):
    if not (mask.shape == edges.shape == np.shape(plane)):
        raise ValueError(f"shape mismatch: mask {mask.shape}, perimeter {edges.shape}, plane {np.shape(plane)}")


def _seeds(mask, plane, t):
    return ~mask | (np.asarray(plane) <= t)


def refine_class(mask, pm, plane, t):
    """Clear every target cluster that holds a background seed.

    Seeds are pixels that are background in ``mask`` or score <= ``t``.
    Edge pixels are labelled afterwards: foreground iff strictly more of
    their in-image, non-edge 8-neighbours ended up foreground than background.
    """
    mask = np.asarray(mask, dtype=bool)
    edges = _edge_array(pm)
    _check_shapes(mask, edges, plane)
    open_ = ~edges
    clusters, n = ndimage.label(open_, structure=_FOUR)
    poisoned = np.zeros(n + 1, dtype=bool)
    poisoned[clusters[_seeds(mask, plane, t) & open_]] = True
    poisoned[0] = True
    out = ~poisoned[clusters]

    if edges.any():
        fg = np.pad(out & open_, 1).astype(np.int32)
        bg = np.pad(~out & open_, 1).astype(np.int32)
        h, w = out.shape
        n_fg = sum(fg[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)
        n_bg = sum(bg[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)
        out = np.where(edges, n_fg > n_bg, out)
    return out


def floodfill_reference(mask, pm, plane, t):
    """Queue-based flood fill from every seed through non-edge 4-neighbours.

    Reference implementation used for differential testing; edge pixels keep
    their input mask value.
    """
    mask = np.asarray(mask, dtype=bool)
    edges = _edge_array(pm)
    _check_shapes(mask, edges, plane)
    h, w = mask.shape
    blocked = edges.ravel().tolist()
    out = mask.ravel().tolist()
    visited = [False] * (h * w)
    seeds = np.flatnonzero((_seeds(mask, plane, t) & ~edges).ravel()).tolist()
    queue = deque()
    for s in seeds:
        if not visited[s]:
            visited[s] = True
            queue.append(s)
        while queue:
            i = queue.popleft()
            out[i] = False
            y, x = divmod(i, w)
            for j, ok in ((i - w, y > 0), (i + w, y < h - 1), (i - 1, x > 0), (i + 1, x < w - 1)):
                if ok and not visited[j] and not blocked[j]:
                    visited[j] = True
                    queue.append(j)
    return np.array(out, dtype=bool).reshape(h, w)


def fuse(m_slic, m_quick, fusion):
    if fusion == "union":
        return m_slic | m_quick
    if fusion == "intersection":
        return m_slic & m_quick
    if fusion == "slic_only":
        return m_slic.copy()
    if fusion == "quick_only":
        return m_quick.copy()
    raise ValueError(f"unknown fusion {fusion!r}")


def refine_masks(scores, pm_slic, pm_quick, params=RefineParams()):
    """Fused foreground mask per class plane, shape (num_classes, h, w)."""
    out = np.zeros(scores.planes.shape, dtype=bool)
    for i, plane in enumerate(scores.planes):
        m_s = m_q = None
        if params.fusion != "quick_only":
            m_s = refine_class(threshold_cam(plane, params.threshold_slic), pm_slic, plane, params.threshold_slic)
        if params.fusion != "slic_only":
            m_q = refine_class(threshold_cam(plane, params.threshold_quick), pm_quick, plane, params.threshold_quick)
        out[i] = fuse(m_s if m_s is not None else m_q, m_q if m_q is not None else m_s, params.fusion)
    return out


def masks_to_labels(scores, masks):
    """Per pixel, the class with the highest raw score among those whose mask is set."""
    for cid in scores.class_ids:
        if cid in (BACKGROUND, IGNORE):
            raise ValueError(f"class id {cid} collides with reserved background/ignore id")
    masked = np.where(masks, scores.planes, -np.inf)
    best = np.argmax(masked, axis=0)
    ids = np.asarray(scores.class_ids, dtype=np.uint8)
    labels = np.where(masks.any(axis=0), ids[best], BACKGROUND)
    return LabelMap(labels.astype(np.uint8))


def refine_multiclass(scores, pm_slic, pm_quick, params=RefineParams()):
    for cid in scores.class_ids:
        if cid in (BACKGROUND, IGNORE):
            raise ValueError(f"class id {cid} collides with reserved background/ignore id")
    for pm in (pm_slic, pm_quick):
        if pm is not None and _edge_array(pm).shape != (scores.height, scores.width):
            raise ValueError("perimeter map dimensions do not match score map")
    return masks_to_labels(scores, refine_masks(scores, pm_slic, pm_quick, params))


def threshold_multiclass(scores, t):
    """Unrefined baseline: argmax over classes scoring above ``t``."""
    masks = np.stack([threshold_cam(p, t) for p in scores.planes])
    return masks_to_labels(scores, masks)
