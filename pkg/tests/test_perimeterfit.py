import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import distance_transform_edt

from camrefine.edges import CannyParams
from camrefine.imagecore import PerimeterMap, RasterImage, ScoreMap
from camrefine.perimeterfit import (RefineParams, build_perimeter_map, floodfill_reference, fuse,
                                    refine_class, refine_masks, refine_multiclass, threshold_cam,
                                    threshold_multiclass)
from camrefine.superpixels import SimplifyParams
from conftest import disk_image, solid
from oracles import components4, floodfill_clear


def refine_oracle(mask, edges, plane, t):
    """Connected-component formulation written with BFS labelling and loops."""
    lab, n = components4(~edges)
    seed = ~mask | (plane <= t)
    poisoned = {lab[y, x] for y, x in zip(*np.nonzero(seed & ~edges))}
    out = np.zeros_like(mask)
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if not edges[y, x]:
                out[y, x] = lab[y, x] not in poisoned
    res = out.copy()
    for y, x in zip(*np.nonzero(edges)):
        fg = bg = 0
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if (dy or dx) and 0 <= ny < h and 0 <= nx < w and not edges[ny, nx]:
                    fg += out[ny, nx]
                    bg += not out[ny, nx]
        res[y, x] = fg > bg
    return res


def ring_fixture(n=32, radius=10):
    yy, xx = np.mgrid[0:n, 0:n]
    inside = (yy - n / 2) ** 2 + (xx - n / 2) ** 2 <= radius ** 2
    pad = np.pad(inside, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    ring = inside & ~interior
    return inside, ring


def test_params_validation():
    with pytest.raises(ValueError):
        RefineParams(threshold_slic=0)
    with pytest.raises(ValueError):
        RefineParams(threshold_quick=1)
    with pytest.raises(ValueError):
        RefineParams(fusion="average")


def test_threshold_cam():
    assert threshold_cam(np.ones((2, 2)), 0.99).all()
    assert not threshold_cam(np.zeros((2, 2)), 0.01).any()
    assert threshold_cam(np.array([0.3, 0.5, 0.7]), 0.5).tolist() == [False, False, True]
    with pytest.raises(ValueError):
        threshold_cam(np.zeros(3), 1.0)


def test_refine_empty_perimeter():
    empty = np.zeros((6, 6), dtype=bool)
    plane = np.full((6, 6), 0.9)
    assert refine_class(plane > 0.5, empty, plane, 0.5).all()
    plane[4, 1] = 0.2
    assert not refine_class(plane > 0.5, empty, plane, 0.5).any()
    assert not floodfill_reference(plane > 0.5, empty, plane, 0.5).any()


def test_refine_ring_keeps_interior():
    inside, ring = ring_fixture()
    plane = np.full(inside.shape, 0.9)
    plane[0:3, 0:3] = 0.1  # background seeds outside the ring
    mask = threshold_cam(plane, 0.5)
    out = refine_class(mask, PerimeterMap(np.where(ring, 255, 0).astype(np.uint8)), plane, 0.5)
    assert np.array_equal(out, refine_oracle(mask, ring, plane, 0.5))
    assert out[inside & ~ring].all()
    assert not out[~inside].any()
    assert not out[ring & ~inside].any()


def test_refine_straddling_blob():
    inside, ring = ring_fixture()
    plane = np.full(inside.shape, 0.1)
    yy, xx = np.mgrid[0:32, 0:32]
    blob = (yy - 16) ** 2 + (xx - 26) ** 2 <= 36  # crosses the ring on the right
    plane[blob | inside] = 0.8
    mask = threshold_cam(plane, 0.5)
    out = refine_class(mask, ring, plane, 0.5)
    assert np.array_equal(out, refine_oracle(mask, ring, plane, 0.5))
    assert not out[blob & ~inside].any()
    assert out[blob & inside & ~ring].all()


def test_refine_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        refine_class(np.zeros((3, 3), bool), np.zeros((3, 4), bool), np.zeros((3, 3)), 0.5)


@st.composite
def triples(draw, max_side=14):
    h = draw(st.integers(1, max_side))
    w = draw(st.integers(1, max_side))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    plane = rng.random((h, w))
    edges = rng.random((h, w)) < draw(st.floats(0.0, 0.6))
    return plane, edges


@settings(max_examples=150, deadline=None)
@given(triples(), st.floats(0.05, 0.95))
def test_flood_fill_equivalence(triple, t):
    plane, edges = triple
    mask = threshold_cam(plane, t)
    out = refine_class(mask, edges, plane, t)
    ref = floodfill_reference(mask, edges, plane, t)
    dfs = floodfill_clear(mask, edges, ~mask)  # independent DFS
    open_ = ~edges
    assert np.array_equal(out[open_], ref[open_])
    assert np.array_equal(out[open_], dfs[open_])
    assert np.array_equal(out, refine_oracle(mask, edges, plane, t))
    # shrink-only on non-edge pixels
    assert not (out & ~mask & open_).any()


@settings(max_examples=60, deadline=None)
@given(triples(), st.floats(0.05, 0.9), st.floats(0.0, 0.09))
def test_monotone_in_threshold(triple, t, dt):
    plane, edges = triple
    lo = refine_class(threshold_cam(plane, t), edges, plane, t)
    hi = refine_class(threshold_cam(plane, t + dt), edges, plane, t + dt)
    assert not (hi & ~lo & ~edges).any()


@settings(max_examples=60, deadline=None)
@given(triples(), st.floats(0.05, 0.95))
def test_poisoning_law(triple, t):
    plane, edges = triple
    mask = threshold_cam(plane, t)
    out = refine_class(mask, edges, plane, t)
    lab, n = components4(~edges)
    for c in range(n):
        region = lab == c
        assert out[region].all() == (not (~mask[region]).any())
        assert out[region].all() or not out[region].any()


def test_fusion_laws(rng):
    a = rng.random((8, 8)) < 0.5
    b = rng.random((8, 8)) < 0.5
    u, i = fuse(a, b, "union"), fuse(a, b, "intersection")
    assert (u >= a).all() and (u >= b).all()
    assert (i <= a).all() and (i <= b).all()
    assert np.array_equal(fuse(a, b, "slic_only"), a)
    assert np.array_equal(fuse(a, b, "quick_only"), b)
    with pytest.raises(ValueError):
        fuse(a, b, "xor")


def _scores(planes, ids):
    return ScoreMap(np.asarray(planes, dtype=np.float32), tuple(ids))


def test_multiclass_slic_only_matches_single_class():
    inside, ring = ring_fixture()
    plane = np.where(inside, 0.9, 0.1).astype(np.float32)
    plane[2, 2] = 0.7  # isolated false positive outside the ring
    pm = PerimeterMap(np.where(ring, 255, 0).astype(np.uint8))
    sm = _scores([plane], [5])
    labels = refine_multiclass(sm, pm, None, RefineParams(0.5, 0.5, "slic_only")).labels
    expect = refine_class(threshold_cam(plane, 0.5), pm, plane, 0.5)
    assert np.array_equal(labels, np.where(expect, 5, 0))
    assert labels[2, 2] == 0


def test_multiclass_argmax_and_disjoint():
    empty = PerimeterMap(np.zeros((1, 4), dtype=np.uint8))
    # no background seeds anywhere for either class: both masks keep all of the strip
    p1 = [[0.9, 0.9, 0.6, 0.6]]
    p2 = [[0.6, 0.8, 0.9, 0.6]]
    labels = refine_multiclass(_scores([p1, p2], [3, 7]), empty, empty, RefineParams(0.5, 0.5)).labels
    assert labels.tolist() == [[3, 3, 7, 3]]
    # disjoint masks after refinement: each class keeps its own region
    edges = PerimeterMap(np.array([[0, 255, 0, 0]], dtype=np.uint8))
    q1 = [[0.9, 0.2, 0.2, 0.2]]
    q2 = [[0.2, 0.2, 0.9, 0.9]]
    labels = refine_multiclass(_scores([q1, q2], [1, 2]), edges, edges, RefineParams(0.5, 0.5)).labels
    assert labels.tolist() == [[1, 0, 2, 2]]


def test_multiclass_reserved_and_shapes():
    pm = PerimeterMap(np.zeros((2, 2), dtype=np.uint8))
    for bad in (0, 255):
        with pytest.raises(ValueError, match="reserved"):
            refine_multiclass(_scores(np.zeros((1, 2, 2)), [bad]), pm, pm)
    with pytest.raises(ValueError, match="dimensions"):
        refine_multiclass(_scores(np.zeros((1, 2, 2)), [1]), PerimeterMap(np.zeros((3, 2), np.uint8)), pm)


def test_union_reduces_to_variants():
    sm = _scores(np.random.default_rng(3).random((2, 10, 10)), [1, 2])
    pm_a = PerimeterMap(np.where(np.eye(10, dtype=bool), 255, 0).astype(np.uint8))
    pm_b = PerimeterMap(np.zeros((10, 10), dtype=np.uint8))
    both = refine_masks(sm, pm_a, pm_b, RefineParams(0.3, 0.3, "union"))
    only_a = refine_masks(sm, pm_a, pm_b, RefineParams(0.3, 0.3, "slic_only"))
    only_b = refine_masks(sm, pm_a, pm_b, RefineParams(0.3, 0.3, "quick_only"))
    assert np.array_equal(both, only_a | only_b)


def test_build_perimeter_map_solid_is_empty():
    pm = build_perimeter_map(solid(24, 24, (100, 150, 200)), SimplifyParams(q=4, slic_k=16))
    assert not pm.edges.any()


@pytest.mark.parametrize("method", ["slic", "quickshift"])
def test_build_perimeter_map_disk_ring(method):
    img, inside = disk_image(64)
    pm = build_perimeter_map(img, SimplifyParams(method=method, q=8, slic_k=64))
    lab, _ = components4(~pm.edges)
    assert lab[32, 32] >= 0 and lab[0, 0] >= 0
    assert lab[32, 32] != lab[0, 0]  # closed: interior not 4-reachable from outside
    # edges hug the disk boundary
    boundary = inside ^ np.pad(inside, 1)[1:-1, 2:] | inside ^ np.pad(inside, 1)[2:, 1:-1]
    dist = distance_transform_edt(~boundary)
    assert dist[pm.edges].max() <= 1.5


def test_build_perimeter_map_three_colours_q2():
    data = np.zeros((16, 16, 3), dtype=np.uint8)
    data[:, :5] = (20, 20, 20)
    data[:, 5:11] = (30, 30, 30)
    data[:, 11:] = (230, 230, 230)
    pm = build_perimeter_map(RasterImage(data), SimplifyParams(q=2, slic_k=16), CannyParams())
    _, n = components4(~pm.edges)
    assert n == 2  # two merged regions leave one boundary line
    assert len(np.unique(np.nonzero(pm.edges)[1])) == 1


def test_end_to_end_disk_blob_removed():
    img, inside = disk_image(64)
    yy, xx = np.mgrid[0:64, 0:64]
    blob = np.exp(-((yy - 6) ** 2 + (xx - 6) ** 2) / (2 * 3.0 ** 2))
    plane = np.clip(np.where(inside, 0.9, 0.05) + 0.8 * blob, 0, 1).astype(np.float32)
    sm = _scores([plane], [4])
    sp_s = SimplifyParams(q=8, slic_k=64)
    sp_q = SimplifyParams(method="quickshift", q=8)
    pm_s, pm_q = build_perimeter_map(img, sp_s), build_perimeter_map(img, sp_q)
    refined = refine_multiclass(sm, pm_s, pm_q, RefineParams(0.3, 0.3)).labels
    raw = threshold_multiclass(sm, 0.3).labels
    assert (raw[0:10, 0:10] == 4).any()
    assert not (refined[0:12, 0:12] == 4).any()
    # off the perimeter the disk is labelled exactly; ring pixels follow the majority rule
    off = ~(pm_s.edges | pm_q.edges)
    assert np.array_equal((refined == 4)[off], inside[off])
    iou = ((refined == 4) & inside).sum() / ((refined == 4) | inside).sum()
    assert iou > 0.9
