"""Per-image batch helpers; results always come back in input order."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .edges import CannyParams
from .imagecore import load_ppm, load_smf
from .perimeterfit import RefineParams, build_perimeter_map, refine_multiclass
from .superpixels import SimplifyParams, simplify


def map_ordered(fn, items, workers=1):
    """``list(map(fn, items))``, optionally fanned out over processes."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _simplify_job(args):
    image, params = args
    return simplify(image, params)


def simplify_batch(images, params=SimplifyParams(), workers=1):
    return map_ordered(_simplify_job, [(img, params) for img in images], workers)


def perimeter_pair(image, fusion, simplify_slic, simplify_quick, canny_params):
    """Perimeter maps needed by ``fusion``; the unused variant is None."""
    pm_s = pm_q = None
    if fusion != "quick_only":
        pm_s = build_perimeter_map(image, simplify_slic, canny_params)
    if fusion != "slic_only":
        pm_q = build_perimeter_map(image, simplify_quick, canny_params)
    return pm_s, pm_q


def refine_image(image, scores, refine_params=RefineParams(), simplify_slic=None, simplify_quick=None,
                 canny_params=CannyParams()):
    simplify_slic = simplify_slic or SimplifyParams(method="slic")
    simplify_quick = simplify_quick or SimplifyParams(method="quickshift")
    pm_s, pm_q = perimeter_pair(image, refine_params.fusion, simplify_slic, simplify_quick, canny_params)
    return refine_multiclass(scores, pm_s if pm_s is not None else pm_q,
                             pm_q if pm_q is not None else pm_s, refine_params)


def _refine_job(args):
    entry, refine_params, simplify_slic, simplify_quick, canny_params = args
    image = load_ppm(entry.image_path)
    scores = load_smf(entry.score_path)
    return refine_image(image, scores, refine_params, simplify_slic, simplify_quick, canny_params)


def refine_manifest(entries, refine_params, simplify_slic, simplify_quick, canny_params, workers=1):
    jobs = [(e, refine_params, simplify_slic, simplify_quick, canny_params) for e in entries]
    return map_ordered(_refine_job, jobs, workers)
