"""Seeded synthetic corpus: textured backgrounds, solid shapes as ground truth
and simulated CAMs (blurred ground truth plus off-object distractor blobs)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .edges import LUMA, gaussian_blur
from .imagecore import (LabelMap, ManifestEntry, RasterImage, ScoreMap, save_label_map,
                        save_manifest, save_ppm, save_smf)

SHAPES = ("disk", "rectangle", "triangle")
CAM_MODELS = ("blur", "bimodal")


@dataclass(frozen=True)
class SynthSpec:
    image_count: int = 10
    image_size: int = 128
    min_shapes: int = 1
    max_shapes: int = 3
    texture_amplitude: float = 10.0
    cam_blur_sigma: float = 4.0
    distractor_blob_count: int = 2
    rng_seed: int = 0
    cam_model: str = "blur"
    num_dataset_classes: int = 20

    def __post_init__(self):
        if self.image_count < 1 or self.image_size < 32:
            raise ValueError("need image_count >= 1 and image_size >= 32")
        if not 1 <= self.min_shapes <= self.max_shapes <= 3:
            raise ValueError("shape count must lie in 1..3")
        if self.cam_model not in CAM_MODELS:
            raise ValueError(f"cam_model must be one of {CAM_MODELS}")
        if self.texture_amplitude < 0 or self.cam_blur_sigma < 0 or self.distractor_blob_count < 0:
            raise ValueError("amplitudes, sigma and blob count must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SynthSample:
    id: str
    image: RasterImage
    gt: LabelMap
    scores: ScoreMap


def _shape_mask(kind, cy, cx, r, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        ry = r * rng.uniform(0.6, 1.0)
        rx = r * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    # isosceles triangle pointing up, inscribed in the radius-r circle
    top = cy - r
    base = cy + r * 0.6
    half = (yy - top) / (base - top) * r
    return (yy >= top) & (yy <= base) & (np.abs(xx - cx) <= half)


def _luma(c):
    return float(np.dot(c, LUMA))


def _contrasting_color(rng, background, others, bg_gap=60, shape_gap=20):
    # contrast is measured in luma because that is what the edge detector sees
    for _ in range(1000):
        c = rng.integers(0, 256, size=3)
        if abs(_luma(c) - _luma(background)) >= bg_gap and all(
                abs(_luma(c) - _luma(o)) >= shape_gap for o in others):
            return c
    raise RuntimeError("could not draw a contrasting colour")


def generate_sample(spec, index):
    rng = np.random.default_rng([spec.rng_seed, index])
    n = spec.image_size
    h = w = n
    bg_color = rng.integers(50, 206, size=3)
    noise = rng.uniform(-spec.texture_amplitude, spec.texture_amplitude, size=(h, w, 3))
    img = np.clip(np.rint(bg_color + noise), 0, 255)

    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    r_lo, r_hi = 0.14 * n, 0.22 * n
    placed = []
    for _ in range(200):
        if len(placed) == n_shapes:
            break
        r = rng.uniform(r_lo, r_hi)
        cy, cx = rng.uniform(r + 2, n - r - 2, size=2)
        if all(np.hypot(cy - py, cx - px) > r + pr + 4 for py, px, pr in placed):
            placed.append((cy, cx, r))
    class_ids = rng.choice(np.arange(1, spec.num_dataset_classes + 1), size=len(placed), replace=False)

    gt = np.zeros((h, w), dtype=np.uint8)
    colors = []
    for (cy, cx, r), cid in zip(placed, class_ids):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        m = _shape_mask(kind, cy, cx, r, h, w, rng)
        color = _contrasting_color(rng, bg_color, colors)
        colors.append(color)
        img[m] = color
        gt[m] = cid

    ids = sorted(int(c) for c in class_ids)
    planes = []
    for cid in ids:
        fg = (gt == cid).astype(np.float64)
        if spec.cam_model == "bimodal":
            p = np.where(fg > 0, 0.8, 0.2) + rng.uniform(-0.05, 0.05, size=(h, w))
        elif spec.cam_blur_sigma > 0:
            p = gaussian_blur(fg, spec.cam_blur_sigma)
            p = p / p.max()
        else:
            p = fg
        planes.append(p)

    if spec.cam_model == "blur" and spec.distractor_blob_count:
        yy, xx = np.mgrid[0:h, 0:w]
        obj = gt > 0
        dist = _distance_to(obj)
        for _ in range(spec.distractor_blob_count):
            sigma = rng.uniform(3.0, 5.0)
            peak = rng.uniform(0.6, 0.9)
            # blob centre far enough that its > 0.1 footprint stays off-object
            clearance = sigma * np.sqrt(2 * np.log(peak / 0.1)) + spec.cam_blur_sigma * 2 + 3
            ok = np.argwhere(dist > clearance)
            if len(ok) == 0:
                continue
            by, bx = ok[int(rng.integers(len(ok)))]
            blob = peak * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
            k = int(rng.integers(len(planes)))
            planes[k] = np.maximum(planes[k], blob)

    planes = np.clip(np.stack(planes), 0.0, 1.0).astype(np.float32)
    return SynthSample(
        id=f"synth_{index:04d}",
        image=RasterImage(img.astype(np.uint8)),
        gt=LabelMap(gt),
        scores=ScoreMap(planes, tuple(ids)),
    )


def _distance_to(mask):
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return distance_transform_edt(~mask)


def generate(spec):
    return [generate_sample(spec, i) for i in range(spec.image_count)]


def write_corpus(spec, outdir):
    """Write images, ground truth, score maps and ``manifest.json`` under ``outdir``."""
    outdir = Path(outdir)
    for sub in ("images", "gt", "scores"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in generate(spec):
        img_p = outdir / "images" / f"{s.id}.ppm"
        gt_p = outdir / "gt" / f"{s.id}.pgm"
        sc_p = outdir / "scores" / f"{s.id}.smf"
        save_ppm(s.image, img_p)
        save_label_map(s.gt, gt_p)
        save_smf(s.scores, sc_p)
        entries.append(ManifestEntry(s.id, img_p, sc_p, gt_p, s.scores.class_ids))
    manifest = outdir / "manifest.json"
    save_manifest(entries, manifest)
    return manifest
