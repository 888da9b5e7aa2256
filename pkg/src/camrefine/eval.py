"""Segmentation metrics, class-wise reports and threshold grid search."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .edges import CannyParams
from .imagecore import IGNORE, LabelMap, load_label_map, load_ppm, load_smf
from .perimeterfit import FUSIONS, RefineParams, build_perimeter_map, refine_multiclass
from .superpixels import SimplifyParams

OBJECTIVES = ("miou", "neg_m_fp")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """counts[i, j] = number of pixels with ground truth i predicted as j."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 1:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("negative count")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @classmethod
    def zeros(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def _labels(x):
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def accumulate(cm, gt, pred):
    """Return ``cm`` plus the counts of one (gt, pred) pair; ignore pixels are skipped."""
    g = _labels(gt).ravel().astype(np.int64)
    p = _labels(pred).ravel().astype(np.int64)
    if _labels(gt).shape != _labels(pred).shape:
        raise ValueError("gt and prediction dimensions differ")
    C = cm.num_classes
    keep = g != IGNORE
    g, p = g[keep], p[keep]
    for name, arr in (("gt", g), ("prediction", p)):
        bad = (arr < 0) | (arr >= C)
        if bad.any():
            raise ValueError(f"{name} label {arr[bad][0]} out of range for {C} classes")
    counts = np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(cm.counts + counts)


def miou(cm):
    """Per-class IoU (nan where undefined) and their mean over defined classes."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(1) + c.sum(0) - tp
    defined = denom > 0
    if not defined.any():
        raise ValueError("every class has an empty union; mIoU undefined")
    iou = np.full(cm.num_classes, np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return iou, float(iou[defined].mean())


class Overactivation(NamedTuple):
    m_fp: float
    m_fn: float


def _fp_fn_ratios(cm):
    c = cm.counts
    tp = np.diag(c)[1:].astype(np.float64)
    fp = c.sum(0)[1:] - np.diag(c)[1:]
    fn = c.sum(1)[1:] - np.diag(c)[1:]
    return tp, fp, fn


def overactivation(cm, zero_tp="exclude"):
    """Mean FP/TP and FN/TP over foreground classes (background excluded).

    Classes with TP == 0 are dropped from the mean when ``zero_tp`` is
    "exclude"; a number instead is used as that class's contribution.
    """
    if cm.num_classes < 2:
        raise ValueError("need at least one foreground class")
    tp, fp, fn = _fp_fn_ratios(cm)
    ok = tp > 0
    if zero_tp == "exclude":
        if not ok.any():
            raise ValueError("every foreground class has zero true positives")
        return Overactivation(float((fp[ok] / tp[ok]).mean()), float((fn[ok] / tp[ok]).mean()))
    sentinel = float(zero_tp)
    r_fp = np.where(ok, fp / np.where(ok, tp, 1), sentinel)
    r_fn = np.where(ok, fn / np.where(ok, tp, 1), sentinel)
    return Overactivation(float(r_fp.mean()), float(r_fn.mean()))


def zero_tp_classes(cm):
    tp = np.diag(cm.counts)[1:]
    return [i + 1 for i in np.flatnonzero(tp == 0).tolist()]


class Decomposition(NamedTuple):
    epsilon: float
    fp_count: int
    defined: bool


def decompose_prediction(gt, pred):
    """Split a binary prediction into the covered share of gt and the false positives."""
    gt = np.asarray(gt, dtype=bool)
    pred = np.asarray(pred, dtype=bool)
    if gt.shape != pred.shape:
        raise ValueError("gt and prediction dimensions differ")
    n_gt = int(gt.sum())
    fp = int((pred & ~gt).sum())
    if n_gt == 0:
        return Decomposition(0.0, fp, False)
    return Decomposition(int((pred & gt).sum()) / n_gt, fp, True)


def foreground_decomposition(gt, pred):
    """Decomposition over the union of foreground classes, ignore pixels dropped."""
    g = _labels(gt)
    p = _labels(pred)
    valid = g != IGNORE
    return decompose_prediction((g > 0) & valid, (p > 0) & (p != IGNORE) & valid)


# -- reporting ---------------------------------------------------------------------

def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


@dataclass
class MetricsReport:
    class_names: list
    per_class_iou: list
    miou: float
    m_fp: float | None
    m_fn: float | None
    epsilon_mean: float | None = None
    fp_count_mean: float | None = None
    undefined_classes: list = None
    zero_tp_classes: list = None

    def to_dict(self):
        d = asdict(self)
        d["per_class_iou"] = [_nan_to_none(v) for v in self.per_class_iou]
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["per_class_iou"] = [math.nan if v is None else v for v in d["per_class_iou"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, MetricsReport) and self.to_dict() == other.to_dict()


def format_table(report):
    width = max(6, max(len(n) for n in report.class_names))
    lines = [f"{'class':<{width}}  {'IoU':>6}", "-" * (width + 8)]
    for name, v in zip(report.class_names, report.per_class_iou):
        val = "   n/a" if math.isnan(v) else f"{100 * v:6.1f}"
        lines.append(f"{name:<{width}}  {val}")
    lines.append("-" * (width + 8))
    lines.append(f"{'mIoU':<{width}}  {100 * report.miou:6.1f}")
    if report.m_fp is not None:
        lines.append(f"{'m_FP':<{width}}  {report.m_fp:6.3f}")
        lines.append(f"{'m_FN':<{width}}  {report.m_fn:6.3f}")
    return "\n".join(lines) + "\n"


def report(cm, class_names, decompositions=()):
    """Build a MetricsReport and its text table from a pooled confusion matrix."""
    class_names = list(class_names)
    if len(class_names) != cm.num_classes:
        raise ValueError(f"{len(class_names)} names for {cm.num_classes} classes")
    iou, mean = miou(cm)
    try:
        m_fp, m_fn = overactivation(cm)
    except ValueError:
        m_fp = m_fn = None
    defined = [d for d in decompositions if d.defined]
    rep = MetricsReport(
        class_names=class_names,
        per_class_iou=[float(v) for v in iou],
        miou=mean,
        m_fp=m_fp,
        m_fn=m_fn,
        epsilon_mean=float(np.mean([d.epsilon for d in defined])) if defined else None,
        fp_count_mean=float(np.mean([d.fp_count for d in decompositions])) if decompositions else None,
        undefined_classes=[class_names[i] for i in np.flatnonzero(np.isnan(iou))],
        zero_tp_classes=[class_names[i] for i in zero_tp_classes(cm)] if cm.num_classes > 1 else [],
    )
    return rep, format_table(rep)


# -- grid search ---------------------------------------------------------------------

class PerimeterCache:
    """Perimeter maps computed once per (image id, simplify params, canny params)."""

    def __init__(self, canny_params=CannyParams()):
        self.canny_params = canny_params
        self._store = {}
        self.misses = 0

    def get(self, image_id, image, simplify_params, canny_params=None):
        canny_params = canny_params or self.canny_params
        key = (image_id, simplify_params, canny_params)
        if key not in self._store:
            self.misses += 1
            self._store[key] = build_perimeter_map(image, simplify_params, canny_params)
        return self._store[key]

    def put(self, image_id, simplify_params, canny_params, pm):
        self._store[(image_id, simplify_params, canny_params)] = pm

    def __len__(self):
        return len(self._store)


def parse_range(text):
    """'a:b:step' -> inclusive list of floats; a bare number is a single point."""
    parts = text.split(":")
    if len(parts) == 1:
        return [float(parts[0])]
    if len(parts) != 3:
        raise ValueError(f"range must be a:b:step, got {text!r}")
    a, b, step = (float(p) for p in parts)
    if step <= 0:
        raise ValueError("step must be positive")
    if b < a:
        raise ValueError("empty range")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 10) for i in range(n)]


@dataclass
class GridSearchResult:
    grid: list
    best: dict
    objective: str

    def to_dict(self):
        return {"objective": self.objective, "best": self.best, "grid": self.grid}


def _objective_value(cm, objective):
    if objective == "miou":
        return miou(cm)[1]
    if objective == "neg_m_fp":
        try:
            return -overactivation(cm).m_fp
        except ValueError:
            return -math.inf
    raise ValueError(f"unknown objective {objective!r}")


def grid_search(manifest, pm_cache, t_slic_range, t_quick_range, fusions=("union",), objective="miou",
                simplify_slic=None, simplify_quick=None, num_classes=None):
    """Evaluate refinement over the threshold/fusion grid against ground truth.

    Best entry maximises the objective; ties go to the lexicographically
    smallest (t_slic, t_quick, fusion).
    """
    t_slic_range = list(t_slic_range)
    t_quick_range = list(t_quick_range)
    fusions = list(fusions)
    if not (t_slic_range and t_quick_range and fusions):
        raise ValueError("grid ranges must be non-empty")
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    for f in fusions:
        if f not in FUSIONS:
            raise ValueError(f"unknown fusion {f!r}")
    simplify_slic = simplify_slic or SimplifyParams(method="slic")
    simplify_quick = simplify_quick or SimplifyParams(method="quickshift")

    data = []
    for entry in manifest:
        if entry.gt_path is None:
            raise ValueError(f"entry {entry.id!r} has no ground truth")
        image = load_ppm(entry.image_path)
        scores = load_smf(entry.score_path)
        gt = load_label_map(entry.gt_path)
        need_s = any(f != "quick_only" for f in fusions)
        need_q = any(f != "slic_only" for f in fusions)
        pm_s = pm_cache.get(entry.id, image, simplify_slic) if need_s else None
        pm_q = pm_cache.get(entry.id, image, simplify_quick) if need_q else None
        data.append((scores, gt, pm_s, pm_q))

    if num_classes is None:
        top = 0
        for scores, gt, _, _ in data:
            valid = gt.labels[gt.labels != IGNORE]
            top = max(top, max(scores.class_ids), int(valid.max()) if valid.size else 0)
        num_classes = top + 1

    grid = []
    for ts, tq, fusion in itertools.product(t_slic_range, t_quick_range, fusions):
        params = RefineParams(ts, tq, fusion)
        cm = ConfusionMatrix.zeros(num_classes)
        for scores, gt, pm_s, pm_q in data:
            pred = refine_multiclass(scores, pm_s if pm_s is not None else pm_q,
                                     pm_q if pm_q is not None else pm_s, params)
            cm = accumulate(cm, gt, pred)
        grid.append({"t_slic": ts, "t_quick": tq, "fusion": fusion,
                     "objective_value": _objective_value(cm, objective)})
    best = min(grid, key=lambda g: (-g["objective_value"], g["t_slic"], g["t_quick"], g["fusion"]))
    return GridSearchResult(grid=grid, best=best, objective=objective)
