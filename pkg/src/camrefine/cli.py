"""Command line front end.

Every subcommand writes its outputs through temp-file-and-rename and leaves
a JSON run header next to them recording the full configuration.
Precedence of settings: command line > ``--config`` file > defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .edges import CannyParams, canny
from .eval import (ConfusionMatrix, PerimeterCache, accumulate, foreground_decomposition, grid_search,
                   parse_range, report)
from .imagecore import (atomic_write_bytes, atomic_write_json, load_label_map, load_manifest, load_palette,
                        load_ppm, render_overlay, save_label_map, save_perimeter_map, save_ppm)
from .perimeterfit import FUSIONS, RefineParams, build_perimeter_map
from .pipeline import refine_manifest
from .superpixels import METHODS, SimplifyParams, flatten, save_segment_map, simplify
from .synth import CAM_MODELS, SynthSpec, write_corpus

log = logging.getLogger("camrefine")

SUBCOMMANDS = ("simplify", "edges", "perimeter", "refine", "eval", "gridsearch", "overlay", "synth")

DEFAULTS = {
    "workers": 1,
    "seed": 0,
    # simplification
    "method": "slic",
    "q": 32,
    "slic_k": 256,
    "slic_compactness": 10.0,
    "slic_iters": 10,
    "qs_kernel_size": 5.0,
    "qs_max_dist": 10.0,
    # canny
    "sigma": 1.4,
    "low": 0.1,
    "high": 0.2,
    "lab_l": False,
    # refinement
    "t_slic": RefineParams.threshold_slic,
    "t_quick": RefineParams.threshold_quick,
    "fusion": "union",
    # grid search
    "grid_t_slic": "0.1:0.9:0.1",
    "grid_t_quick": "0.1:0.9:0.1",
    "grid_fusion": "union",
    "objective": "miou",
    # synth
    "n": 10,
    "size": 128,
    "blur_sigma": 4.0,
    "blobs": 2,
    "texture": 10.0,
    "cam_model": "blur",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_simplify_args(p, with_method=True):
    g = p.add_argument_group("simplification")
    if with_method:
        g.add_argument("--method", choices=METHODS)
    g.add_argument("--q", type=int, help="maximum cluster count")
    g.add_argument("--slic-k", type=int)
    g.add_argument("--slic-compactness", type=float)
    g.add_argument("--slic-iters", type=int)
    g.add_argument("--qs-kernel-size", type=float)
    g.add_argument("--qs-max-dist", type=float)


def _add_canny_args(p):
    g = p.add_argument_group("edge detection")
    g.add_argument("--sigma", type=float)
    g.add_argument("--low", type=float, help="low hysteresis fraction of max magnitude")
    g.add_argument("--high", type=float, help="high hysteresis fraction of max magnitude")
    g.add_argument("--lab-l", action="store_true", default=argparse.SUPPRESS,
                   help="run on CIELAB L instead of luma")


def _add_refine_args(p):
    g = p.add_argument_group("refinement")
    g.add_argument("--t-slic", type=float)
    g.add_argument("--t-quick", type=float)
    g.add_argument("--fusion", choices=FUSIONS)


def build_parser():
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--workers", type=int, help="parallel worker processes (affects speed only)")
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file of option overrides")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="camrefine", description=__doc__.splitlines()[0],
                     argument_default=argparse.SUPPRESS, parents=[common])
    parser.add_argument("--version", action="version", version=f"camrefine {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], argument_default=argparse.SUPPRESS)

    p = add("simplify", "over-segment an image and merge down to q clusters")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="segment map (PGM, or SEG1 when > 255 segments)")
    p.add_argument("--flat", help="optional PPM of the mean-colour flattened image")
    _add_simplify_args(p)

    p = add("edges", "Canny edge map of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_canny_args(p)

    p = add("perimeter", "perimeter map: simplify, flatten, Canny")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_simplify_args(p)
    _add_canny_args(p)

    p = add("refine", "refine every manifest entry into a label map")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir", required=True)
    _add_simplify_args(p, with_method=False)
    _add_canny_args(p)
    _add_refine_args(p)

    p = add("eval", "score predicted label maps against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", required=True, help="JSON list of class names indexed by id")
    p.add_argument("--report", required=True)
    p.add_argument("--table")

    p = add("gridsearch", "grid search over refinement thresholds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--t-slic", dest="grid_t_slic", help="a:b:step")
    p.add_argument("--t-quick", dest="grid_t_quick", help="a:b:step")
    p.add_argument("--fusion", dest="grid_fusion", help="comma separated fusion modes")
    p.add_argument("--objective", choices=("miou", "neg_m_fp"))
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", required=True)
    _add_simplify_args(p, with_method=False)
    _add_canny_args(p)

    p = add("overlay", "blend a label map over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--palette", required=True, help='JSON {"class id": [r, g, b]}')
    p.add_argument("--out", required=True)

    p = add("synth", "write a seeded synthetic corpus")
    p.add_argument("--n", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--blur-sigma", type=float)
    p.add_argument("--blobs", type=int)
    p.add_argument("--texture", type=float)
    p.add_argument("--cam-model", choices=CAM_MODELS)
    return parser


def resolve_config(ns):
    """Merge defaults, the optional --config file and explicit flags."""
    cfg = dict(DEFAULTS)
    given = vars(ns).copy()
    path = given.pop("config", None)
    if path is not None:
        file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)
    return cfg


def _simplify_params(cfg, method=None):
    return SimplifyParams(
        method=method or cfg["method"], q=cfg["q"], slic_k=cfg["slic_k"],
        slic_compactness=cfg["slic_compactness"], slic_iters=cfg["slic_iters"],
        qs_kernel_size=cfg["qs_kernel_size"], qs_max_dist=cfg["qs_max_dist"], rng_seed=cfg["seed"],
    )


def _canny_params(cfg):
    return CannyParams(sigma=cfg["sigma"], low=cfg["low"], high=cfg["high"], use_lab_l=bool(cfg["lab_l"]))


def _header(cfg, **params):
    hdr = {"tool": "camrefine", "version": __version__, "subcommand": cfg["subcommand"], "seed": cfg["seed"]}
    hdr.update(params)
    return hdr


def _write_header(out, header):
    """Run header lives beside the output: <dir>/run.json or <file>.run.json."""
    out = Path(out)
    target = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    atomic_write_json(target, header)


def _load_class_names(path):
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(raw, dict):
        ids = sorted(int(k) for k in raw)
        if ids != list(range(len(ids))):
            raise UsageError("class name ids must be 0..C-1")
        return [raw[str(i)] for i in ids]
    return [str(n) for n in raw]


def cmd_simplify(cfg):
    params = _simplify_params(cfg)
    image = load_ppm(cfg["image"])
    seg = simplify(image, params)
    save_segment_map(seg, cfg["out"])
    if "flat" in cfg:
        save_ppm(flatten(image, seg), cfg["flat"])
    _write_header(cfg["out"], _header(cfg, simplify=params.to_dict(), num_segments=seg.num_segments))


def cmd_edges(cfg):
    params = _canny_params(cfg)
    pm = canny(load_ppm(cfg["image"]), params)
    save_perimeter_map(pm, cfg["out"])
    _write_header(cfg["out"], _header(cfg, canny=params.to_dict()))


def cmd_perimeter(cfg):
    sp, cp = _simplify_params(cfg), _canny_params(cfg)
    pm = build_perimeter_map(load_ppm(cfg["image"]), sp, cp)
    save_perimeter_map(pm, cfg["out"])
    _write_header(cfg["out"], _header(cfg, simplify=sp.to_dict(), canny=cp.to_dict()))


def cmd_refine(cfg):
    entries = load_manifest(cfg["manifest"])
    rp = RefineParams(cfg["t_slic"], cfg["t_quick"], cfg["fusion"])
    sp_s, sp_q = _simplify_params(cfg, "slic"), _simplify_params(cfg, "quickshift")
    cp = _canny_params(cfg)
    outdir = Path(cfg["outdir"])
    outdir.mkdir(parents=True, exist_ok=True)
    results = refine_manifest(entries, rp, sp_s, sp_q, cp, workers=cfg["workers"])
    for entry, labels in zip(entries, results):
        save_label_map(labels, outdir / f"{entry.id}.pgm")
    _write_header(outdir, _header(cfg, manifest=str(cfg["manifest"]), refine=rp.to_dict(),
                                  simplify_slic=sp_s.to_dict(), simplify_quick=sp_q.to_dict(),
                                  canny=cp.to_dict(), entries=[e.id for e in entries]))


def cmd_eval(cfg):
    entries = load_manifest(cfg["manifest"])
    names = _load_class_names(cfg["classes"])
    cm = ConfusionMatrix.zeros(len(names))
    decomps = []
    for e in entries:
        if e.gt_path is None:
            raise UsageError(f"entry {e.id!r} has no gt_path")
        pred_path = Path(cfg["pred_dir"]) / f"{e.id}.pgm"
        if not pred_path.is_file():
            raise UsageError(f"entry {e.id!r}: missing prediction {pred_path}")
        gt, pred = load_label_map(e.gt_path), load_label_map(pred_path)
        cm = accumulate(cm, gt, pred)
        decomps.append(foreground_decomposition(gt, pred))
    rep, table = report(cm, names, decomps)
    out = rep.to_dict()
    out["confusion_matrix"] = cm.counts.tolist()
    atomic_write_json(cfg["report"], out)
    if "table" in cfg:
        atomic_write_bytes(cfg["table"], table.encode("utf-8"))
    sys.stdout.write(table)


def cmd_gridsearch(cfg):
    entries = load_manifest(cfg["manifest"])
    fusions = [f.strip() for f in cfg["grid_fusion"].split(",") if f.strip()]
    cache = PerimeterCache(_canny_params(cfg))
    res = grid_search(entries, cache, parse_range(cfg["grid_t_slic"]), parse_range(cfg["grid_t_quick"]),
                      fusions, cfg["objective"], simplify_slic=_simplify_params(cfg, "slic"),
                      simplify_quick=_simplify_params(cfg, "quickshift"),
                      num_classes=cfg.get("num_classes"))
    out = res.to_dict()
    out["header"] = _header(cfg, canny=cache.canny_params.to_dict(),
                            simplify_slic=_simplify_params(cfg, "slic").to_dict(),
                            simplify_quick=_simplify_params(cfg, "quickshift").to_dict())
    atomic_write_json(cfg["out"], out)
    b = res.best
    print(f"best: t_slic={b['t_slic']} t_quick={b['t_quick']} fusion={b['fusion']} "
          f"{res.objective}={b['objective_value']:.6f}")


def cmd_overlay(cfg):
    image = load_ppm(cfg["image"])
    mask = load_label_map(cfg["mask"])
    save_ppm(render_overlay(image, mask, load_palette(cfg["palette"])), cfg["out"])


def cmd_synth(cfg):
    spec = SynthSpec(image_count=cfg["n"], image_size=cfg["size"], texture_amplitude=cfg["texture"],
                     cam_blur_sigma=cfg["blur_sigma"], distractor_blob_count=cfg["blobs"],
                     rng_seed=cfg["seed"], cam_model=cfg["cam_model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(spec, out)
    _write_header(out, _header(cfg, synth=spec.to_dict()))


COMMANDS = {
    "simplify": cmd_simplify, "edges": cmd_edges, "perimeter": cmd_perimeter, "refine": cmd_refine,
    "eval": cmd_eval, "gridsearch": cmd_gridsearch, "overlay": cmd_overlay, "synth": cmd_synth,
}


def run(argv=None):
    try:
        ns = build_parser().parse_args(argv)
        cfg = resolve_config(ns)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 2
    logging.basicConfig(level=logging.DEBUG if cfg.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[cfg["subcommand"]](cfg)
    except UsageError as exc:
        sys.stderr.write(f"camrefine {cfg['subcommand']}: {exc}\n")
        return 2
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"camrefine {cfg['subcommand']}: error: {exc}\n")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
