import json
import subprocess
import sys

import numpy as np
import pytest

from camrefine.cli import run
from camrefine.imagecore import load_label_map, load_perimeter_map, load_ppm, save_ppm
from camrefine.superpixels import load_segment_map
from conftest import disk_image
from oracles import components4

FAST = ["--q", "12", "--slic-k", "64"]


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run(["synth", "--n", "3", "--size", "48", "--out", str(out), "--seed", "7"]) == 0
    return out


def test_synth_is_byte_identical(tmp_path, corpus):
    assert run(["synth", "--n", "3", "--size", "48", "--out", str(tmp_path / "b"), "--seed", "7"]) == 0
    assert tree(corpus) == tree(tmp_path / "b")
    assert run(["synth", "--n", "3", "--size", "48", "--out", str(tmp_path / "c"), "--seed", "8"]) == 0
    assert tree(corpus) != tree(tmp_path / "c")
    header = json.loads((corpus / "run.json").read_text())
    assert header["synth"]["rng_seed"] == 7 and header["subcommand"] == "synth"


def test_unknown_subcommand_and_flag(capsys):
    assert run(["frobnicate"]) == 2
    assert run(["edges", "--image", "x.ppm", "--out", "y.pgm", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_invalid_parameters_exit_nonzero(tmp_path, capsys):
    img, _ = disk_image(16)
    save_ppm(img, tmp_path / "d.ppm")
    code = run(["edges", "--image", str(tmp_path / "d.ppm"), "--out", str(tmp_path / "e.pgm"),
                "--low", "0.5", "--high", "0.2"])
    assert code == 1
    assert "low" in capsys.readouterr().err
    assert not (tmp_path / "e.pgm").exists()


def test_refine_missing_score_file(tmp_path, corpus, capsys):
    manifest = json.loads((corpus / "manifest.json").read_text())
    for e in manifest:
        for k in ("image_path", "score_path", "gt_path"):
            e[k] = str(corpus / e[k])
    manifest[1]["score_path"] = str(tmp_path / "gone.smf")
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    code = run(["refine", "--manifest", str(tmp_path / "m.json"), "--outdir", str(tmp_path / "out")] + FAST)
    assert code != 0
    assert "synth_0001" in capsys.readouterr().err


def test_perimeter_on_disk_is_closed_ring(tmp_path):
    img, _ = disk_image(64)
    save_ppm(img, tmp_path / "disk.ppm")
    out = tmp_path / "pm.pgm"
    assert run(["perimeter", "--image", str(tmp_path / "disk.ppm"), "--out", str(out),
                "--method", "slic", "--q", "32"]) == 0
    pm = load_perimeter_map(out)
    lab, _ = components4(~pm.edges)
    assert lab[32, 32] != lab[0, 0]
    header = json.loads((tmp_path / "pm.pgm.run.json").read_text())
    assert header["simplify"]["q"] == 32 and header["canny"]["sigma"] == 1.4


def test_simplify_and_edges_outputs(tmp_path):
    img, _ = disk_image(32)
    save_ppm(img, tmp_path / "d.ppm")
    assert run(["simplify", "--image", str(tmp_path / "d.ppm"), "--out", str(tmp_path / "s.pgm"),
                "--flat", str(tmp_path / "f.ppm"), "--q", "4", "--slic-k", "16"]) == 0
    seg = load_segment_map(tmp_path / "s.pgm")
    assert 2 <= seg.num_segments <= 4
    assert load_ppm(tmp_path / "f.ppm").data.shape == (32, 32, 3)
    assert run(["edges", "--image", str(tmp_path / "d.ppm"), "--out", str(tmp_path / "e.pgm")]) == 0
    assert load_perimeter_map(tmp_path / "e.pgm").edges.any()


def test_config_precedence(tmp_path):
    img, _ = disk_image(32)
    save_ppm(img, tmp_path / "d.ppm")
    (tmp_path / "cfg.json").write_text(json.dumps({"q": 4, "slic_k": 16, "sigma": 2.0}))
    base = ["simplify", "--image", str(tmp_path / "d.ppm"), "--config", str(tmp_path / "cfg.json")]
    assert run(base + ["--out", str(tmp_path / "a.pgm")]) == 0
    hdr = json.loads((tmp_path / "a.pgm.run.json").read_text())
    assert hdr["simplify"]["q"] == 4 and hdr["simplify"]["slic_k"] == 16  # file beats defaults
    assert run(base + ["--out", str(tmp_path / "b.pgm"), "--q", "6"]) == 0
    hdr = json.loads((tmp_path / "b.pgm.run.json").read_text())
    assert hdr["simplify"]["q"] == 6  # command line beats file
    (tmp_path / "bad.json").write_text(json.dumps({"qq": 3}))
    assert run(["simplify", "--image", str(tmp_path / "d.ppm"), "--out", str(tmp_path / "c.pgm"),
                "--config", str(tmp_path / "bad.json")]) == 2


def test_refine_eval_overlay_flow(tmp_path, corpus):
    pred = tmp_path / "pred"
    args = ["refine", "--manifest", str(corpus / "manifest.json"), "--outdir", str(pred)] + FAST
    assert run(args) == 0
    assert run(args[:4] + [str(tmp_path / "pred8"), "--workers", "4"] + FAST) == 0
    assert tree(pred) == tree(tmp_path / "pred8")  # worker count never changes bytes
    header = json.loads((pred / "run.json").read_text())
    assert header["refine"]["fusion"] == "union" and len(header["entries"]) == 3
    assert "workers" not in json.dumps(header)

    names = ["background"] + [f"class{i}" for i in range(1, 21)]
    (tmp_path / "classes.json").write_text(json.dumps(names))
    assert run(["eval", "--pred-dir", str(pred), "--manifest", str(corpus / "manifest.json"),
                "--classes", str(tmp_path / "classes.json"), "--report", str(tmp_path / "r.json"),
                "--table", str(tmp_path / "t.txt")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert 0 <= rep["miou"] <= 1 and len(rep["per_class_iou"]) == 21
    assert "mIoU" in (tmp_path / "t.txt").read_text()

    (tmp_path / "pal.json").write_text(json.dumps({str(i): [255, 0, 0] for i in range(1, 21)}))
    first = sorted(pred.glob("synth_*.pgm"))[0]
    img_path = corpus / "images" / first.name.replace(".pgm", ".ppm")
    assert run(["overlay", "--image", str(img_path), "--mask", str(first), "--palette",
                str(tmp_path / "pal.json"), "--out", str(tmp_path / "o.ppm")]) == 0
    over, base, mask = load_ppm(tmp_path / "o.ppm"), load_ppm(img_path), load_label_map(first)
    bg = mask.labels == 0
    assert np.array_equal(over.data[bg], base.data[bg])


def test_eval_missing_prediction(tmp_path, corpus, capsys):
    (tmp_path / "classes.json").write_text(json.dumps({str(i): f"c{i}" for i in range(21)}))
    code = run(["eval", "--pred-dir", str(tmp_path), "--manifest", str(corpus / "manifest.json"),
                "--classes", str(tmp_path / "classes.json"), "--report", str(tmp_path / "r.json")])
    assert code != 0 and "synth_0000" in capsys.readouterr().err


def test_gridsearch_output(tmp_path, corpus, capsys):
    out = tmp_path / "grid.json"
    assert run(["gridsearch", "--manifest", str(corpus / "manifest.json"), "--t-slic", "0.1:0.3:0.1",
                "--t-quick", "0.2", "--fusion", "union,intersection", "--out", str(out)] + FAST) == 0
    res = json.loads(out.read_text())
    assert len(res["grid"]) == 6 and res["objective"] == "miou"
    assert res["best"]["objective_value"] == max(g["objective_value"] for g in res["grid"])
    assert "best:" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "camrefine", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "camrefine" in proc.stdout
