import json
import subprocess
import sys

import numpy as np
import pytest

from hycd.cli import main
from hycd.raster import RasterImage, read_mask_pgm, read_raster, write_raster


@pytest.fixture
def scene(tmp_path):
    spec = {"width": 64, "height": 64, "bands": 8, "seed": 1,
            "change_blocks": [{"x": 16, "y": 16, "w": 16, "h": 16}]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out-prefix",
                 str(tmp_path / "scene") + "/", "--contrast-sigmas", "5"]) == 0
    return tmp_path


def test_synth_outputs(scene):
    before = read_raster(scene / "scene" / "before.bin")
    assert before.shape == (8, 64, 64)
    assert read_mask_pgm(scene / "scene" / "truth.pgm").mask.sum() == 256


def test_c2va_and_eval(scene, capsys):
    s = scene / "scene"
    assert main(["c2va", "--before", str(s / "before.bin"), "--after", str(s / "after.bin"),
                 "--percentile", "90", "--out-mask", str(scene / "m.pgm"),
                 "--out-mag", str(scene / "mag.bin"), "--out-angle", str(scene / "ang.bin"),
                 "--figure", str(scene / "ma.png")]) == 0
    # floor(4096 * 0.1) = 409 pixels
    assert f"changed_percent={100 * 409 / 4096:.4f}" in capsys.readouterr().out
    assert read_raster(scene / "mag.bin").bands == 1
    assert (scene / "ma.png").exists()
    assert main(["eval", "--pred", str(scene / "m.pgm"), "--truth", str(s / "truth.pgm"),
                 "--out", str(scene / "metrics.csv")]) == 0
    header, row = (scene / "metrics.csv").read_text().splitlines()
    assert header.startswith("precision,recall,f1,iou,changed_percent")
    assert float(row.split(",")[1]) > 0.9


def test_c2va_otsu_flag(scene, capsys):
    s = scene / "scene"
    assert main(["c2va", "--before", str(s / "before.bin"), "--after", str(s / "after.bin"),
                 "--threshold", "otsu", "--bins", "64", "--out-mask", str(scene / "o.pgm")]) == 0
    assert "c2va_otsu" in capsys.readouterr().out


def test_dcva_command(scene, capsys):
    s = scene / "scene"
    args = ["dcva", "--before", str(s / "before.bin"), "--after", str(s / "after.bin"),
            "--bands", "4,2,1,6", "--layers", "preset2", "--threshold", "otsu", "--seed", "7",
            "--out-mask", str(scene / "d.pgm"), "--out-norm", str(scene / "g.bin")]
    assert main(args) == 0
    first = (scene / "d.pgm").read_bytes()
    assert main(args) == 0
    assert (scene / "d.pgm").read_bytes() == first
    assert "dcva_otsu" in capsys.readouterr().out
    assert read_raster(scene / "g.bin").shape == (1, 64, 64)


def test_dcva_with_weight_file(scene, tmp_path):
    from hycd.extractor import builtin_extractor, save_extractor

    save_extractor(builtin_extractor(2), tmp_path / "w.bin")
    s = scene / "scene"
    assert main(["dcva", "--before", str(s / "before.bin"), "--after", str(s / "after.bin"),
                 "--bands", "4,2,1,6", "--weights", str(tmp_path / "w.bin"),
                 "--threshold", "adaptive", "--radius", "16", "--k", "3",
                 "--out-mask", str(scene / "w.pgm")]) == 0


def test_coregister_command(tmp_path, capsys):
    from helpers import smooth_texture, translate

    tex = smooth_texture(np.random.default_rng(0), 64, 64)
    write_raster(RasterImage(np.stack([tex, tex])), tmp_path / "b.bin")
    write_raster(RasterImage(translate(np.stack([tex, tex]), 2, 1)), tmp_path / "a.bin")
    assert main(["coregister", "--before", str(tmp_path / "b.bin"), "--after",
                 str(tmp_path / "a.bin"), "--band", "0", "--out", str(tmp_path / "w.bin"),
                 "--flow-out", str(tmp_path / "f.bin")]) == 0
    flow = read_raster(tmp_path / "f.bin")
    assert flow.bands == 2
    assert abs(float(np.median(flow.data[0])) - 2) < 0.25
    assert "max_flow=" in capsys.readouterr().out
    assert main(["coregister", "--before", str(tmp_path / "b.bin"), "--after",
                 str(tmp_path / "a.bin"), "--band", "2", "--out", str(tmp_path / "x.bin")]) == 1


def _config(scene, **kw):
    cfg = {"before": "scene/before.bin", "after": "scene/after.bin", "output_prefix": "out/",
           "aoi": {"size": 64}, "bands": [4, 2, 1, 6]}
    cfg.update(kw)
    p = scene / "c.json"
    p.write_text(json.dumps(cfg))
    return p


def test_run_exit_codes(scene, capsys):
    assert main(["run", "--config", str(_config(scene))]) == 0
    assert "c2va" in capsys.readouterr().out
    assert main(["run", "--config", str(_config(scene)), "--override", "method=dcva_ada",
                 "--override", "layers=preset1"]) == 0
    assert (scene / "out" / "dcva_ada_L2-5_mask.pgm").exists()
    assert main(["run", "--config", str(_config(scene, after="scene/missing.bin"))]) == 1
    assert main(["run", "--config", str(_config(scene, method="magic"))]) == 2
    assert main(["run", "--config", str(scene / "absent.json")]) == 2
    (scene / "bad.json").write_text("{")
    assert main(["run", "--config", str(scene / "bad.json")]) == 2
    assert main(["run"]) == 2
    assert main(["c2va", "--before", "a", "--after", "b", "--p", "120",
                 "--out-mask", "m.pgm"]) == 2


def test_batch_command(scene):
    cdir = scene / "cfgs"
    cdir.mkdir()
    for i, method in enumerate(["c2va", "dcva_otsu"]):
        (cdir / f"{i}.json").write_text(json.dumps({
            "before": "../scene/before.bin", "after": "../scene/after.bin",
            "output_prefix": f"../out{i}/", "aoi": {"size": 64}, "bands": [4, 2, 1, 6],
            "method": method, "location_tag": "X"}))
    assert main(["batch", "--configs", str(cdir), "--out", str(scene / "b.csv"),
                 "--figures"]) == 0
    assert len((scene / "b.csv").read_text().splitlines()) == 3
    assert (scene / "b_table.png").exists()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hycd", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "coregister" in out.stdout
