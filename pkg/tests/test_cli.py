import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from contourreg.cli import main, sha256_file
from contourreg.mesh import LabeledMesh, read_ply, write_ply
from contourreg.registration import RegistrationReport
from contourreg.scene import dumps_json, load_scene, save_scene
from contourreg.synth import PhantomSpec, build_phantom, default_fiducial, generate_scene

FAST = "[registration]\nmax_correspondence_updates = 8\n"


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["demo", "--out-dir", str(out)]) == 0
    return out


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST)
    return str(p)


def test_demo_outputs(demo):
    for name in ("phantom.ply", "fiducial.json", "scene.json", "scene_uncalibrated.json", "report.json",
                 "metrics.json", "manifest.json"):
        assert (demo / name).is_file()
    assert json.loads((demo / "metrics.json").read_text())["success"] is True
    man = json.loads((demo / "manifest.json").read_text())
    for path, digest in man["outputs"].items():
        assert sha256_file(path) == digest


def test_register_defaults_succeed_and_are_deterministic(demo, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["register", str(demo / "scene.json"), str(demo / "phantom.ply"), "-o", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    man = json.loads((tmp_path / "a.manifest.json").read_text())
    assert man["inputs"][str(demo / "scene.json")] == sha256_file(demo / "scene.json")
    assert man["config"]["init"] == [30.0, -40.0, 5.0, -17.18, 0.0, 17.18]
    assert main(["evaluate", str(demo / "scene.json"), str(demo / "phantom.ply"), str(a),
                 "--out-dir", str(tmp_path / "ev")]) == 0
    res = json.loads((tmp_path / "ev" / "metrics.json").read_text())["results"][0]
    assert res["success"] is True


def test_single_view_warning(demo, tmp_path, fast_cfg, caplog):
    rc = main(["--config", fast_cfg, "register", str(demo / "scene.json"), str(demo / "phantom.ply"),
               "-o", str(tmp_path / "r.json"), "--views", "v0"])
    assert rc == 0
    assert any("single-view" in r.getMessage() for r in caplog.records)


@pytest.mark.parametrize("bad", ["1,2,3", "a,b,c,d,e,f", "1,2,3,4,5,nan"])
def test_malformed_init_is_usage_error(demo, tmp_path, bad, capsys):
    rc = main(["register", str(demo / "scene.json"), str(demo / "phantom.ply"), "--init", bad])
    assert rc == 1
    assert "usage" in capsys.readouterr().err


def test_usage_errors(demo, tmp_path):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["register", str(demo / "scene.json"), str(demo / "phantom.ply"), "--views", "v0,nope"]) == 1
    assert main(["sweep", str(demo / "scene.json"), str(demo / "phantom.ply"), "--runs", "-1"]) == 1


def test_evaluate_rows_and_control_views(demo, tmp_path):
    truth = load_scene(demo / "scene.json").ground_truth
    gt = tmp_path / "gt.json"
    gt.write_text(dumps_json(RegistrationReport(truth).to_dict()))
    reports = [str(demo / "report.json"), str(gt)]
    out = tmp_path / "ev"
    assert main(["evaluate", str(demo / "scene.json"), str(demo / "phantom.ply"), *reports,
                 "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert len(rows) == len(reports)
    assert float(rows[1]["mrpd_mm"]) < 0.5  # sample spacing / 2
    assert main(["evaluate", str(demo / "scene.json"), str(demo / "phantom.ply"), str(gt),
                 "--control-views", "v3,v99", "--out-dir", str(out)]) == 1


def test_sweep_zero_runs_and_determinism(demo, tmp_path, fast_cfg):
    args = ["--config", fast_cfg, "sweep", str(demo / "scene.json"), str(demo / "phantom.ply")]
    assert main(args + ["--runs", "0", "--out-dir", str(tmp_path / "s0")]) == 0
    lines = (tmp_path / "s0" / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("run,tx")
    assert json.loads((tmp_path / "s0" / "summary.json").read_text())["success_rate"] is None
    for d, jobs in (("s1", "1"), ("s2", "2")):
        assert main(args + ["--runs", "3", "--seed", "4", "--jobs", jobs, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("sweep.csv", "summary.json", "plot_psi.tsv"):
        assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()
    assert len((tmp_path / "s1" / "sweep.csv").read_text().splitlines()) == 4


def test_segment(tmp_path):
    mesh = build_phantom(PhantomSpec())
    src = tmp_path / "in.ply"
    write_ply(src, mesh)
    out = tmp_path / "out.ply"
    assert main(["segment", str(src), str(out), "--keep-labels"]) == 0
    np.testing.assert_array_equal(read_ply(out).vertex_class, mesh.vertex_class)
    unl = tmp_path / "unl.ply"
    write_ply(unl, mesh.with_classes(np.zeros(mesh.n_vertices)))
    assert main(["segment", str(unl), str(out)]) == 0
    assert set(np.unique(read_ply(out).vertex_class)) == {1, 2, 3}
    first = out.read_bytes()
    assert main(["segment", str(unl), str(out)]) == 0
    assert out.read_bytes() == first
    assert (tmp_path / "out.manifest.json").is_file()
    tri = tmp_path / "tri.ply"
    write_ply(tri, LabeledMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [0, 0, 0]))
    assert main(["segment", str(tri), str(tmp_path / "x.ply")]) == 2
    assert main(["segment", str(tmp_path / "missing.ply"), str(tmp_path / "x.ply")]) == 2
    assert main(["segment", str(unl), str(out), "--split-point", "0,0,0"]) == 1


def _uncalibrated(tmp_path, sigma, drop_to=None):
    mesh = build_phantom(PhantomSpec())
    from contourreg.synth import NoiseSpec

    scene = generate_scene(mesh, noise=NoiseSpec(sigma, seed=2), fiducial=default_fiducial())
    truth = {v: r.extrinsic for v, r in scene.views.items()}
    for r in scene.views.values():
        r.extrinsic = None
        if drop_to is not None:
            r.bead_detections = r.bead_detections[:drop_to]
    p = tmp_path / "unc.json"
    save_scene(p, scene)
    f = tmp_path / "fid.json"
    f.write_text(dumps_json(default_fiducial().to_dict()))
    return p, f, truth


def test_calibrate_noiseless(tmp_path):
    scene, fid, truth = _uncalibrated(tmp_path, 0.0)
    out = tmp_path / "cal.json"
    assert main(["calibrate", str(scene), str(fid), "-o", str(out)]) == 0
    s = load_scene(out)
    for vid, ext in truth.items():
        assert s.views[vid].extrinsic.allclose(ext, atol=1e-6)
    again = tmp_path / "cal2.json"
    assert main(["calibrate", str(scene), str(fid), "-o", str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_calibrate_noisy_and_too_few(tmp_path):
    scene, fid, _ = _uncalibrated(tmp_path, 0.3)
    out = tmp_path / "cal.json"
    assert main(["calibrate", str(scene), str(fid), "-o", str(out)]) == 0
    info = load_scene(out).metadata["calibration"]
    assert all(v["mean_reproj_err_px"] <= 0.8 for v in info.values())
    scene, fid, _ = _uncalibrated(tmp_path, 0.3, drop_to=3)
    assert main(["calibrate", str(scene), str(fid), "-o", str(out)]) == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "contourreg", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "contourreg" in r.stdout
