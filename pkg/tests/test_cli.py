import csv

import numpy as np
import pytest

from photodepth import cli
from photodepth.core import disp_to_depth
from photodepth.geometry import Pose
from photodepth.io import SequenceManifest, read_pfm


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(out), "--seed", "0"]) == 0
    return out


def test_usage_errors(capsys):
    assert cli.main(["optimize", "--bogus"]) == cli.EXIT_USAGE
    assert "usage error" in capsys.readouterr().err
    assert cli.main([]) == cli.EXIT_USAGE
    assert cli.main(["fly"]) == cli.EXIT_USAGE


def test_synth_outputs(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {"frame_-1.pfm", "frame_+0.pfm", "frame_+1.pfm", "gt_depth.pfm", "camera.txt", "manifest.txt"} <= names
    man = SequenceManifest.load(synth_dir / "manifest.txt")
    assert man.offsets == (-1, 1) and set(man.poses) == {-1, 1}


def test_synth_is_bit_reproducible(tmp_path, synth_dir):
    assert cli.main(["synth", "--out", str(tmp_path), "--seed", "0"]) == 0
    for p in synth_dir.iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_synth_occluder_kind(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--kind", "occluder", "--seed", "1"]) == 0
    assert (tmp_path / "occluder_mask.png").exists()


def test_eval_identical_dirs(tmp_path, synth_dir, capsys):
    gt = tmp_path / "gt"
    gt.mkdir()
    (gt / "gt_depth.pfm").write_bytes((synth_dir / "gt_depth.pfm").read_bytes())
    (gt / "camera.txt").write_text((synth_dir / "camera.txt").read_text())
    rc = cli.main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(tmp_path / "m.txt"), "--method", "x"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "AbsRel=0.0000 delta25=100.0000 F=100.0000" in out
    line = (tmp_path / "m.txt").read_text()
    assert "method=x" in line and "align=lsq" in line


def test_eval_data_errors(tmp_path, synth_dir, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["eval", "--pred", str(tmp_path / "empty"), "--gt", str(synth_dir)]) == cli.EXIT_DATA
    assert "data error" in capsys.readouterr().err
    # no camera anywhere
    assert cli.main(["eval", "--pred", str(tmp_path / "empty"), "--gt", str(tmp_path / "empty")]) == cli.EXIT_DATA


def test_optimize_zero_iterations_writes_init(tmp_path, synth_dir):
    out = tmp_path / "run"
    rc = cli.main(["optimize", "--manifest", str(synth_dir / "manifest.txt"), "--out", str(out), "--iterations", "0"])
    assert rc == 0
    depth = read_pfm(out / "depth.pfm")
    assert np.all(depth == np.float32(disp_to_depth(0.5)))
    man = SequenceManifest.load(synth_dir / "manifest.txt")
    for line in (out / "poses.txt").read_text().splitlines():
        k, rest = line.split(" ", 1)
        assert Pose.from_text(rest) == man.poses[int(k)]
    assert (out / "trace.txt").read_text() == ""


def test_optimize_short_run_is_reproducible(tmp_path, synth_dir):
    args = ["optimize", "--manifest", str(synth_dir / "manifest.txt"), "--iterations", "15", "--fix-pose"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == 0
    for name in ("depth.pfm", "disparity.pfm", "poses.txt", "camera.txt", "trace.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    losses = [float(l.split()[1].split("=")[1]) for l in (tmp_path / "a" / "trace.txt").read_text().splitlines()]
    assert len(losses) == 15 and losses[-1] < losses[0]


def test_optimize_missing_manifest(tmp_path):
    assert cli.main(["optimize", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_optimize_fix_pose_needs_records(tmp_path, synth_dir):
    man = SequenceManifest.load(synth_dir / "manifest.txt")
    man.poses = {}
    man.frames = [str(synth_dir / f) for f in man.frames]
    man.save(tmp_path / "m.txt")
    rc = cli.main(["optimize", "--manifest", str(tmp_path / "m.txt"), "--out", str(tmp_path / "o"), "--fix-pose"])
    assert rc == cli.EXIT_DATA


def test_gradcheck_default_scene(capsys):
    assert cli.main(["gradcheck", "--coords", "60"]) == 0
    out = capsys.readouterr().out
    rel = float(out.split("max_rel_error=")[1].split()[0])
    assert rel < 1e-4


def test_augment_preview(tmp_path):
    rc = cli.main(["augment-preview", "--out", str(tmp_path), "--size", "128", "192", "--n", "4", "--ar-prob", "1.0"])
    assert rc == 0
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(lines) == 4 and all("ratio=" in l and "camera=" in l for l in lines)
    assert len(list(tmp_path.glob("sample_*.png"))) == 4
    again = tmp_path / "again"
    cli.main(["augment-preview", "--out", str(again), "--size", "128", "192", "--n", "4", "--ar-prob", "1.0"])
    assert (again / "manifest.txt").read_text() == (tmp_path / "manifest.txt").read_text()
    assert cli.main(["augment-preview", "--out", str(tmp_path), "--image", "x.png"]) == cli.EXIT_DATA


def test_benchmark_table_and_csv(tmp_path, capsys):
    (tmp_path / "a.txt").write_text(
        "method=a dataset=x absrel=5.0 delta25=95.0 fscore=60.0\n"
        "method=a dataset=y absrel=8.0 delta25=80.0 fscore=40.0\n")
    (tmp_path / "b.txt").write_text(
        "# baseline\nmethod=b dataset=x absrel=10.0 delta25=95.0 fscore=60.0\n"
        "method=b dataset=y absrel=4.0 delta25=88.0 fscore=40.0\n"
        "image=0.pfm method=b dataset=y absrel=1.0 delta25=1.0 fscore=1.0\n")
    rc = cli.main(["benchmark", str(tmp_path / "a.txt"), str(tmp_path / "b.txt"), "--baseline", "b",
                   "--csv", str(tmp_path / "t.csv")])
    assert rc == 0
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["method", "rank", "improvement"]
    got = {r[0]: (float(r[1]), float(r[2])) for r in rows[1:]}
    assert got["b"] == (pytest.approx(((2 + 1.5 + 1.5) / 3 + (1 + 1 + 1.5) / 3) / 2), 0.0)
    assert got["a"][1] == pytest.approx((50 / 3 + (-100 - 100 / 11) / 3) / 2)
    assert "improvement" in capsys.readouterr().out
    assert cli.main(["benchmark", str(tmp_path / "missing.txt")]) == cli.EXIT_DATA
    (tmp_path / "bad.txt").write_text("absrel=1\n")
    assert cli.main(["benchmark", str(tmp_path / "bad.txt")]) == cli.EXIT_DATA
