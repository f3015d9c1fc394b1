import csv
import json

import numpy as np
import pytest

from handsplat.cli import main
from handsplat.config import ExperimentConfig
from handsplat.dataset import camera_ring
from handsplat.hand_model import PoseParams
from handsplat.io import load_checkpoint, load_cloud, load_labels, load_scene, read_ppm, save_camera, save_pose, \
    save_poses

SMALL = dict(C=6, E=8, bands=2, map_size=16, hidden=12, width=32, height=32, coarse_level=1, fine_level=1,
             detection_level=1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = ExperimentConfig(**SMALL)
    cfg.save(root / "cfg.json")
    assert main(["gen-data", "--out", str(root / "data"), "--subjects", "2", "--poses", "2", "--cameras", "2",
                 "--width", "32", "--height", "32", "--config", str(root / "cfg.json"), "--seed", "3"]) == 0
    assert main(["train", "--data-dir", str(root / "data"), "--epochs", "2", "--steps-per-epoch", "2",
                 "--lr", "1e-3", "--checkpoint-out", str(root / "model.igsn"), "--trace-out",
                 str(root / "train.csv")]) == 0
    scene = load_scene(root / "data" / "subjects" / "s1" / "scene.txt")
    f0 = scene["frames"][0]
    save_pose(root / "pose.json", PoseParams.from_dict(f0["pose"]))
    save_camera(root / "cam.json", camera_ring(cfg, 2)[0], 32, 32)
    return root, scene


def test_gen_data_layout(workspace):
    root, scene = workspace
    assert len(scene["frames"]) == 4
    assert (root / "data" / "subjects" / "s2" / "masks" / "0003.ppm").exists()


def test_train_outputs(workspace):
    root, _ = workspace
    blocks = load_checkpoint(root / "model.igsn")
    assert "identity.s1" in blocks and "identity.s2" in blocks
    assert blocks["identity.s1"].shape == (12, 16, 16)
    rows = list(csv.reader(open(root / "train.csv")))
    assert rows[0] == ["step", "l1", "perceptual", "total"]
    assert len(rows) == 1 + 4


def test_fit_and_animate(workspace, tmp_path):
    root, scene = workspace
    ref = root / "data" / "subjects" / "s1" / scene["frames"][0]["image"]
    mask = root / "data" / "subjects" / "s1" / scene["frames"][0]["mask"]
    assert main(["fit", "--checkpoint", str(root / "model.igsn"), "--ref-image", str(ref), "--ref-mask", str(mask),
                 "--pose-file", str(root / "pose.json"), "--camera-file", str(root / "cam.json"), "--steps", "3",
                 "--out-identity", str(tmp_path / "fit.igsn"), "--trace-out", str(tmp_path / "fit.csv"),
                 "--config", str(root / "cfg.json")]) == 0
    fit = load_checkpoint(tmp_path / "fit.igsn")
    assert set(fit) == {"identity", "delta_t", "calib.log_gain", "calib.bias"}
    rows = list(csv.reader(open(tmp_path / "fit.csv")))
    assert rows[0] == ["step", "l1", "perceptual", "mask", "reg", "total"] and len(rows) == 4
    save_poses(tmp_path / "seq.json", [PoseParams.zeros(), PoseParams.from_dict(scene["frames"][2]["pose"])])
    assert main(["animate", "--checkpoint", str(root / "model.igsn"), "--identity", str(tmp_path / "fit.igsn"),
                 "--poses-file", str(tmp_path / "seq.json"), "--camera-file", str(root / "cam.json"),
                 "--out-dir", str(tmp_path / "anim"), "--config", str(root / "cfg.json")]) == 0
    frames = sorted((tmp_path / "anim").glob("frame_*.ppm"))
    assert [f.name for f in frames] == ["frame_0000.ppm", "frame_0001.ppm"]
    assert read_ppm(frames[0]).shape == (32, 32, 3)


def test_render_is_byte_identical(workspace, tmp_path):
    root, _ = workspace
    outs = []
    for i, workers in enumerate(("1", "2")):
        out = tmp_path / f"r{i}.ppm"
        assert main(["render", "--checkpoint", str(root / "model.igsn"), "--identity", "2", "--pose-file",
                     str(root / "pose.json"), "--camera-file", str(root / "cam.json"), "--workers", workers,
                     "--save-cloud", str(tmp_path / f"c{i}.gcld"), "--out", str(out),
                     "--config", str(root / "cfg.json")]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    cloud = load_cloud(tmp_path / "c0.gcld")
    assert main(["render", "--cloud-file", str(tmp_path / "c0.gcld"), "--camera-file", str(root / "cam.json"),
                 "--bg", "0.2", "--out", str(tmp_path / "cl.ppm")]) == 0
    assert len(cloud) > 0 and read_ppm(tmp_path / "cl.ppm").shape == (32, 32, 3)


def test_detect(workspace, tmp_path):
    root, _ = workspace
    assert main(["detect", "--scene", str(root / "data" / "subjects" / "s1" / "scene.txt"), "--frame", "2",
                 "--out", str(tmp_path / "l.bin"), "--obj", str(tmp_path / "m.obj")]) == 0
    lab = load_labels(tmp_path / "l.bin")
    assert len(lab) == 3920
    assert lab.flags.sum() > 0          # frame 2 is the touching pose
    assert sum(l.startswith("v ") for l in (tmp_path / "m.obj").read_text().splitlines()) == 3920


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert "max rel err" in out and "FAIL" not in out


def test_bench_csv(tmp_path):
    assert main(["bench", "--gaussians", "2000", "--sizes", "64", "--detect-points", "500", "--repeat", "1",
                 "--workers", "1", "--out", str(tmp_path / "b.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "b.csv")))
    assert rows[0]["task"] == "render" and rows[0]["gaussians"] == "2000" and rows[0]["image"] == "64x64"
    assert float(rows[0]["wall_ms"]) > 0 and "raster_ms" in rows[0]
    assert rows[1]["task"] == "detect"


def test_unknown_flag_exits_nonzero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["render", "--bogus"])
    assert e.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_gen_data_is_seed_reproducible(tmp_path):
    args = ["gen-data", "--subjects", "1", "--poses", "1", "--cameras", "1", "--width", "32", "--height", "32"]
    cfg = ExperimentConfig(**SMALL)
    cfg.save(tmp_path / "cfg.json")
    for d in ("a", "b"):
        main(args + ["--out", str(tmp_path / d), "--seed", "5", "--config", str(tmp_path / "cfg.json")])
    for p in (tmp_path / "a").rglob("*.ppm"):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
