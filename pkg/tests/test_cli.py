import json
import shutil

import numpy as np
import pytest
from PIL import Image

from dehaze.cli import Manifest, ManifestError, main
from dehaze.imageio import read_image, write_image

TINY_CFG = """\
# small enough for unit tests
height = 32
width = 32
train_scenes = 2
val_scenes = 1
samples_per_scene = 2
dehaze_steps = 4
val_every = 2
checkpoint_every = 2
haze_width = 6
generator_width = 6
generator_depth = 6
generator_skips = 2
refine_scenes = 4
target_images = 3
refine_content_steps = 3
refine_adversarial_steps = 2
early_stop_window = 2
batch_size_dehaze = 2
batch_size_refine = 2
gradcheck_entries = 1
"""


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["synth", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == 0
    assert main(["train", "--mode", "dehaze", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"), "--out", str(root / "runs")]) == 0
    run = next((root / "runs").iterdir())
    return root, run


def test_synth_manifest(workspace):
    root, _ = workspace
    m = Manifest.load(root / "data" / "manifest.json")
    assert len(m.records["train"]) == 4 and len(m.records["val"]) == 2
    m.validate()
    rec = m.records["train"][0]
    assert Image.open(root / "data" / rec["depth"]).mode.startswith("I;16")
    # hazy samples are re-synthesized from clear + depth + (A, beta)
    s = m.samples("train")[0]
    np.testing.assert_allclose(s.hazy, read_image(root / "data" / rec["hazy"]), atol=1 / 255)


def test_synth_is_deterministic(workspace, tmp_path):
    root, _ = workspace
    assert main(["synth", "--config", str(root / "tiny.cfg"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (root / "data" / "manifest.json").read_bytes()
    for sub in ("hazy", "depth"):
        for f in (root / "data" / sub).iterdir():
            assert f.read_bytes() == (tmp_path / "again" / sub / f.name).read_bytes()


def test_manifest_validation_catches_missing_and_resized(workspace, tmp_path):
    root, _ = workspace
    copy = tmp_path / "data"
    shutil.copytree(root / "data", copy)
    m = Manifest.load(copy)
    rec = m.records["val"][0]
    write_image(copy / rec["hazy"], np.zeros((1, 3, 8, 8)))
    with pytest.raises(ManifestError, match="manifest says"):
        m.validate()
    (copy / rec["hazy"]).unlink()
    with pytest.raises(ManifestError, match="missing file"):
        m.validate()


def test_train_artifacts(workspace):
    _, run = workspace
    assert run.name.startswith("run-") and run.name.endswith("-seed0")
    names = {p.name for p in run.iterdir()}
    assert {"config.txt", "dehaze_log.jsonl", "dehaze_step_2.ckpt", "dehaze_step_4.ckpt", "final.ckpt"} <= names
    lines = (run / "dehaze_log.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["step"] == 4


def test_resume_continues_numbering(workspace, tmp_path):
    root, run = workspace
    cfg = tmp_path / "longer.cfg"
    cfg.write_text(TINY_CFG.replace("dehaze_steps = 4", "dehaze_steps = 6"))
    args = ["train", "--mode", "dehaze", "--config", str(cfg), "--data", str(root / "data"), "--out", str(tmp_path / "runs")]
    assert main(args + ["--resume", str(run / "final.ckpt")]) == 0
    new_run = next((tmp_path / "runs").iterdir())
    steps = [json.loads(line)["step"] for line in (new_run / "dehaze_log.jsonl").read_text().splitlines()]
    assert steps == [5, 6]


def test_refine_run_and_eval(workspace, tmp_path):
    root, run = workspace
    out = tmp_path / "runs"
    args = ["train", "--mode", "refine", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"), "--out", str(out)]
    assert main(args + ["--resume", str(run / "final.ckpt")]) == 0
    refine = next(out.iterdir())
    assert (refine / "refine_content.ckpt").exists()

    img = tmp_path / "input.ppm"
    write_image(img, np.random.default_rng(0).uniform(size=(1, 3, 230, 310)))
    argv = ["run", "--ckpt", str(refine / "final.ckpt"), "--stage", "refine", "--in", str(img), "--out", str(tmp_path / "o1")]
    assert main(argv) == 0
    t = read_image(tmp_path / "o1" / "input_transmission.png")
    assert t.shape == (1, 1, 230, 310)
    assert (tmp_path / "o1" / "input_refined.png").exists()
    argv[-1] = str(tmp_path / "o2")
    assert main(argv) == 0
    for f in (tmp_path / "o1").iterdir():
        assert f.read_bytes() == (tmp_path / "o2" / f.name).read_bytes()

    report = tmp_path / "report.txt"
    assert main(["eval", "--ckpt", str(refine / "final.ckpt"), "--data", str(root / "data"), "--out", str(report)]) == 0
    table = report.read_text()
    assert table.split()[0] == "method"
    methods = [line.split()[0] for line in table.splitlines()[1:]]
    assert methods == ["identity", "dehaze", "refine", "oracle"]
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "method,dataset,id,mse,psnr,ssim" and len(rows) == 1 + 4 * 2


def test_dehaze_stage_omits_refined(workspace, tmp_path):
    root, run = workspace
    rec = Manifest.load(root / "data").records["val"][0]
    argv = ["run", "--ckpt", str(run / "final.ckpt"), "--in", str(root / "data" / rec["hazy"]), "--out", str(tmp_path)]
    assert main(argv) == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [f"{rec['id']}_dehazed.png", f"{rec['id']}_transmission.png"]


def test_errors_are_one_line_json(workspace, tmp_path, capsys):
    root, run = workspace
    assert main(["train", "--mode", "dehaze", "--config", str(root / "tiny.cfg"), "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1
    assert _error(capsys)["error"] == "ManifestError"
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\ncolour = red\nlr = 2\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "d")]) == 1
    err = _error(capsys)
    assert err["error"] == "ConfigError" and "colour, lr" in err["message"]
    (tmp_path / "x.png").write_bytes(b"garbage")
    assert main(["run", "--ckpt", str(run / "final.ckpt"), "--in", str(tmp_path / "x.png"), "--out", str(tmp_path / "o")]) == 1
    assert _error(capsys)["error"] == "ImageFormatError"
    assert main(["train", "--mode", "refine", "--config", str(root / "tiny.cfg"), "--data", str(root / "data"), "--out", str(tmp_path / "r")]) == 1
    assert _error(capsys)["error"] == "UsageError"
    corrupt = tmp_path / "c.ckpt"
    corrupt.write_bytes(run.joinpath("final.ckpt").read_bytes()[:-10])
    assert main(["run", "--ckpt", str(corrupt), "--in", str(tmp_path / "x.png"), "--out", str(tmp_path / "o")]) == 1
    assert _error(capsys)["error"] == "CorruptCheckpointError"
