import json
import subprocess
import sys

import numpy as np
import pytest

from evolving_boxes import cli
from evolving_boxes import config as cfgmod
from evolving_boxes.checkpoint import load_checkpoint, save_checkpoint
from evolving_boxes.data import read_annotations, read_image_ppm, write_image_ppm
from evolving_boxes.errors import ConfigError
from evolving_boxes.evaluate import read_detections, read_pr_curve
from evolving_boxes.model import EvolvingBoxes

FAST = ["--total_iterations", "2", "--minibatch", "64"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    assert run("gen-data", "--out", d, "--count", 3) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, data):
    out = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    assert run("train", "--data", data, "--out", out, *FAST) == 0
    return out


# -- configuration ----------------------------------------------------------------


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk tweaks\nminibatch = 32  # smaller\nalpha = 0.25\n\n")
    args = cli.build_parser().parse_args(["train", "--config", str(path), "--data", "d",
                                          "--out", "o", "--alpha", "0.75"])
    cfg = cli.run_config(args)
    assert cfg.train.minibatch == 32 and cfg.train.alpha == 0.75
    assert cfg.model.conv6_2_filters == 16      # desk preset default
    paper = cli.run_config(cli.build_parser().parse_args(
        ["gen-data", "--preset", "paper", "--out", "x", "--count", "0"]))
    assert paper.model.pn_keep == 800 and paper.scene.image_w == 960


@pytest.mark.parametrize("text", ["bogus = 1\n", "minibatch = many\n", "minibatch 3\n",
                                  "fusion_mode = sideways\n"])
def test_bad_config_is_rejected(tmp_path, text):
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError):
        cli.run_config(cli.build_parser().parse_args(
            ["gen-data", "--config", str(path), "--out", "x", "--count", "0"]))
    assert run("gen-data", "--config", path, "--out", tmp_path / "x", "--count", 0) == 2


def test_config_text_round_trip():
    cfg = cfgmod.paper_preset()
    values = cfgmod.parse_text(cfgmod.dump_text(cfg))
    again = cfgmod.apply(cfgmod.RunConfig(), values)
    assert again == cfg


def test_help_lists_every_key(capsys):
    for command in (None, "train"):
        with pytest.raises(SystemExit):
            cli.main(["--help"] if command is None else [command, "--help"])
        out = capsys.readouterr().out
        for key in cfgmod.SCHEMA:
            assert key in out, key


# -- gen-data ---------------------------------------------------------------------


def test_gen_data_zero(tmp_path):
    assert run("gen-data", "--out", tmp_path / "z", "--count", 0) == 0
    assert (tmp_path / "z/annotations.csv").read_text().strip() == \
        "id,x_min,y_min,width,height,ignore,condition"
    manifest = json.loads((tmp_path / "z/manifest.json").read_text())
    assert manifest["count"] == 0 and manifest["seed"] == 1


def test_gen_data_is_deterministic_and_seeded(tmp_path, data):
    assert run("gen-data", "--out", tmp_path / "again", "--count", 3) == 0
    for f in sorted(p.relative_to(data) for p in data.rglob("*") if p.is_file()):
        assert (tmp_path / "again" / f).read_bytes() == (data / f).read_bytes(), f
    assert run("gen-data", "--out", tmp_path / "other", "--count", 1, "--scene_seed", 2) == 0
    a = read_image_ppm(next((data / "images").iterdir()))
    b = read_image_ppm(next((tmp_path / "other/images").iterdir()))
    assert not np.array_equal(a, b)


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--out", blocker / "sub", "--count", 1) == 2


# -- train ------------------------------------------------------------------------


def test_train_writes_log_and_checkpoint(ckpt):
    log = ckpt.parent / "m.ckpt.log"
    assert len(log.read_text().splitlines()) == 2
    assert load_checkpoint(ckpt).iteration == 2


def test_train_zero_iterations_is_initialization(tmp_path, data):
    out = tmp_path / "init.ckpt"
    assert run("train", "--data", data, "--out", out, "--total_iterations", 0) == 0
    model = EvolvingBoxes.build(cfgmod.desk_preset().model, seed=0)
    loaded = load_checkpoint(out)
    for name, p in model.params.items():
        assert loaded.tensors[name].tobytes() == p.value.astype(np.float32).tobytes()


def test_train_is_deterministic(tmp_path, data, ckpt):
    out = tmp_path / "m.ckpt"
    assert run("train", "--data", data, "--out", out, *FAST) == 0
    assert out.read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "m.ckpt.log").read_bytes() == (ckpt.parent / "m.ckpt.log").read_bytes()


def test_resume_continues_counter(tmp_path, data, ckpt):
    out = tmp_path / "resumed.ckpt"
    assert run("train", "--data", data, "--out", out, "--resume", ckpt,
               "--total_iterations", 3, "--minibatch", 64) == 0
    assert load_checkpoint(out).iteration == 3
    lines = (tmp_path / "resumed.ckpt.log").read_text().splitlines()
    assert [l.split("\t")[0] for l in lines] == ["2"]


def test_non_finite_loss_exit(tmp_path, data, ckpt, capsys):
    bad = load_checkpoint(ckpt)
    bad.tensors["pn.head.bias"][:] = np.nan
    save_checkpoint(tmp_path / "nan.ckpt", bad)
    code = run("train", "--data", data, "--out", tmp_path / "o.ckpt",
               "--resume", tmp_path / "nan.ckpt", "--total_iterations", 4)
    assert code == 3
    assert "iteration 2" in capsys.readouterr().err


def test_missing_dataset(tmp_path):
    assert run("train", "--data", tmp_path / "none", "--out", tmp_path / "o") == 2


# -- detect / eval / bench --------------------------------------------------------


def test_detect_on_dataset_and_image(tmp_path, data, ckpt):
    out = tmp_path / "d.csv"
    assert run("detect", "--ckpt", ckpt, "--data", data, "--out", out) == 0
    ids = {p.stem for p in (data / "images").iterdir()}
    rows = out.read_text().splitlines()[1:]
    assert {r.split(",")[0] for r in rows} <= ids
    keys = [(r.split(",")[0], -float(r.split(",")[5])) for r in rows]
    assert keys == sorted(keys)
    again = tmp_path / "d2.csv"
    assert run("detect", "--ckpt", ckpt, "--data", data, "--out", again) == 0
    assert again.read_bytes() == out.read_bytes()
    image = next((data / "images").iterdir())
    single = tmp_path / "one.csv"
    assert run("detect", "--ckpt", ckpt, "--image", image, "--out", single) == 0
    assert set(read_detections(single)) <= {image.stem}


def test_detect_architecture_mismatch(tmp_path, data, ckpt, capsys):
    code = run("detect", "--ckpt", ckpt, "--data", data, "--out", tmp_path / "d.csv",
               "--pn_fc_dim", 64)
    assert code == 4
    assert "pn.fc.weight" in capsys.readouterr().err


def test_detect_bad_checkpoint(tmp_path, data):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all")
    assert run("detect", "--ckpt", junk, "--data", data, "--out", tmp_path / "d.csv") == 2


def ground_truth_csv(data, path):
    rows = ["id,x_min,y_min,width,height,score"]
    for r in read_annotations(data / "annotations.csv"):
        if not r.annotation.ignore:
            b = r.annotation.box
            rows.append(f"{r.id},{b.x_min:.2f},{b.y_min:.2f},{b.w:.2f},{b.h:.2f},1.0")
    path.write_text("\n".join(rows) + "\n")


def test_eval_ground_truth_and_empty(tmp_path, data, capsys):
    gt = tmp_path / "gt.csv"
    ground_truth_csv(data, gt)
    pr = tmp_path / "pr.csv"
    assert run("eval", "--data", data, "--dets", gt, "--pr-out", pr) == 0
    assert "overall mAP 100.00" in capsys.readouterr().out
    recall = [p.recall for p in read_pr_curve(pr)]
    assert recall == sorted(recall)
    empty = tmp_path / "empty.csv"
    empty.write_text("id,x_min,y_min,width,height,score\n")
    assert run("eval", "--data", data, "--dets", empty, "--pr-out", pr) == 0
    assert "overall mAP 0.00" in capsys.readouterr().out


def test_eval_from_checkpoint(tmp_path, data, ckpt, capsys):
    assert run("eval", "--data", data, "--ckpt", ckpt, "--iou", 0.5,
               "--pr-out", tmp_path / "pr.csv") == 0
    out = capsys.readouterr().out
    assert out.startswith("overall mAP ")


def test_eval_id_mismatch(tmp_path, data, capsys):
    dets = tmp_path / "d.csv"
    dets.write_text("id,x_min,y_min,width,height,score\nnobody,1,1,5,5,0.9\n")
    assert run("eval", "--data", data, "--dets", dets, "--pr-out", tmp_path / "pr.csv") == 5
    assert "nobody" in capsys.readouterr().err


def test_bench_report(data, ckpt, capsys):
    assert run("bench", "--ckpt", ckpt, "--data", data, "--reps", 1) == 0
    out = capsys.readouterr().out
    head, stages = out.strip().splitlines()
    assert head.startswith("images 3 mean ")
    mean = float(head.split()[3])
    parts = stages.split()[1:]
    total_stages = sum(float(v) for v in parts[1::2])
    assert total_stages <= mean * 1.05


# -- render -----------------------------------------------------------------------


def test_render_properties(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.random((3, 20, 30)) * 255) / 255
    src = tmp_path / "im.ppm"
    write_image_ppm(src, img)
    empty = tmp_path / "e.csv"
    empty.write_text("id,x_min,y_min,width,height,score\n")
    assert run("render", "--image", src, "--dets", empty, "--out", tmp_path / "o.ppm") == 0
    assert (tmp_path / "o.ppm").read_bytes() == src.read_bytes()

    full = tmp_path / "f.csv"
    full.write_text("id,x_min,y_min,width,height,score\nim,0,0,30,20,0.9\n")
    assert run("render", "--image", src, "--dets", full, "--out", tmp_path / "b.ppm") == 0
    out = read_image_ppm(tmp_path / "b.ppm")
    changed = (out != read_image_ppm(src)).any(axis=0)
    border = np.zeros((20, 30), bool)
    border[:2], border[-2:], border[:, :2], border[:, -2:] = True, True, True, True
    assert not changed[~border].any()
    assert (out[:, border] == np.array([[1], [0], [0]])).all()
    assert run("render", "--image", src, "--dets", full, "--out", tmp_path / "c.ppm") == 0
    assert (tmp_path / "c.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()

    off = tmp_path / "off.csv"
    off.write_text("id,x_min,y_min,width,height,score\nim,-10,-10,15,15,0.9\nim,100,100,5,5,0.5\n")
    assert run("render", "--image", src, "--dets", off, "--out", tmp_path / "d.ppm") == 0


def test_render_annotations_colors(tmp_path, data):
    image = sorted((data / "images").iterdir())[0]
    out = tmp_path / "a.ppm"
    assert run("render", "--image", image, "--annotations", data / "annotations.csv",
               "--out", out) == 0
    drawn = read_image_ppm(out)
    rows = [r for r in read_annotations(data / "annotations.csv") if r.id == image.stem]
    for r in rows:
        b = r.annotation.box
        color = [1, 0, 1] if r.annotation.ignore else [0, 1, 0]
        # top-left corner pixel belongs to the outline of the last box drawn over it
        px = drawn[:, int(b.y_min), int(b.x_min)]
        assert px.tolist() in ([1, 0, 1], [0, 1, 0])
        if r is rows[-1]:
            assert px.tolist() == color


# -- entry points -----------------------------------------------------------------


def test_module_and_console_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "evolving_boxes", "gen-data", "--out",
                          str(tmp_path / "m"), "--count", "1"], capture_output=True, text=True)
    assert out.returncode == 0 and "wrote 1 images" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "evolving_boxes", "eval", "--data",
                          str(tmp_path / "missing"), "--dets", "x.csv"],
                         capture_output=True, text=True)
    assert bad.returncode == 2 and bad.stderr.startswith("error:")
