import csv

import numpy as np
import pytest
from PIL import Image

from dualpix.cli import main
from dualpix.scenes import read_png, write_png

TINY = ["--depth", "2", "--base-channels", "4", "--patch", "16", "--patch-stride", "16",
        "--patches-per-epoch", "8", "--batch", "4", "--epochs", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--out", str(data), "--scenes", "4", "--size", "32", "--seed", "7"]) == 0
    runs = root / "runs"
    assert main(["train", "--data", str(data), "--out", str(runs), "--step", "1"] + TINY) == 0
    assert main(["train", "--data", str(data), "--out", str(runs), "--step", "2", "--init",
                 str(runs / "step1_last.mdp"), "--epochs", "1", "--patches-per-epoch", "8", "--batch", "4",
                 "--patch-stride", "16"]) == 0
    return root


def test_gen_data_layout(workspace, capsys):
    data = workspace / "data"
    scenes = sorted(p.name for split in ("train", "test") for p in (data / split).iterdir())
    assert len(scenes) == 4 and (data / "manifest.txt").exists()
    names = sorted(p.name for p in (data / "train" / "scene_0000").iterdir())
    assert names == ["c.png", "defocus.dfm", "l.png", "meta.txt", "r.png", "s.png"]


def test_gen_data_refuses_then_force_is_identical(workspace, tmp_path):
    out = tmp_path / "d"
    args = ["gen-data", "--out", str(out), "--scenes", "3", "--size", "32", "--seed", "7"]
    assert main(args) == 0
    before = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert main(args) == 2
    assert main(args + ["--force"]) == 0
    after = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--scenes", "0"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--data", str(tmp_path), "--step", "2"]) == 2
    assert "two steps" in capsys.readouterr().err


def test_train_outputs(workspace):
    runs = workspace / "runs"
    assert (runs / "step1_epoch000.mdp").exists() and (runs / "step2_last.mdp").exists()
    header = (runs / "history_step2.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,l_mse_s,l_mse_lr,l_c,l_d,total,psnr_s,psnr_lr"


def test_train_rejects_model_flags_that_contradict_init(workspace, tmp_path):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--step", "2",
                 "--init", str(workspace / "runs" / "step1_last.mdp"), "--stitch", "late"])
    assert code == 2


def test_stitch_flag_plumbs_through(workspace, tmp_path):
    from dualpix.model import load_checkpoint
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--step", "1",
                 "--stitch", "none", "--no-validate"] + TINY) == 0
    model, _, _ = load_checkpoint(tmp_path / "step1_last.mdp")
    assert model.config.stitch == "none"


def test_resume(workspace, tmp_path):
    base = ["train", "--data", str(workspace / "data"), "--step", "1", "--no-validate"] + TINY[:-2]
    assert main(base + ["--out", str(tmp_path / "a"), "--epochs", "2"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--epochs", "1"]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--epochs", "2", "--resume"]) == 0
    for name in ("step1_last.mdp", "history_step1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_csv(workspace, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    assert main(["eval", "--checkpoint", str(workspace / "runs" / "step2_last.mdp"),
                 "--data", str(workspace / "data"), "--csv", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["task", "psnr", "ssim", "mae", "n"]
    assert [r[0] for r in rows[1:]] == ["deblur", "dp"]


def test_eval_identity_prints_baseline(workspace, capsys):
    from dualpix.scenes import load_split
    from dualpix.train import identity_baseline
    assert main(["eval", "--identity", "--data", str(workspace / "data")]) == 0
    printed = capsys.readouterr().out.splitlines()
    want = identity_baseline(load_split(workspace / "data", "test"))
    assert printed[1] == want.row("deblur")


def test_eval_missing_checkpoint(workspace, tmp_path):
    out = tmp_path / "eval.csv"
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.mdp"), "--data", str(workspace / "data"),
                 "--csv", str(out)])
    assert code == 1
    assert not out.exists()


def test_infer(workspace, tmp_path, capsys):
    img = tmp_path / "pic.png"
    write_png(img, np.random.default_rng(0).random((30, 21, 3)))
    assert main(["infer", "--checkpoint", str(workspace / "runs" / "step2_last.mdp"), "--image", str(img),
                 "--out", str(tmp_path / "o")]) == 0
    for suffix in "slr":
        assert read_png(tmp_path / "o" / f"pic_{suffix}.png").shape == (30, 21, 3)
    assert "PSNR" in capsys.readouterr().out


def test_infer_grayscale_and_unreadable(workspace, tmp_path):
    Image.fromarray(np.full((16, 16), 90, np.uint8)).save(tmp_path / "g.png")
    ckpt = str(workspace / "runs" / "step2_last.mdp")
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "g.png"), "--out", str(tmp_path)]) == 0
    assert read_png(tmp_path / "g_s.png").shape == (16, 16, 3)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    assert main(["infer", "--checkpoint", ckpt, "--image", str(tmp_path / "bad.png")]) == 1


def test_nimat(workspace, tmp_path, capsys):
    img = tmp_path / "pic.png"
    write_png(img, np.random.default_rng(1).random((24, 24, 3)))
    args = ["nimat", "--checkpoint", str(workspace / "runs" / "step2_last.mdp"), "--image", str(img)]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert "0 45 90 135 180 225 270 315" in capsys.readouterr().out
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == [f"frame_{i:03d}.png" for i in range(8)] + ["order.txt"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_config_file_and_override(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 3\nstitch = late\nlambda2=0.25\n", encoding="utf-8")
    assert main(["dump-config", "train", "--step", "1", "--config", str(cfg), "--epochs", "5"]) == 0
    out = dict(line.split(" = ", 1) for line in capsys.readouterr().out.splitlines())
    assert out["epochs"] == "5" and out["stitch"] == "late" and out["lambda2"] == "0.25"
    assert out["halve_every"] == "4"


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochz = 3\n", encoding="utf-8")
    assert main(["train", "--step", "1", "--config", str(cfg)]) == 2
    assert "epochz" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        from dualpix.cli import build_parser
        build_parser().parse_args(["gen-data", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "--scenes" in text and "(default: 232)" in text
