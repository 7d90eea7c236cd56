import numpy as np
import pytest

from ossir import checkpoint, ppm
from ossir.cli import main

FAST = ["--set", "iterations=2", "--set", "batch=1", "--set", "patch_schedule=16", "--set", "log_every=1",
        "--set", "data.count=2", "--set", "data.eval_count=1", "--set", "data.size=32"]


def test_count_real_sr_prints_gap(capsys):
    assert main(["count"]) == 0
    out = capsys.readouterr().out
    assert "reference params 10.50 M, gap" in out and "reference FLOPs 20.50 G, gap" in out


def test_count_tiny(capsys):
    assert main(["count", "--preset", "tiny", "--size", "32", "32"]) == 0
    assert "at 32x32" in capsys.readouterr().out


def test_train_eval_infer(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--out", str(run), "--seed", "1"] + FAST) == 0
    assert (run / "log.csv").read_text().startswith("iter,loss,psnr,ssim\n")
    model = checkpoint.load(run / "model.vmir")
    assert model.config.seed == 1
    assert "eval psnr" in capsys.readouterr().out

    assert main(["eval", str(run / "model.vmir"), "--set", "data.eval_count=1", "--set", "data.size=32"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split(",")[0] for line in lines] == ["psnr", "ssim", "input_psnr", "input_ssim"]

    # odd extents are reflect-padded to a multiple of 8 and cropped back
    img = np.random.default_rng(0).random((3, 13, 10))
    ppm.write_ppm(tmp_path / "in.ppm", img)
    assert main(["infer", str(run / "model.vmir"), str(tmp_path / "in.ppm"), str(tmp_path / "out.ppm")]) == 0
    assert ppm.read_ppm(tmp_path / "out.ppm").pixels.shape == (13, 10, 3)


def test_config_file_and_override_order(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# tiny run\niterations=5\nomni_scan=false\n")
    run = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--out", str(run)] + FAST) == 0
    capsys.readouterr()
    rows = (run / "log.csv").read_text().splitlines()
    assert len(rows) == 3  # --set iterations=2 wins over the file
    assert checkpoint.load(run / "model.vmir").config.omni_scan is False


def test_synth_writes_pairs(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["synth", "--out", str(out), "--set", "data.count=2", "--set", "data.size=16"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["000_hq.ppm", "000_lq.ppm", "001_hq.ppm", "001_lq.ppm"]
    assert ppm.read_ppm(out / "000_hq.ppm").pixels.shape == (16, 16, 3)


def test_bench_cli(tmp_path, capsys):
    assert main(["bench", "--sizes", "8x8", "8x16", "--channels", "4", "--repeats", "1",
                 "--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "b.csv").read_text().startswith("pixels,seconds\n64,")
    assert "log-log slope" in capsys.readouterr().out


def test_bad_key_exits_2(capsys):
    assert main(["count", "--set", "bogus=1"]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["count", "--set", "noequals"]) == 2


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
