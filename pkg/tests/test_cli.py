import csv

import pytest

from conftest import tiny_config
from vivim.cli import main
from vivim.config import save_config


def test_gen_writes_pgm_clips(tmp_path, capsys):
    assert main(["gen", "--seed", "3", "--count", "2", "--frames", "2", "--size", "32",
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["clip_3", "clip_4"]
    assert "wrote 2 clips" in capsys.readouterr().out


def test_pretrain_train_eval_pipeline(tmp_path, capsys):
    aff = tmp_path / "aff.vck"
    assert main(["pretrain-affine", "--steps", "5", "--hidden", "16", "--corpus", "64",
                 "--out", str(aff)]) == 0
    cfg_path = tmp_path / "tiny.txt"
    save_config(tiny_config(epochs=1), cfg_path)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--affine-checkpoint", str(aff),
                 "--no-scan-sp", "--out", str(run)]) == 0
    assert "scan_sp = false" in (run / "config.txt").read_text()
    assert (run / "training.png").exists()
    report = tmp_path / "rep.csv"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.vck"), "--seeds", "1..5:2",
                 "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "clips: 3" in out and "dice:" in out
    assert report.with_suffix(".png").exists()
    assert main(["eval", "--checkpoint", str(run / "checkpoint.vck"), "--seeds", "0..4",
                 "--report", str(report)]) == 1
    assert "training pool" in capsys.readouterr().err


def test_bench_small(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--tmin", "1", "--tmax", "8", "--size", "8", "--dim", "8",
                 "--repeats", "1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["kind"] for r in rows} == {"st_mamba", "full_attention"}
    assert out.with_suffix(".png").exists()


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.vck"), "--report",
                 str(tmp_path / "r.csv")]) == 1
    bad = tmp_path / "bad.txt"
    bad.write_text("nonsense = 1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "unknown key" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["bench", "--kind", "rnn", "--out", "x"])
