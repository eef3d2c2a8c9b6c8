import subprocess
import sys

import numpy as np
import pytest

from addl.cli import main
from addl.corpus import toy_images
from addl.nets import ADDLModel
from addl.pgm import read_pgm, write_pgm


@pytest.fixture(scope="module")
def files(tmp_path_factory, toy_model):
    d = tmp_path_factory.mktemp("cli")
    weights = d / "w.bin"
    weights.write_bytes(toy_model.to_bytes())
    other = d / "other.bin"
    other.write_bytes(ADDLModel(seed=99).to_bytes())
    img = d / "img.pgm"
    write_pgm(img, toy_images(1, 32, seed=3)[0])
    odd = d / "odd.pgm"
    write_pgm(odd, np.random.default_rng(0).uniform(size=(19, 27)))
    return d, weights, other, img, odd


def test_compress_decompress_round_trip(files, capsys):
    d, w, _, img, _ = files
    assert main(["compress", str(img), str(d / "a.addl"), "-q", "40", "-w", str(w)]) == 0
    assert "bpp=" in capsys.readouterr().out
    assert main(["decompress", str(d / "a.addl"), str(d / "a.pgm"), "-w", str(w)]) == 0
    assert read_pgm(d / "a.pgm").shape == read_pgm(img).shape


def test_outputs_are_byte_identical_across_runs(files):
    d, w, _, img, _ = files
    for name in ("r1.addl", "r2.addl"):
        assert main(["compress", str(img), str(d / name), "-w", str(w)]) == 0
    assert (d / "r1.addl").read_bytes() == (d / "r2.addl").read_bytes()


def test_odd_dimensions(files):
    d, w, _, _, odd = files
    assert main(["compress", str(odd), str(d / "o.addl"), "-w", str(w)]) == 0
    assert main(["decompress", str(d / "o.addl"), str(d / "o.pgm"), "-w", str(w)]) == 0
    assert read_pgm(d / "o.pgm").shape == (19, 27)


@pytest.mark.parametrize("mode", ["no-side-info", "no-predictive-coding", "no-gsac"])
def test_ablation_flag(files, mode):
    d, w, _, img, _ = files
    out = d / f"{mode}.addl"
    assert main(["compress", str(img), str(out), "-w", str(w), "--ablation", mode]) == 0
    assert main(["decompress", str(out), str(d / f"{mode}.pgm"), "-w", str(w)]) == 0


def test_usage_errors_write_nothing(files, capsys):
    d, w, _, img, _ = files
    out = d / "never.addl"
    assert main(["compress", str(img), str(out)]) == 2
    assert main(["compress", str(img), str(out), "-w", str(d / "missing.bin")]) == 2
    assert main(["compress", str(d / "missing.pgm"), str(out), "-w", str(w)]) == 2
    assert main(["compress", str(img), str(out), "-w", str(w), "-q", "0"]) == 2
    assert main(["compress", str(img), str(out), "-w", str(w), "--ablation", "bogus"]) == 2
    assert main(["compress", str(img), str(d / "nodir" / "x.addl"), "-w", str(w)]) == 2
    assert main(["frobnicate"]) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_model_mismatch_exit_code(files, capsys):
    d, w, other, img, _ = files
    main(["compress", str(img), str(d / "m.addl"), "-w", str(w)])
    assert main(["decompress", str(d / "m.addl"), str(d / "m.pgm"), "-w", str(other)]) == 4
    assert not (d / "m.pgm").exists()
    assert "mismatch" in capsys.readouterr().err


def test_corrupted_crc_reports_offset(files, capsys):
    d, w, _, img, _ = files
    main(["compress", str(img), str(d / "c.addl"), "-w", str(w)])
    data = bytearray((d / "c.addl").read_bytes())
    data[-1] ^= 0xFF
    (d / "bad.addl").write_bytes(bytes(data))
    assert main(["decompress", str(d / "bad.addl"), str(d / "bad.pgm"), "-w", str(w)]) == 3
    err = capsys.readouterr().err
    assert "CRC" in err and "at byte" in err
    assert not (d / "bad.pgm").exists()


def test_corrupt_weights_exit_code(files):
    d, _, _, img, _ = files
    (d / "junk.bin").write_bytes(b"not a checkpoint")
    assert main(["compress", str(img), str(d / "j.addl"), "-w", str(d / "junk.bin")]) == 3


def test_rd_sweep_csv(files, capsys):
    d, w, _, _, _ = files
    out = d / "rd.csv"
    assert main(["rd-sweep", "synthetic:2", "--qualities", "30,60", "-w", str(w),
                 "--modes", "full,baseline", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("image_id,quality,mode")
    assert len(lines) == 1 + 2 * 2 * 2
    assert main(["rd-sweep", "synthetic:1", "--qualities", "50", "--modes", "baseline"]) == 0
    assert "baseline" in capsys.readouterr().out
    assert main(["rd-sweep", "synthetic:1", "--qualities", "x"]) == 2
    assert main(["rd-sweep", "synthetic:1", "--modes", "nope"]) == 2


def test_rd_sweep_directory(files):
    d, w, _, img, _ = files
    sub = d / "corpus"
    sub.mkdir(exist_ok=True)
    write_pgm(sub / "a.pgm", read_pgm(img))
    assert main(["rd-sweep", str(sub), "--qualities", "50", "-w", str(w), "--out", str(d / "rd2.csv")]) == 0
    assert main(["rd-sweep", str(d / "empty-missing"), "-w", str(w)]) == 2


def test_inspect_params_writes_five_half_size_planes(files):
    d, w, _, img, _ = files
    out = d / "planes"
    assert main(["inspect-params", str(img), str(out), "-w", str(w)]) == 0
    planes = sorted(out.glob("*.pgm"))
    assert len(planes) == 5
    for p in planes:
        a = read_pgm(p)
        assert a.shape == (16, 16)
        assert 0.0 <= a.min() and a.max() <= 1.0


def test_sync_check_command(files, capsys):
    d, w, _, img, _ = files
    assert main(["sync-check", str(img), "-w", str(w)]) == 0
    assert "sync: ok" in capsys.readouterr().out
    assert main(["sync-check", str(img), "-w", str(w), "--perturb-ulp"]) == 4
    assert "MISMATCH" in capsys.readouterr().out


def test_train_command(files):
    d, _, _, _, _ = files
    out, log = d / "t.bin", d / "t.csv"
    assert main(["train", "--stage", "1", "--steps", "2", "--patch", "32", "--batch", "2",
                 "--out", str(out), "--log", str(log)]) == 0
    assert log.read_text().startswith("stage,step")
    assert main(["train", "--stage", "2", "--steps", "1", "--patch", "32", "--batch", "2",
                 "--out", str(d / "t2.bin")]) == 2
    assert main(["train", "--stage", "1", "--patch", "30", "--out", str(d / "t3.bin")]) == 2
    assert not (d / "t3.bin").exists()


def test_entry_point_runs_as_module(files):
    d, w, _, img, _ = files
    r = subprocess.run([sys.executable, "-m", "addl.cli", "decompress", str(d / "missing.addl"), str(d / "x.pgm"),
                        "-w", str(w)], capture_output=True, text=True)
    assert r.returncode == 2
    assert "not found" in r.stderr


def test_selftest_command(capsys):
    assert main(["selftest", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "suites passed" in out
