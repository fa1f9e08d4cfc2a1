import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from codeprior.cli import main
from codeprior.codec import Bitstream
from codeprior.data import load_image, procedural_corpus, save_image
from codeprior.training import load_vq
from codeprior.vq import import_codebook

sys.path.insert(0, str(Path(__file__).parent))
from tiny import TINY  # noqa: E402

SETS = [a for k, v in TINY.items() for a in ("--set", f"{k}={v}")] + ["--seed", "3"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    run = tmp_path_factory.mktemp("cli") / "run"
    for stage in (1, 2, 3):
        assert main([f"train-stage{stage}", "--out", str(run), *SETS]) == 0
    return run


@pytest.fixture
def corpus(tmp_path):
    ref = tmp_path / "ref"
    ref.mkdir()
    for i, x in enumerate(procedural_corpus(5, 16, 21)):
        save_image(ref / f"img{i}.png", x)
    return ref


def test_dependency_error(tmp_path, capsys):
    assert main(["train-stage2", "--out", str(tmp_path), *SETS]) == 3
    assert "stage 1" in capsys.readouterr().err
    assert main(["enhance", str(tmp_path / "x.png"), "--run", str(tmp_path), "--out", str(tmp_path)]) == 3


def test_config_error(tmp_path, capsys):
    assert main(["train-stage1", "--out", str(tmp_path), "--set", "stage1.batchsize=2",
                 "--set", "nosuch.key=1"]) == 2
    err = capsys.readouterr().err
    assert "stage1.batchsize" in err and "nosuch.key" in err
    bad = tmp_path / "bad.ini"
    bad.write_text("[stage1]\nbatch = zero\n")
    assert main(["train-stage1", "--out", str(tmp_path), "--config", str(bad)]) == 2


def test_data_error(tmp_path, run):
    assert main(["decompress", str(tmp_path / "missing.crs"), "--out", str(tmp_path)]) == 4
    (tmp_path / "junk.crs").write_bytes(b"nonsense")
    assert main(["decompress", str(tmp_path / "junk.crs"), "--out", str(tmp_path)]) == 4
    (tmp_path / "photo.jpg").write_bytes(b"\xff\xd8")
    assert main(["enhance", str(tmp_path / "photo.jpg"), "--run", str(run), "--out", str(tmp_path)]) == 4


def test_enhance_then_evaluate(tmp_path, run, corpus, capsys):
    bits, dec, enh, ev = (tmp_path / d for d in ("bits", "dec", "enh", "eval"))
    assert main(["compress", str(corpus), "--out", str(bits), "--scale", "2", "--bits", "4"]) == 0
    before = {p.name: p.read_bytes() for p in bits.iterdir()}
    assert len(before) == 5
    assert main(["decompress", *map(str, sorted(bits.iterdir())), "--out", str(dec)]) == 0
    # enhancement consumes only the bitstream and the checkpoints
    assert main(["enhance", *map(str, sorted(bits.iterdir())), "--run", str(run), "--out", str(enh)]) == 0
    assert {p.name: p.read_bytes() for p in bits.iterdir()} == before
    # decoded images give the same result up to their 8-bit storage
    enh2 = tmp_path / "enh2"
    assert main(["enhance", *map(str, sorted(dec.iterdir())), "--run", str(run), "--out", str(enh2)]) == 0
    for p in enh.iterdir():
        np.testing.assert_allclose(load_image(p), load_image(enh2 / p.name), atol=2.5 / 255)
    capsys.readouterr()
    assert main(["evaluate", "--reference", str(corpus), "--outputs", str(enh),
                 "--bitstreams", str(bits), "--out", str(ev)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "method,rate_param,bpp,psnr,ms_ssim,perc_proxy"
    with open(ev / "eval_rows.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6
    assert [r["image"] for r in rows[:5]] == [f"img{i}" for i in range(5)]
    assert rows[5]["image"] == "mean"
    assert float(rows[0]["bpp"]) == pytest.approx(3 * 4 / 4)
    mean_psnr = np.mean([float(r["psnr"]) for r in rows[:5]])
    assert float(rows[5]["psnr"]) == pytest.approx(mean_psnr, abs=1e-3)
    assert (ev / "rd_curves.png").stat().st_size > 0


def test_sweep(tmp_path, run, corpus):
    ev = tmp_path / "sweep"
    assert main(["evaluate", "--sweep", "--reference", str(corpus), "--run", str(run),
                 "--out", str(ev)]) == 0
    with open(ev / "rd_table.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 4
    stub = [r for r in rows if r["method"] == "stub"]
    bpp = [float(r["bpp"]) for r in stub]
    assert bpp == sorted(bpp) and len(set(bpp)) == 4
    assert (ev / "rd_curves.png").exists()


def test_stats_and_export(tmp_path, run):
    assert main(["stats", "--run", str(run), "--out", str(tmp_path / "st")]) == 0
    report = json.loads((tmp_path / "st" / "usage.json").read_text())
    assert len(report["counts"]) == 8
    assert (tmp_path / "st" / "usage.png").exists()
    out = tmp_path / "book.cbk"
    assert main(["export-codebook", "--run", str(run), "--out", str(out)]) == 0
    _, vq = load_vq(run)
    np.testing.assert_array_equal(import_codebook(out), vq.codebook.weight.detach().numpy())


def test_train_codec_and_mini_roundtrip(tmp_path, corpus):
    run = tmp_path / "run"
    assert main(["train-codec", "--out", str(run), "--steps", "3", "--rate-index", "2",
                 "--set", "data.patch_size=32", "--set", "data.train_patches=4"]) == 0
    assert (run / "codec" / "mini_r2.pt").exists()
    img = tmp_path / "big"
    img.mkdir()
    save_image(img / "a.png", procedural_corpus(1, 32, 1)[0])
    assert main(["compress", str(img), "--codec", "mini", "--rate-index", "2", "--run", str(run),
                 "--out", str(tmp_path / "b")]) == 0
    b = Bitstream.load(tmp_path / "b" / "a.crs")
    assert (b.codec_id, b.rate_index, b.width, b.height) == (2, 2, 32, 32)
    assert main(["decompress", str(tmp_path / "b" / "a.crs"), "--run", str(run),
                 "--out", str(tmp_path / "d")]) == 0
    assert load_image(tmp_path / "d" / "a.png").shape == (32, 32, 3)


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "codeprior.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train-stage1", "compress", "enhance", "evaluate", "stats", "export-codebook"):
        assert cmd in out.stdout
