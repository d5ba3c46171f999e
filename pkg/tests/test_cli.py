import csv
import io

import numpy as np
import pytest

from freqcodec.cli import EXIT_DATA, EXIT_MISMATCH, EXIT_OK, EXIT_USAGE, main
from freqcodec.imageio import read_image, synthetic_textures, write_image
from freqcodec.model import FrequencyCodec
from freqcodec.transform import ModelConfig

TINY_TEXT = "base_channels=8\nlatent_channels=8\nhyper_channels=4\n"


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "tiny.cfg").write_text(TINY_TEXT)
    model = FrequencyCodec(ModelConfig.from_file(tmp_path / "tiny.cfg"), seed=0)
    model.save(tmp_path / "m.ckpt")
    data = tmp_path / "imgs"
    data.mkdir()
    for i, img in enumerate(synthetic_textures(3, seed=11, size=64)):
        write_image(data / f"img{i}.png", img)
    return tmp_path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_encode_decode(workdir, capsys):
    src, box, rec = workdir / "imgs/img0.png", workdir / "a.fotc", workdir / "a.ppm"
    code, out, _ = run(["encode", src, "--checkpoint", workdir / "m.ckpt", "--out", box], capsys)
    assert code == EXIT_OK and "bpp=" in out
    code, _, _ = run(["decode", box, "--checkpoint", workdir / "m.ckpt", "--out", rec,
                      "--splits", "low"], capsys)
    assert code == EXIT_OK
    assert read_image(rec).pixels.shape == (64, 64, 3)


def test_usage_errors(workdir, capsys):
    with pytest.raises(SystemExit) as info:
        main(["encode"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["decode", "x", "--checkpoint", "m", "--out", "y", "--splits", "low,ultra"])
    assert info.value.code == EXIT_USAGE
    capsys.readouterr()


def test_data_errors(workdir, capsys):
    bad = workdir / "bad.fotc"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    code, _, err = run(["decode", bad, "--checkpoint", workdir / "m.ckpt", "--out", workdir / "o.png"], capsys)
    assert code == EXIT_DATA and "magic" in err
    code, _, err = run(["encode", workdir / "missing.png", "--checkpoint", workdir / "m.ckpt",
                        "--out", workdir / "o.fotc"], capsys)
    assert code == EXIT_DATA


def test_model_mismatch_exit_code(workdir, capsys):
    box = workdir / "a.fotc"
    run(["encode", workdir / "imgs/img0.png", "--checkpoint", workdir / "m.ckpt", "--out", box], capsys)
    other = FrequencyCodec(ModelConfig(base_channels=8, latent_channels=16, hyper_channels=4))
    other.save(workdir / "other.ckpt")
    code, _, err = run(["decode", box, "--checkpoint", workdir / "other.ckpt", "--out",
                        workdir / "o.png"], capsys)
    assert code == EXIT_MISMATCH and "model" in err


def test_eval_writes_one_row_per_image_plus_mean(workdir, capsys):
    out_csv = workdir / "rd.csv"
    code, _, _ = run(["eval", workdir / "imgs", "--checkpoint", workdir / "m.ckpt", "--out", out_csv], capsys)
    assert code == EXIT_OK
    rows = list(csv.reader(io.StringIO(out_csv.read_text())))
    assert rows[0] == ["image", "bpp", "psnr", "msssim_db"]
    assert len(rows) == 1 + 3 + 1 and rows[-1][0] == "mean"
    bpps = [float(r[1]) for r in rows[1:-1]]
    assert float(rows[-1][1]) == pytest.approx(np.mean(bpps), abs=1e-5)


def test_analyze_prints_bands_and_allocation(workdir, capsys):
    box = workdir / "a.fotc"
    run(["encode", workdir / "imgs/img1.png", "--checkpoint", workdir / "m.ckpt", "--out", box], capsys)
    code, out, _ = run(["analyze", workdir / "imgs/img1.png", "--container", box,
                        "--out", workdir / "bands.csv"], capsys)
    assert code == EXIT_OK
    shares = [float(line.split(",")[1]) for line in out.splitlines()
              if line.split(",")[0] in ("low", "mid", "high")]
    assert len(shares) == 3 and abs(sum(shares) - 1) < 1e-5
    assert (workdir / "bands.csv").exists()


def test_count_attention(capsys):
    code, out, _ = run(["count", "--attention", "--channels", 64, "--reduction", 8, "--size", 16], capsys)
    assert code == EXIT_OK
    assert "params 5200" in out and "macs 1331200" in out


def test_count_model(capsys):
    code, out, _ = run(["count", "--config", "desk"], capsys)
    assert code == EXIT_OK
    assert "low encoder" in out and "total params" in out


def test_train_small(workdir, capsys):
    (workdir / "train.cfg").write_text("lambda=0.01\nbatch_size=1\nmax_iters=2\neval_every=1\n")
    ckpt = workdir / "t.ckpt"
    code, out, _ = run(["train", workdir / "imgs", "--out", ckpt, "--config", workdir / "train.cfg",
                        "--model-config", workdir / "tiny.cfg", "--csv", workdir / "rd.csv"], capsys)
    assert code == EXIT_OK and ckpt.exists()
    assert len((workdir / "rd.csv").read_text().splitlines()) == 4
    code, _, err = run(["train", workdir / "imgs", "--out", ckpt, "--lambda", -1], capsys)
    assert code == EXIT_DATA and "lambda" in err


def test_analyze_with_checkpoint_reports_split_spectra(workdir, capsys):
    code, out, _ = run(["analyze", workdir / "imgs/img2.png", "--checkpoint", workdir / "m.ckpt",
                        "--config", workdir / "tiny.cfg"], capsys)
    assert code == EXIT_OK
    assert "split reconstructions" in out
    rows = [line.split(",") for line in out.splitlines() if line.count(",") == 3]
    assert [r[0] for r in rows] == ["high", "mid", "low"]
