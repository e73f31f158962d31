"""End-to-end CLI runs in a temp directory, plus figure rendering."""

import json

import numpy as np
import pytest
import torch
from PIL import Image

from diffcomm.cli import main
from diffcomm.denoiser import build_denoiser
from diffcomm.harness import SweepRow, synthetic_image
from diffcomm.plots import plot_metric_vs_snr, plot_triptych
from diffcomm.training import load_checkpoint, save_checkpoint

PNG_MAGIC = b"\x89PNG"


# --------------------------------------------------------------------- plots


def sample_rows():
    rows = []
    for mode, bump in (("adaptive", 0.0), ("fixed", 0.5)):
        for snr in (0.0, 10.0, 20.0):
            rows.append(
                SweepRow(
                    dataset="d", channel="awgn", snr_db=snr, mode=mode,
                    psnr_db=20 + snr / 2 + bump, ms_ssim=0.8 + snr / 200,
                    patch_updates=48.0, ms_per_image=1.0,
                )
            )
    return rows


def test_plot_metric_vs_snr_writes_png(tmp_path):
    out = plot_metric_vs_snr(sample_rows(), "d", "awgn", "psnr_db", tmp_path / "p.png")
    assert out.read_bytes()[:4] == PNG_MAGIC
    with pytest.raises(ValueError, match="metric"):
        plot_metric_vs_snr(sample_rows(), "d", "awgn", "latency", tmp_path / "x.png")
    with pytest.raises(ValueError, match="no rows"):
        plot_metric_vs_snr(sample_rows(), "other", "awgn", "psnr_db", tmp_path / "x.png")


def test_plot_triptych_writes_png(tmp_path):
    img = synthetic_image(16, seed=0)
    out = plot_triptych(img, img * 0.5, img, tmp_path / "t.png", title="demo")
    assert out.read_bytes()[:4] == PNG_MAGIC


# ----------------------------------------------------------------------- CLI


@pytest.fixture()
def workspace(tmp_path):
    """Dataset dir, tiny checkpoint, and a fast config file."""
    data = tmp_path / "data"
    data.mkdir()
    for i in range(4):
        arr = synthetic_image(32, seed=i).numpy()
        Image.fromarray(np.round((arr + 1) * 127.5).astype(np.uint8), mode="RGB").save(
            data / f"im{i}.png"
        )
    ckpt = tmp_path / "net.pt"
    save_checkpoint(ckpt, build_denoiser("tiny", seed=0))
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        f"dataset.dirs = {data}\n"
        f"output.dir = {tmp_path / 'out'}\n"
        "dataset.image_size = 32\n"
        "denoiser.preset = tiny\n"
        "channel.snrs_db = 10\n"
        "alloc.n_min = 2\n"
        "alloc.n_max = 3\n"
        "sweep.fixed_steps = 3\n"
        "sweep.timing = none\n"
        "training.steps = 2\n"
        "training.batch_size = 2\n"
        "training.lr = 1e-3\n"
    )
    return tmp_path, cfg, ckpt, data


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])


def test_cli_train_and_resume(workspace, capsys):
    tmp, cfg, _, data = workspace
    ckpt = tmp / "trained.pt"
    assert main(["train", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert "checkpoint written" in out
    assert (tmp / "out" / "training_log.txt").exists()
    loaded = load_checkpoint(ckpt)
    assert loaded.step == 2

    # longer budget + --resume continues from the stored step
    more = tmp / "more.cfg"
    more.write_text(cfg.read_text().replace("training.steps = 2", "training.steps = 4"))
    assert main(["train", "--config", str(more), "--checkpoint", str(ckpt), "--resume"]) == 0
    out = capsys.readouterr().out
    assert "resuming from" in out
    assert load_checkpoint(ckpt).step == 4


def test_cli_train_without_dataset(tmp_path, capsys):
    cfg = tmp_path / "none.cfg"
    cfg.write_text("denoiser.preset = tiny\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "no dataset" in capsys.readouterr().err


def test_cli_transmit(workspace, capsys):
    tmp, cfg, ckpt, data = workspace
    rc = main(
        [
            "transmit", "--config", str(cfg), "--checkpoint", str(ckpt),
            "--image", str(data / "im0.png"), "--snr", "10",
        ]
    )
    assert rc == 0
    out_dir = tmp / "out"
    assert (out_dir / "transmit.png").read_bytes()[:4] == PNG_MAGIC
    record = json.loads((out_dir / "transmit_report.txt").read_text())
    assert record["snr_db"] == 10.0
    assert record["mode"] == "adaptive"
    assert len(record["steps"]) == 16
    stdout = capsys.readouterr().out
    assert "triptych written" in stdout


def test_cli_sweep_writes_report(workspace, capsys):
    tmp, cfg, ckpt, _ = workspace
    assert main(["sweep", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
    out_dir = tmp / "out"
    csv = (out_dir / "results.csv").read_text().strip().splitlines()
    assert csv[0].startswith("dataset,channel,snr_db,mode")
    assert len(csv) == 2  # one dataset x awgn x one snr x adaptive
    assert (out_dir / "psnr_data_awgn.png").exists()
    assert (out_dir / "run_manifest.txt").exists()


def test_cli_sweep_mode_override(workspace):
    tmp, cfg, ckpt, _ = workspace
    assert main(["sweep", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "fixed"]) == 0
    csv = (tmp / "out" / "results.csv").read_text()
    assert ",fixed," in csv and ",adaptive," not in csv


def test_cli_sweep_failing_cell_exit_code(workspace, capsys):
    tmp, cfg, ckpt, _ = workspace
    bad = tmp / "bad.cfg"
    bad.write_text(cfg.read_text().replace("channel.snrs_db = 10", "channel.snrs_db = -40, 10"))
    assert main(["sweep", "--config", str(bad), "--checkpoint", str(ckpt)]) == 1
    err = capsys.readouterr().err
    assert "cell failed" in err
    csv = (tmp / "out" / "results.csv").read_text().strip().splitlines()
    assert len(csv) == 2  # surviving 10 dB row still written


def test_cli_profile(workspace, capsys):
    tmp, cfg, ckpt, _ = workspace
    rc = main(
        [
            "profile", "--config", str(cfg), "--checkpoint", str(ckpt),
            "--decodes", "2", "--warmups", "1",
        ]
    )
    assert rc == 0
    text = (tmp / "out" / "profile.txt").read_text()
    assert "parameters            29563" in text
    assert "macs_per_eval" in text
    assert "adaptive_ms_median" in text
    assert "parameters" in capsys.readouterr().out
