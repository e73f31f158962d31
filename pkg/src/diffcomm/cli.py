"""Command-line entry point.

Subcommands:
  train      fit the denoiser on a dataset directory and save a checkpoint
  transmit   send one image end-to-end and write a triptych figure
  sweep      evaluate the (dataset x channel x SNR x mode) grid to CSV + plots
  profile    parameter/MAC/latency report for adaptive vs fixed receivers

Every subcommand accepts --config (dotted key = value text file), --seed,
and --out, which override the corresponding config keys.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .codec import transmit as transmit_image
from .config import load_experiment_config
from .denoiser import build_denoiser
from .harness import (
    emit_report,
    ingest_dataset,
    profile,
    run_sweep,
    synthetic_image,
    load_image,
)
from .training import (
    load_checkpoint,
    make_optimizer,
    run_training,
    save_checkpoint,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffcomm",
        description="Diffusion-based semantic image transmission simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, needs_checkpoint: bool) -> None:
        p.add_argument("--config", type=Path, default=None, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
        p.add_argument(
            "--checkpoint",
            type=Path,
            required=needs_checkpoint,
            help="denoiser checkpoint path",
        )

    p_train = sub.add_parser("train", help="train the denoiser and save a checkpoint")
    add_common(p_train, needs_checkpoint=False)
    p_train.add_argument("--resume", action="store_true", help="continue from --checkpoint if it exists")

    p_tx = sub.add_parser("transmit", help="send one image end-to-end")
    add_common(p_tx, needs_checkpoint=True)
    p_tx.add_argument("--image", type=Path, default=None, help="image file (default: first dataset image)")
    p_tx.add_argument("--snr", type=float, default=None, help="channel SNR in dB (default: config midpoint)")
    p_tx.add_argument("--mode", choices=("adaptive", "fixed"), default=None)
    p_tx.add_argument("--fixed-steps", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="run the evaluation grid")
    add_common(p_sweep, needs_checkpoint=True)
    p_sweep.add_argument("--mode", choices=("adaptive", "fixed"), default=None, help="restrict to one mode")
    p_sweep.add_argument("--fixed-steps", type=int, default=None)

    p_prof = sub.add_parser("profile", help="complexity and latency report")
    add_common(p_prof, needs_checkpoint=True)
    p_prof.add_argument("--decodes", type=int, default=20)
    p_prof.add_argument("--warmups", type=int, default=3)

    return parser


def _config_overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["output.dir"] = str(args.out)
    if getattr(args, "mode", None) is not None:
        overrides["sweep.modes"] = args.mode
    if getattr(args, "fixed_steps", None) is not None:
        overrides["sweep.fixed_steps"] = str(args.fixed_steps)
    return overrides


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _config_overrides(args))
    if not cfg.dataset_dirs:
        print("train: no dataset directories configured (dataset.dirs)", file=sys.stderr)
        return 2
    datasets = [ingest_dataset(d, cfg.image_size) for d in cfg.dataset_dirs]
    images = torch.cat([d.images for d in datasets], dim=0)
    s = cfg.noise_schedule()

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.checkpoint or out_dir / "checkpoint.pt"

    start_step = 0
    rng = None
    optimizer = None
    if args.resume and Path(ckpt_path).exists():
        loaded = load_checkpoint(ckpt_path, expected=cfg.denoiser_config())
        net = loaded.net
        optimizer = make_optimizer(net, cfg.training)
        if loaded.optimizer_state is not None:
            optimizer.load_state_dict(loaded.optimizer_state)
        start_step = loaded.step
        if loaded.rng_state is not None:
            rng = torch.Generator()
            rng.set_state(loaded.rng_state)
        print(f"resuming from {ckpt_path} at step {start_step}")
    else:
        net = build_denoiser(cfg.denoiser_config(), seed=cfg.seed)

    if optimizer is None:
        optimizer = make_optimizer(net, cfg.training)
    if rng is None:
        rng = torch.Generator().manual_seed(cfg.training.seed)

    log_path = out_dir / "training_log.txt"
    with open(log_path, "a") as log_file:

        class _Tee:
            def write(self, text: str) -> None:
                sys.stdout.write(text)
                log_file.write(text)

            def flush(self) -> None:
                sys.stdout.flush()
                log_file.flush()

        run_training(
            net,
            images,
            s,
            cfg.training,
            optimizer=optimizer,
            rng=rng,
            start_step=start_step,
            log_interval=cfg.log_interval,
            log_stream=_Tee(),
        )
    save_checkpoint(ckpt_path, net, optimizer, step=cfg.training.step_budget, rng=rng)
    print(f"checkpoint written to {ckpt_path}")
    print(f"training log written to {log_path}")
    return 0


def _cmd_transmit(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _config_overrides(args))
    loaded = load_checkpoint(args.checkpoint, expected=cfg.denoiser_config())
    s = cfg.noise_schedule()

    if args.image is not None:
        image = torch.from_numpy(load_image(args.image, cfg.image_size))
    elif cfg.dataset_dirs:
        image = ingest_dataset(cfg.dataset_dirs[0], cfg.image_size, limit=1).images[0]
    else:
        image = synthetic_image(cfg.image_size, seed=cfg.seed)

    snr_db = args.snr if args.snr is not None else sorted(cfg.snrs_db)[len(cfg.snrs_db) // 2]
    capture: dict = {}
    recon, report = transmit_image(
        image,
        snr_db,
        net=loaded.net,
        s=s,
        channel_kind=cfg.channel_kinds[0],
        n_min=cfg.n_min,
        n_max=cfg.n_max,
        patch_grid=cfg.patch_grid,
        mode=cfg.modes[0],
        fixed_steps=cfg.fixed_steps,
        align_mode=cfg.align_mode,
        mask_mode=cfg.mask_mode,
        gain_floor=cfg.gain_floor,
        rng=torch.Generator().manual_seed(cfg.seed),
        capture=capture,
    )

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .plots import plot_triptych

    figure = plot_triptych(
        image,
        torch.clamp(capture["aligned"], -1.0, 1.0),
        recon,
        out_dir / "transmit.png",
        title=f"{cfg.channel_kinds[0]} @ {snr_db:g} dB ({cfg.modes[0]})",
    )
    record_path = out_dir / "transmit_report.txt"
    record_path.write_text(report.to_record() + "\n")
    print(report.to_record())
    print(f"triptych written to {figure}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _config_overrides(args))
    result = run_sweep(cfg, args.checkpoint)
    written = emit_report(result, cfg.output_dir)
    for path in written:
        print(f"wrote {path}")
    for failure in result.failures:
        print(f"cell failed: {failure}", file=sys.stderr)
    return 0 if result.ok else 1


def _cmd_profile(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _config_overrides(args))
    report = profile(cfg, args.checkpoint, decodes=args.decodes, warmups=args.warmups)
    text = report.to_text()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "profile.txt").write_text(text)
    print(text, end="")
    print(f"profile written to {out_dir / 'profile.txt'}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "transmit": _cmd_transmit,
    "sweep": _cmd_sweep,
    "profile": _cmd_profile,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
