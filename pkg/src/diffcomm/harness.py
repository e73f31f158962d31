"""Experiment harness: dataset ingestion, metric sweeps over the
(dataset x channel x SNR x mode) grid, profiling, and report emission.

Sweeps are deterministic by construction: every image of every grid
cell gets its own RNG seeded from a hash of (run seed, dataset, channel
kind, SNR, mode, image index), so results do not depend on execution
order and a rerun with the same seed reproduces the CSV byte for byte
(with sweep.timing = none, which pins the wall-clock column to 0).
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .codec import transmit
from .config import ExperimentConfig, config_hash
from .denoiser import DenoiserNetwork, count_parameters, estimate_macs
from .errors import ConfigurationError, IngestionError
from .plots import plot_metric_vs_snr
from .schedule import NoiseSchedule
from .training import load_checkpoint

__all__ = [
    "CSV_HEADER",
    "DatasetHandle",
    "SweepRow",
    "SweepResult",
    "ProfileReport",
    "ingest_dataset",
    "load_image",
    "run_sweep",
    "profile",
    "emit_report",
    "synthetic_image",
]

CSV_HEADER = "dataset,channel,snr_db,mode,psnr_db,ms_ssim,patch_updates,ms_per_image"
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    images: torch.Tensor  # (M, H, W, 3) float32 in [-1, 1]
    files: tuple[str, ...]

    def __len__(self) -> int:
        return int(self.images.shape[0])


def load_image(path: Path, image_size: int) -> np.ndarray:
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        side = min(rgb.size)
        left = (rgb.size[0] - side) // 2
        top = (rgb.size[1] - side) // 2
        rgb = rgb.crop((left, top, left + side, top + side))
        rgb = rgb.resize((image_size, image_size), Image.Resampling.LANCZOS)
        return np.asarray(rgb, dtype=np.float32) / 127.5 - 1.0


def ingest_dataset(directory, image_size: int, limit: int | None = None) -> DatasetHandle:
    """Load a directory of PNG/JPEG files as [-1, 1] square tensors.

    Files are taken in lexicographic name order (limit applies to that
    ordering); each is center-cropped square and resized. Undecodable
    files are skipped, but a directory yielding zero images is an error.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"dataset directory {directory} does not exist")
    files = sorted(
        (p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )
    if limit is not None:
        files = files[: max(0, limit)]
    arrays, kept = [], []
    for path in files:
        try:
            arrays.append(load_image(path, image_size))
            kept.append(path.name)
        except (UnidentifiedImageError, OSError):
            continue
    if not arrays:
        raise IngestionError(f"no decodable PNG/JPEG images in {directory}")
    images = torch.from_numpy(np.stack(arrays, axis=0))
    return DatasetHandle(name=directory.name or str(directory), images=images, files=tuple(kept))


def synthetic_image(size: int, seed: int = 0) -> torch.Tensor:
    """A deterministic smooth test pattern in [-1, 1], shape (size, size, 3).

    Low-frequency sinusoid mixtures per channel: structured enough for
    attention to vary across patches, cheap to generate anywhere.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    channels = []
    for _ in range(3):
        img = np.zeros((size, size))
        for _ in range(4):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        span = np.abs(img).max()
        channels.append(img / span if span > 0 else img)
    return torch.from_numpy(np.stack(channels, axis=-1).astype(np.float32))


@dataclass(frozen=True)
class SweepRow:
    dataset: str
    channel: str
    snr_db: float
    mode: str
    psnr_db: float
    ms_ssim: float
    patch_updates: float
    ms_per_image: float

    def to_csv(self) -> str:
        return (
            f"{self.dataset},{self.channel},{self.snr_db:g},{self.mode},"
            f"{self.psnr_db:.4f},{self.ms_ssim:.6f},{self.patch_updates:.2f},{self.ms_per_image:.3f}"
        )


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    config_digest: str = ""
    seed: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63 - 1)


def _run_cell(
    cfg: ExperimentConfig,
    net: DenoiserNetwork,
    s: NoiseSchedule,
    dataset: DatasetHandle,
    kind: str,
    snr_db: float,
    mode: str,
) -> SweepRow:
    psnrs, ssims, updates, times = [], [], [], []
    for index in range(len(dataset)):
        rng = torch.Generator().manual_seed(
            _derived_seed(cfg.seed, dataset.name, kind, snr_db, mode, index)
        )
        _, report = transmit(
            dataset.images[index],
            snr_db,
            net=net,
            s=s,
            channel_kind=kind,
            n_min=cfg.n_min,
            n_max=cfg.n_max,
            patch_grid=cfg.patch_grid,
            mode=mode,
            fixed_steps=cfg.fixed_steps,
            align_mode=cfg.align_mode,
            mask_mode=cfg.mask_mode,
            gain_floor=cfg.gain_floor,
            rng=rng,
        )
        psnrs.append(report.psnr_db)
        ssims.append(report.ms_ssim)
        updates.append(report.patch_updates)
        times.append(report.decode_ms)
    ms = 0.0 if cfg.timing == "none" else statistics.fmean(times)
    return SweepRow(
        dataset=dataset.name,
        channel=kind,
        snr_db=float(snr_db),
        mode=mode,
        psnr_db=statistics.fmean(psnrs),
        ms_ssim=statistics.fmean(ssims),
        patch_updates=statistics.fmean(updates),
        ms_per_image=ms,
    )


def run_sweep(cfg: ExperimentConfig, checkpoint) -> SweepResult:
    """Evaluate every (dataset, channel kind, SNR, mode) grid cell.

    Failing cells are recorded in SweepResult.failures and skipped; the
    remaining rows are still emitted.
    """
    if not cfg.dataset_dirs:
        raise ConfigurationError("no dataset directories configured (dataset.dirs)")
    loaded = load_checkpoint(checkpoint, expected=cfg.denoiser_config())
    net = loaded.net
    s = cfg.noise_schedule()
    datasets = [ingest_dataset(d, cfg.image_size, limit=cfg.eval_limit) for d in cfg.dataset_dirs]
    result = SweepResult(config_digest=config_hash(cfg), seed=cfg.seed)
    for dataset in datasets:
        for kind in cfg.channel_kinds:
            for snr_db in cfg.snrs_db:
                for mode in cfg.modes:
                    try:
                        result.rows.append(_run_cell(cfg, net, s, dataset, kind, snr_db, mode))
                    except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
                        result.failures.append(f"{dataset.name}/{kind}/{snr_db:g}dB/{mode}: {exc}")
    return result


@dataclass(frozen=True)
class ProfileReport:
    parameters: int
    macs_per_eval: int
    image_size: int
    snr_db: float
    adaptive_ms: float
    fixed_ms: float
    adaptive_updates: float
    fixed_updates: float
    adaptive_psnr_db: float
    fixed_psnr_db: float

    def to_text(self) -> str:
        lines = [
            f"parameters            {self.parameters}",
            f"macs_per_eval         {self.macs_per_eval}",
            f"image_size            {self.image_size}",
            f"snr_db                {self.snr_db:g}",
            f"adaptive_ms_median    {self.adaptive_ms:.3f}",
            f"fixed_ms_median       {self.fixed_ms:.3f}",
            f"adaptive_patch_updates {self.adaptive_updates:.1f}",
            f"fixed_patch_updates   {self.fixed_updates:.1f}",
            f"adaptive_psnr_db      {self.adaptive_psnr_db:.3f}",
            f"fixed_psnr_db         {self.fixed_psnr_db:.3f}",
        ]
        return "\n".join(lines) + "\n"


def profile(cfg: ExperimentConfig, checkpoint, *, decodes: int = 20, warmups: int = 3) -> ProfileReport:
    """Measure decode cost of adaptive vs fixed receivers on one image.

    Wall time is the median over ``decodes`` runs after ``warmups``
    discarded ones. The image is the first configured dataset image, or
    a synthetic pattern when no dataset is configured.
    """
    loaded = load_checkpoint(checkpoint, expected=cfg.denoiser_config())
    net = loaded.net
    s = cfg.noise_schedule()
    if cfg.dataset_dirs:
        image = ingest_dataset(cfg.dataset_dirs[0], cfg.image_size, limit=1).images[0]
    else:
        image = synthetic_image(cfg.image_size, seed=cfg.seed)
    snr_db = sorted(cfg.snrs_db)[len(cfg.snrs_db) // 2]

    stats: dict[str, tuple[float, float, float]] = {}
    for mode in ("adaptive", "fixed"):
        times, updates, psnrs = [], [], []
        for run in range(warmups + decodes):
            rng = torch.Generator().manual_seed(_derived_seed(cfg.seed, "profile", mode, run))
            _, report = transmit(
                image,
                snr_db,
                net=net,
                s=s,
                channel_kind=cfg.channel_kinds[0],
                n_min=cfg.n_min,
                n_max=cfg.n_max,
                patch_grid=cfg.patch_grid,
                mode=mode,
                fixed_steps=cfg.fixed_steps,
                align_mode=cfg.align_mode,
                mask_mode=cfg.mask_mode,
                gain_floor=cfg.gain_floor,
                rng=rng,
            )
            if run >= warmups:
                times.append(report.decode_ms)
                updates.append(report.patch_updates)
                psnrs.append(report.psnr_db)
        stats[mode] = (
            statistics.median(times),
            statistics.fmean(updates),
            statistics.fmean(psnrs),
        )
    return ProfileReport(
        parameters=count_parameters(net),
        macs_per_eval=estimate_macs(net.config, cfg.image_size),
        image_size=cfg.image_size,
        snr_db=float(snr_db),
        adaptive_ms=stats["adaptive"][0],
        fixed_ms=stats["fixed"][0],
        adaptive_updates=stats["adaptive"][1],
        fixed_updates=stats["fixed"][1],
        adaptive_psnr_db=stats["adaptive"][2],
        fixed_psnr_db=stats["fixed"][2],
    )


def emit_report(result: SweepResult, out_dir) -> list[Path]:
    """Write results.csv, per-(dataset, channel) metric plots, and the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    csv_path = out_dir / "results.csv"
    lines = [CSV_HEADER] + [row.to_csv() for row in result.rows]
    csv_path.write_text("\n".join(lines) + "\n")
    written.append(csv_path)

    groups = sorted({(row.dataset, row.channel) for row in result.rows})
    for dataset, channel in groups:
        for metric, stem in (("psnr_db", "psnr"), ("ms_ssim", "msssim")):
            path = out_dir / f"{stem}_{dataset}_{channel}.png"
            plot_metric_vs_snr(result.rows, dataset, channel, metric, path)
            written.append(path)

    manifest = out_dir / "run_manifest.txt"
    manifest_lines = [
        f"config_hash = {result.config_digest}",
        f"seed = {result.seed}",
        f"rows = {len(result.rows)}",
        f"failures = {len(result.failures)}",
    ] + [f"failure: {msg}" for msg in result.failures]
    manifest.write_text("\n".join(manifest_lines) + "\n")
    written.append(manifest)
    return written
