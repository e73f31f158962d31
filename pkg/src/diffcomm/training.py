"""Dual-objective denoiser training and checkpointing.

The loss couples the usual noise-estimation MSE with a pixel-space
reconstruction penalty on the one-step clean-image estimate
x0_hat = (x_t - sqrt(1-ab_t) eps_hat) / sqrt(ab_t):

    total = mse(eps, eps_hat) + beta * (0.5 l1 + 0.5 l2)(x0_hat, x0)

all with mean reduction. With channel_augment the training states are
produced by the full transmit-side path (encode, channel, receiver
alignment) at a random SNR so the estimator sees inference-time
statistics.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import IO

import torch

from .channel import ChannelConfig, apply_channel, sample_channel
from .denoiser import DenoiserConfig, DenoiserNetwork, build_denoiser
from .errors import CheckpointMismatchError, ChannelTooNoisyError
from .schedule import NoiseSchedule

__all__ = [
    "TrainingConfig",
    "LossBreakdown",
    "denoise_loss",
    "reconstruction_loss",
    "total_loss",
    "make_optimizer",
    "train_step",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
    "LoadedCheckpoint",
]

CHECKPOINT_VERSION = 1
AUGMENT_SNR_RANGE = (0.0, 20.0)


@dataclass(frozen=True)
class TrainingConfig:
    beta_tradeoff: float = 0.5
    batch_size: int = 64
    step_budget: int = 5000
    learning_rate: float = 1e-4
    seed: int = 0
    channel_augment: bool = False

    def __post_init__(self) -> None:
        if self.beta_tradeoff < 0.0:
            raise ValueError(f"beta_tradeoff must be >= 0, got {self.beta_tradeoff}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.step_budget < 1:
            raise ValueError(f"step_budget must be >= 1, got {self.step_budget}")
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass(frozen=True)
class LossBreakdown:
    denoise: float
    rec: float
    total: float


def denoise_loss(eps_true: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and estimated noise."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    return torch.mean((eps_true - eps_pred) ** 2)


def reconstruction_loss(x_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Even blend of mean absolute and mean squared pixel error."""
    if x_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x0.shape)}")
    diff = x_hat - x0
    return 0.5 * torch.mean(torch.abs(diff)) + 0.5 * torch.mean(diff * diff)


def total_loss(denoise, rec, beta_tradeoff: float) -> LossBreakdown:
    """Combine the two objectives; the identity total = denoise + beta*rec
    holds to floating-point equality because it is computed exactly so."""
    d = float(denoise)
    r = float(rec)
    return LossBreakdown(denoise=d, rec=r, total=d + beta_tradeoff * r)


def make_optimizer(net: DenoiserNetwork, cfg: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)


def _bhwc_to_bchw(batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4:
        raise ValueError(f"expected a (B, H, W, C) batch, got shape {tuple(batch.shape)}")
    return batch.permute(0, 3, 1, 2).contiguous()


def _augmented_state(
    x0_hwc: torch.Tensor, t: int, s: NoiseSchedule, rng: torch.Generator
) -> tuple[torch.Tensor, int]:
    """Push one image through encode/channel/alignment at a random SNR."""
    from .codec import align_received, encode  # local import to avoid a cycle

    lo, hi = AUGMENT_SNR_RANGE
    snr = lo + (hi - lo) * float(torch.rand((), generator=rng).item())
    seed = int(torch.randint(0, 2**31 - 1, (1,), generator=rng).item())
    ch = sample_channel(ChannelConfig(kind="awgn", snr_db=snr, seed=seed), tuple(x0_hwc.shape))
    sent = encode(x0_hwc, t, ch, s, rng)
    received = apply_channel(sent.values, ch, rng)
    aligned = align_received(received, t, ch, sent.norm_scale, s)
    return aligned.values, aligned.t


def train_step(
    net: DenoiserNetwork,
    optimizer: torch.optim.Optimizer,
    batch: torch.Tensor,
    s: NoiseSchedule,
    cfg: TrainingConfig,
    rng: torch.Generator,
) -> LossBreakdown:
    """One optimization step on a (B, H, W, C) batch in [-1, 1]."""
    x0 = _bhwc_to_bchw(batch)
    b = x0.shape[0]
    t = torch.randint(1, s.T + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    ab = torch.as_tensor(s.alpha_bars, dtype=x0.dtype)[t].view(b, 1, 1, 1)
    x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps

    if cfg.channel_augment:
        for i in range(b):
            try:
                values, t_eff = _augmented_state(batch[i], int(t[i]), s, rng)
            except ChannelTooNoisyError:
                continue  # keep the plain diffusion pair for this item
            t[i] = t_eff
            ab_i = float(s.alpha_bars[t_eff])
            x_t[i] = values.permute(2, 0, 1).to(x0.dtype)
            eps[i] = (x_t[i] - ab_i**0.5 * x0[i]) / (1.0 - ab_i) ** 0.5
        ab = torch.as_tensor(s.alpha_bars, dtype=x0.dtype)[t].view(b, 1, 1, 1)

    eps_hat = net(x_t, t)
    l_denoise = denoise_loss(eps, eps_hat)
    x0_hat = (x_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    l_rec = reconstruction_loss(x0_hat, x0)
    loss = l_denoise + cfg.beta_tradeoff * l_rec
    if not torch.isfinite(loss):
        raise RuntimeError(
            "non-finite training loss: "
            f"denoise={l_denoise.item()}, rec={l_rec.item()}, "
            f"t range {int(t.min())}..{int(t.max())}, "
            f"batch stats mean={float(x0.mean()):.4g} std={float(x0.std()):.4g}"
        )
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return total_loss(l_denoise.item(), l_rec.item(), cfg.beta_tradeoff)


def run_training(
    net: DenoiserNetwork,
    images: torch.Tensor,
    s: NoiseSchedule,
    cfg: TrainingConfig,
    *,
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
    start_step: int = 0,
    log_interval: int = 100,
    log_stream: IO[str] | None = None,
) -> list[tuple[int, LossBreakdown]]:
    """Drive train_step from start_step+1 through cfg.step_budget.

    images is the full (M, H, W, C) training set in [-1, 1]; batches are
    drawn with replacement from the provided (or seed-derived) generator,
    so a (net, optimizer, rng) triple restored from a checkpoint resumes
    the exact uninterrupted sequence.
    """
    if images.ndim != 4:
        raise ValueError(f"expected (M, H, W, C) training images, got shape {tuple(images.shape)}")
    if optimizer is None:
        optimizer = make_optimizer(net, cfg)
    if rng is None:
        rng = torch.Generator().manual_seed(cfg.seed)
    history: list[tuple[int, LossBreakdown]] = []
    window_start = time.perf_counter()
    for step in range(start_step + 1, cfg.step_budget + 1):
        idx = torch.randint(0, images.shape[0], (cfg.batch_size,), generator=rng)
        breakdown = train_step(net, optimizer, images[idx], s, cfg, rng)
        history.append((step, breakdown))
        if log_stream is not None and (step % log_interval == 0 or step == cfg.step_budget):
            elapsed_ms = (time.perf_counter() - window_start) * 1000.0
            log_stream.write(
                f"step={step} denoise={breakdown.denoise:.6f} rec={breakdown.rec:.6f} "
                f"total={breakdown.total:.6f} window_ms={elapsed_ms:.1f}\n"
            )
            log_stream.flush()
            window_start = time.perf_counter()
    return history


@dataclass
class LoadedCheckpoint:
    net: DenoiserNetwork
    config: DenoiserConfig
    optimizer_state: dict | None
    step: int
    rng_state: torch.Tensor | None


def save_checkpoint(
    path,
    net: DenoiserNetwork,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    rng: torch.Generator | None = None,
) -> None:
    """Write a versioned training snapshot (config, weights, optimizer, RNG)."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "model": net.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "rng_state": rng.get_state() if rng is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected: DenoiserConfig | None = None) -> LoadedCheckpoint:
    """Restore a snapshot; refuses version or architecture mismatches."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    config = DenoiserConfig.from_dict(payload["config"])
    if expected is not None and config != expected:
        raise CheckpointMismatchError(
            f"checkpoint architecture {config.to_dict()} does not match the requested {expected.to_dict()}"
        )
    net = build_denoiser(config)
    net.load_state_dict(payload["model"])
    return LoadedCheckpoint(
        net=net,
        config=config,
        optimizer_state=payload.get("optimizer"),
        step=int(payload.get("step", 0)),
        rng_state=payload.get("rng_state"),
    )
