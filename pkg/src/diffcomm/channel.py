"""Flat-fading channel simulation with transmitter-side pre-compensation.

The fading matrix is diagonal: one real non-negative gain per tensor
element, so inversion is element-wise division. Gains are clipped below
at ``gain_floor`` when sampled, which bounds the transmit-power blow-up
of pre-compensation on deep fades.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError

CHANNEL_KINDS = ("awgn", "rayleigh")
DEFAULT_GAIN_FLOOR = 0.1


@dataclass(frozen=True)
class ChannelConfig:
    kind: str = "awgn"
    snr_db: float = 10.0
    gain_floor: float = DEFAULT_GAIN_FLOOR
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in CHANNEL_KINDS:
            raise ConfigurationError(f"unknown channel kind {self.kind!r}, expected one of {CHANNEL_KINDS}")
        if not (0.0 <= self.gain_floor < 1.0):
            raise ConfigurationError(f"gain_floor must be in [0, 1), got {self.gain_floor}")
        if not math.isfinite(self.snr_db):
            raise ConfigurationError(f"snr_db must be finite, got {self.snr_db}")


@dataclass(frozen=True)
class ChannelRealization:
    """One sampled transmission: per-element gains and the noise level."""

    gains: torch.Tensor
    noise_std: float
    kind: str


def noise_std_for_snr(snr_db: float, signal_power: float = 1.0) -> float:
    """Noise amplitude giving the requested SNR for the given signal power."""
    if signal_power <= 0.0:
        raise ValueError(f"signal_power must be > 0, got {signal_power}")
    return math.sqrt(signal_power / 10.0 ** (snr_db / 10.0))


def sample_channel(cfg: ChannelConfig, shape: tuple[int, ...]) -> ChannelRealization:
    """Sample fading gains for one transmission of the given tensor shape.

    awgn gains are all 1. rayleigh gains are i.i.d. Rayleigh magnitudes
    scaled to E[h^2] = 1, then clipped below at cfg.gain_floor. Sampling
    is a pure function of cfg.seed.
    """
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    if cfg.kind == "awgn":
        gains = torch.ones(shape)
    else:
        gen = torch.Generator().manual_seed(cfg.seed)
        # |N(0, 1/2) + j N(0, 1/2)| is Rayleigh with E[h^2] = 1
        re = torch.randn(shape, generator=gen)
        im = torch.randn(shape, generator=gen)
        gains = torch.sqrt((re * re + im * im) / 2.0)
        gains = torch.clamp(gains, min=cfg.gain_floor)
    return ChannelRealization(gains=gains, noise_std=noise_std_for_snr(cfg.snr_db), kind=cfg.kind)


def apply_channel(x: torch.Tensor, ch: ChannelRealization, rng: torch.Generator) -> torch.Tensor:
    """Received signal gains * x + n with n ~ N(0, noise_std^2) i.i.d."""
    if x.shape != ch.gains.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs gains {tuple(ch.gains.shape)}")
    y = ch.gains * x
    if ch.noise_std > 0.0:
        y = y + ch.noise_std * torch.randn(x.shape, generator=rng, dtype=x.dtype)
    return y


def precompensate(x_tilde: torch.Tensor, ch: ChannelRealization) -> torch.Tensor:
    """Divide element-wise by the (clipped) gains so fading cancels at the receiver."""
    if x_tilde.shape != ch.gains.shape:
        raise ValueError(f"shape mismatch: x {tuple(x_tilde.shape)} vs gains {tuple(ch.gains.shape)}")
    if torch.any(ch.gains <= 0.0):
        raise FloatingPointError("channel has a zero gain; sample with gain_floor > 0")
    return x_tilde / ch.gains
