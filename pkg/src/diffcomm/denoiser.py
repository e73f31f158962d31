"""Noise-estimating UNet shared by transmitter and receiver, with
extractable self-attention maps.

The layer structure is fixed so parameter counts are analytically
checkable from the config alone. With ``ch[l] = base_channels *
channel_multipliers[l]`` and time-embedding width ``E``:

* stem: 3x3 conv, ``image_channels -> ch[0]``
* time path: sinusoidal embedding (width E) -> Linear(E, E) -> SiLU ->
  Linear(E, E)
* down stage ``l``: ResBlock(prev -> ch[l]), then self-attention on
  ``ch[l]`` if ``l`` is in ``attention_levels``, then a stride-2 3x3
  conv (``ch[l] -> ch[l]``) for every stage but the deepest
* middle: ResBlock(ch[-1] -> ch[-1])
* up stage ``l`` (deepest first): concat the down stage's skip,
  ResBlock((cur + ch[l]) -> ch[l]), self-attention if ``l`` is in
  ``attention_levels``, then nearest-x2 upsample + 3x3 conv
  (``ch[l] -> ch[l]``) for every stage but the shallowest
* head: GroupNorm -> SiLU -> 3x3 conv, ``ch[0] -> image_channels``

A ResBlock(c_in -> c_out) is GroupNorm -> SiLU -> 3x3 conv, plus a
Linear(E, c_out) timestep shift, then GroupNorm -> SiLU -> 3x3 conv,
with a 1x1 conv on the residual branch when the width changes. A
self-attention block is GroupNorm -> 1x1 qkv conv (c -> 3c) -> softmax
attention over spatial positions -> 1x1 output conv, residual. Head
count is ``max(1, c // 64)``; it does not affect the parameter count.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError

__all__ = [
    "DenoiserConfig",
    "DenoiserNetwork",
    "AttentionMap",
    "PRESETS",
    "preset",
    "build_denoiser",
    "predict_noise",
    "extract_attention",
    "count_parameters",
    "estimate_macs",
]


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 4
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    attention_levels: frozenset[int] = frozenset({2, 3})
    time_embed_dim: int = 128
    image_channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_levels", frozenset(int(a) for a in self.attention_levels))
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_multipliers) != self.levels:
            raise ConfigurationError(
                f"need {self.levels} channel multipliers, got {len(self.channel_multipliers)}"
            )
        if any(m < 1 for m in self.channel_multipliers):
            raise ConfigurationError("channel multipliers must be positive integers")
        if not self.attention_levels <= set(range(self.levels)):
            raise ConfigurationError(
                f"attention_levels {sorted(self.attention_levels)} outside 0..{self.levels - 1}"
            )
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigurationError("time_embed_dim must be an even integer >= 2")
        if self.image_channels < 1:
            raise ConfigurationError("image_channels must be positive")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_levels": sorted(self.attention_levels),
            "time_embed_dim": self.time_embed_dim,
            "image_channels": self.image_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(
            levels=int(d["levels"]),
            base_channels=int(d["base_channels"]),
            channel_multipliers=tuple(d["channel_multipliers"]),
            attention_levels=frozenset(d["attention_levels"]),
            time_embed_dim=int(d["time_embed_dim"]),
            image_channels=int(d["image_channels"]),
        )


PRESETS: dict[str, DenoiserConfig] = {
    # Full-scale network: six stages, widths 64 -> 512, attention at the
    # two deepest stages. Needs image sides divisible by 32.
    "full": DenoiserConfig(
        levels=6,
        base_channels=64,
        channel_multipliers=(1, 1, 2, 2, 4, 8),
        attention_levels=frozenset({4, 5}),
        time_embed_dim=256,
    ),
    # Workstation-scale default used throughout the tests.
    "desk": DenoiserConfig(
        levels=4,
        base_channels=32,
        channel_multipliers=(1, 2, 2, 4),
        attention_levels=frozenset({2, 3}),
        time_embed_dim=128,
    ),
    # Minimal net for gradient checks and smoke training.
    "tiny": DenoiserConfig(
        levels=2,
        base_channels=8,
        channel_multipliers=(1, 2),
        attention_levels=frozenset({1}),
        time_embed_dim=32,
    ),
}


def preset(name: str) -> DenoiserConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown denoiser preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class AttentionMap:
    """Head-averaged, patch-pooled self-attention matrix.

    ``weights`` is N x N with each row a probability distribution over
    source patches; ``patch_grid`` is the (rows, cols) tiling with
    rows * cols == N.
    """

    weights: np.ndarray
    patch_grid: tuple[int, int]

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"attention matrix must be square, got shape {w.shape}")
        r, c = self.patch_grid
        if r * c != w.shape[0]:
            raise ValueError(f"patch grid {self.patch_grid} does not tile {w.shape[0]} patches")
        if np.any(w < -1e-9):
            raise ValueError("attention weights must be non-negative")
        rows = w.sum(axis=1)
        if not np.allclose(rows, 1.0, atol=1e-5):
            raise ValueError("attention rows must each sum to 1")

    @property
    def n_patches(self) -> int:
        return int(self.weights.shape[0])


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_num_groups(channels), channels)


class _TimestepEmbedding(nn.Module):
    """Sinusoidal position encoding of the integer timestep."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        half = dim // 2
        exponent = -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
        self.register_buffer("freqs", torch.exp(exponent), persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        angles = t.to(self.freqs.dtype)[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class _SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.num_heads = max(1, channels // 64)
        while channels % self.num_heads:
            self.num_heads -= 1
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.softmax = nn.Softmax(dim=-1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Attention probabilities of shape (B, heads, HW, HW)."""
        b, c, h, w = x.shape
        q, k, _ = self.qkv(self.norm(x)).chunk(3, dim=1)
        head_dim = c // self.num_heads
        q = q.reshape(b, self.num_heads, head_dim, h * w).transpose(2, 3)
        k = k.reshape(b, self.num_heads, head_dim, h * w)
        return self.softmax(q @ k / math.sqrt(head_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        head_dim = c // self.num_heads
        q = q.reshape(b, self.num_heads, head_dim, h * w).transpose(2, 3)
        k = k.reshape(b, self.num_heads, head_dim, h * w)
        v = v.reshape(b, self.num_heads, head_dim, h * w).transpose(2, 3)
        attn = self.softmax(q @ k / math.sqrt(head_dim))
        out = (attn @ v).transpose(2, 3).reshape(b, c, h, w)
        return x + self.proj(out)


class _Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class _Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserNetwork(nn.Module):
    """UNet epsilon-estimator conditioned on the diffusion timestep."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        E = config.time_embed_dim

        self.time_embed = _TimestepEmbedding(E)
        self.time_fc1 = nn.Linear(E, E)
        self.time_fc2 = nn.Linear(E, E)
        self.act = nn.SiLU()

        self.stem = nn.Conv2d(config.image_channels, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamples = nn.ModuleList()
        prev = ch[0]
        for level in range(config.levels):
            self.down_blocks.append(_ResBlock(prev, ch[level], E))
            if level in config.attention_levels:
                self.down_attn[str(level)] = _SelfAttention(ch[level])
            if level < config.levels - 1:
                self.downsamples.append(_Downsample(ch[level]))
            prev = ch[level]

        self.middle = _ResBlock(ch[-1], ch[-1], E)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsamples = nn.ModuleList()
        for level in range(config.levels - 1, -1, -1):
            cur = ch[-1] if level == config.levels - 1 else ch[level + 1]
            self.up_blocks.append(_ResBlock(cur + ch[level], ch[level], E))
            if level in config.attention_levels:
                self.up_attn[str(level)] = _SelfAttention(ch[level])
            if level > 0:
                self.upsamples.append(_Upsample(ch[level]))

        self.head_norm = _norm(ch[0])
        self.head_conv = nn.Conv2d(ch[0], config.image_channels, 3, padding=1)

    def _time_vector(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        emb = self.time_embed(t).to(dtype)
        return self.time_fc2(self.act(self.time_fc1(emb)))

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        factor = self.config.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ConfigurationError(
                f"image sides {x.shape[2]}x{x.shape[3]} must be divisible by {factor} "
                f"for a {self.config.levels}-level network"
            )
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        if t.shape[0] != x.shape[0]:
            raise ValueError(f"timestep batch {t.shape[0]} != image batch {x.shape[0]}")
        temb = self._time_vector(t, x.dtype)

        h = self.stem(x)
        skips = []
        for level in range(self.config.levels):
            h = self.down_blocks[level](h, temb)
            if str(level) in self.down_attn:
                h = self.down_attn[str(level)](h)
            skips.append(h)
            if level < self.config.levels - 1:
                h = self.downsamples[level](h)

        h = self.middle(h, temb)

        for i, level in enumerate(range(self.config.levels - 1, -1, -1)):
            h = torch.cat([h, skips[level]], dim=1)
            h = self.up_blocks[i](h, temb)
            if str(level) in self.up_attn:
                h = self.up_attn[str(level)](h)
            if level > 0:
                h = self.upsamples[i](h)

        return self.head_conv(self.act(self.head_norm(h)))


def build_denoiser(cfg: DenoiserConfig | str, seed: int = 0) -> DenoiserNetwork:
    """Construct the network with initialization determined only by seed."""
    if isinstance(cfg, str):
        cfg = preset(cfg)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = DenoiserNetwork(cfg)
    return net


def count_parameters(net: DenoiserNetwork) -> int:
    return sum(p.numel() for p in net.parameters())


def estimate_macs(cfg: DenoiserConfig, image_size: int) -> int:
    """Analytic multiply-accumulate count for one forward evaluation.

    Counts convolutions, linear layers, and attention matmuls on an
    image_size x image_size input; normalization and activations are
    ignored. Mirrors the architecture documented at module top.
    """
    if image_size % cfg.downsample_factor:
        raise ConfigurationError(
            f"image size {image_size} must be divisible by {cfg.downsample_factor}"
        )
    ch = cfg.channels
    E = cfg.time_embed_dim
    ic = cfg.image_channels
    sides = [image_size // 2**level for level in range(cfg.levels)]

    def res_block(side: int, c_in: int, c_out: int) -> int:
        macs = side * side * c_out * 9 * c_in  # conv1
        macs += E * c_out  # timestep projection
        macs += side * side * c_out * 9 * c_out  # conv2
        if c_in != c_out:
            macs += side * side * c_out * c_in  # 1x1 residual projection
        return macs

    def attention(side: int, c: int) -> int:
        tokens = side * side
        macs = tokens * 3 * c * c  # qkv 1x1 conv
        macs += 2 * tokens * tokens * c  # q k^T and attn v
        macs += tokens * c * c  # output 1x1 conv
        return macs

    total = sides[0] * sides[0] * ch[0] * 9 * ic  # stem
    total += 2 * E * E  # time MLP
    prev = ch[0]
    for level in range(cfg.levels):
        total += res_block(sides[level], prev, ch[level])
        if level in cfg.attention_levels:
            total += attention(sides[level], ch[level])
        if level < cfg.levels - 1:
            total += (sides[level] // 2) ** 2 * ch[level] * 9 * ch[level]  # downsample conv
        prev = ch[level]
    total += res_block(sides[-1], ch[-1], ch[-1])  # middle
    for level in range(cfg.levels - 1, -1, -1):
        cur = ch[-1] if level == cfg.levels - 1 else ch[level + 1]
        total += res_block(sides[level], cur + ch[level], ch[level])
        if level in cfg.attention_levels:
            total += attention(sides[level], ch[level])
        if level > 0:
            total += sides[level - 1] ** 2 * ch[level] * 9 * ch[level]  # upsample conv
    total += sides[0] * sides[0] * ic * 9 * ch[0]  # head conv
    return int(total)


def _as_batched(x, channels: int) -> torch.Tensor:
    xt = torch.as_tensor(x)
    if xt.ndim == 3:
        xt = xt.unsqueeze(0)
    if xt.ndim != 4 or xt.shape[1] != channels:
        raise ValueError(f"expected ({channels}, H, W) or (B, {channels}, H, W), got {tuple(xt.shape)}")
    return xt


def predict_noise(
    net: DenoiserNetwork,
    x_t,
    t: int | Sequence[int] | torch.Tensor,
    *,
    max_timestep: int | None = None,
) -> torch.Tensor:
    """Estimate the noise component of x_t. Pure in (parameters, x_t, t)."""
    xt = _as_batched(x_t, net.config.image_channels)
    batched = torch.as_tensor(x_t).ndim == 4
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.ndim == 0:
        tt = tt.expand(xt.shape[0])
    if torch.any(tt < 1):
        raise ValueError(f"timesteps must be >= 1, got {tt.min().item()}")
    if max_timestep is not None and torch.any(tt > max_timestep):
        raise ValueError(f"timesteps must be <= {max_timestep}, got {tt.max().item()}")
    param_dtype = next(net.parameters()).dtype
    with torch.inference_mode():
        eps = net(xt.to(param_dtype), tt)
    eps = eps.clone()  # leave inference mode so callers can compose freely
    eps = eps.to(xt.dtype) if xt.is_floating_point() else eps
    return eps if batched else eps.squeeze(0)


@contextmanager
def _capture_softmax(block: _SelfAttention):
    store: dict[str, torch.Tensor] = {}

    def hook(_module, _inputs, output):
        store["attn"] = output.detach()

    handle = block.softmax.register_forward_hook(hook)
    try:
        yield store
    finally:
        handle.remove()


def _pool_attention(attn: torch.Tensor, token_grid: tuple[int, int], patch_grid: tuple[int, int]) -> np.ndarray:
    """Average-pool a token-level attention matrix down to the patch grid.

    Rows are averaged within a destination patch and columns summed, which
    keeps every pooled row a probability distribution.
    """
    th, tw = token_grid
    pr, pc = patch_grid
    if th % pr or tw % pc:
        raise ConfigurationError(
            f"token grid {th}x{tw} is not divisible by patch grid {pr}x{pc}; "
            "choose a patch count compatible with the attention layer's resolution"
        )
    a = attn.to(torch.float64).numpy().reshape(th, tw, th, tw)
    bh, bw = th // pr, tw // pc
    a = a.reshape(pr, bh, pc, bw, pr, bh, pc, bw)
    summed = a.sum(axis=(5, 7)).mean(axis=(1, 3))  # sum source tokens, average dest tokens
    return summed.reshape(pr * pc, pr * pc)


def extract_attention(
    scorer,
    image,
    t: int = 1,
    *,
    level: int | None = None,
    patch_grid: tuple[int, int] = (4, 4),
) -> AttentionMap:
    """Head-averaged attention of one self-attention stage, pooled to patches.

    ``scorer`` is normally the denoiser itself (its down-path attention at
    ``level``, deepest by default, evaluated at timestep ``t``); any object
    exposing ``attention_map(image, t) -> (N, N) row-stochastic array`` can
    be plugged in instead.
    """
    if not isinstance(scorer, DenoiserNetwork):
        if hasattr(scorer, "attention_map"):
            return AttentionMap(weights=np.asarray(scorer.attention_map(image, t)), patch_grid=patch_grid)
        raise TypeError("scorer must be a DenoiserNetwork or expose attention_map(image, t)")

    net = scorer
    if level is None:
        if not net.config.attention_levels:
            raise ConfigurationError("network has no attention blocks to extract from")
        level = max(net.config.attention_levels)
    if str(level) not in net.down_attn:
        raise ConfigurationError(
            f"level {level} has no attention block; available: {sorted(net.config.attention_levels)}"
        )
    block = net.down_attn[str(level)]

    xt = _as_batched(image, net.config.image_channels)
    if xt.shape[0] != 1:
        raise ValueError("attention extraction expects a single image")
    param_dtype = next(net.parameters()).dtype
    tt = torch.as_tensor([int(t)], dtype=torch.long)
    with _capture_softmax(block) as store, torch.inference_mode():
        net(xt.to(param_dtype), tt)
    attn = store["attn"].mean(dim=(0, 1))  # average batch of 1 and heads
    side_h = xt.shape[2] // 2**level
    side_w = xt.shape[3] // 2**level
    pooled = _pool_attention(attn, (side_h, side_w), patch_grid)
    return AttentionMap(weights=pooled, patch_grid=patch_grid)
