"""Transmitter and receiver built on forward/reverse diffusion.

The transmitter replaces channel coding: it pushes the image part-way
through forward diffusion until the injected noise matches the channel
SNR, normalizes to unit transmit power, and pre-compensates fading.
Channel noise then lands *inside* the diffusion state, so the receiver
only has to re-tag the signal with the effective timestep the combined
noise corresponds to and run reverse diffusion from there.

The receiver spends its reverse steps unevenly: per-patch budgets come
from a self-attention importance score, and each patch follows its own
evenly strided timestep sub-trajectory down to the clean state, applied
through binary spatial masks (one network evaluation per global step).

Images are (H, W, C) tensors in [-1, 1] at this layer; the network's
(B, C, H, W) layout is internal.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .channel import (
    DEFAULT_GAIN_FLOOR,
    ChannelConfig,
    ChannelRealization,
    apply_channel,
    precompensate,
    sample_channel,
)
from .denoiser import AttentionMap, DenoiserNetwork, extract_attention, predict_noise
from .errors import ChannelTooNoisyError, ConfigurationError
from .schedule import NoiseSchedule, jump_coeffs, timestep_for_snr

__all__ = [
    "LatentSignal",
    "StepAllocation",
    "MaskSchedule",
    "TransmissionReport",
    "encode",
    "align_received",
    "importance_weights",
    "allocate_steps",
    "build_mask_schedule",
    "decode",
    "reverse_diffuse",
    "transmit",
]

ALIGN_MODES = ("aligned", "literal")
MASK_MODES = ("strided", "countdown")

Estimator = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class LatentSignal:
    """A diffusion-state tensor tagged with its timestep and power scale."""

    values: torch.Tensor
    t: int
    norm_scale: float

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"timestep must be >= 0, got {self.t}")
        if not self.norm_scale > 0.0:
            raise ValueError(f"norm_scale must be positive, got {self.norm_scale}")


@dataclass(frozen=True)
class StepAllocation:
    """Per-patch reverse-step budgets derived from importance weights."""

    weights: np.ndarray
    norm_weights: np.ndarray
    steps: np.ndarray
    n_min: int
    n_max: int
    grid: tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "norm_weights", np.asarray(self.norm_weights, dtype=np.float64))
        object.__setattr__(self, "steps", np.asarray(self.steps, dtype=np.int64))
        n = self.steps.shape[0]
        if self.grid[0] * self.grid[1] != n:
            raise ValueError(f"grid {self.grid} does not tile {n} patches")
        if np.any(self.steps < self.n_min) or np.any(self.steps > self.n_max):
            raise ValueError("per-patch steps escape the configured [n_min, n_max] bounds")

    @property
    def n_patches(self) -> int:
        return int(self.steps.shape[0])

    @property
    def total_updates(self) -> int:
        return int(self.steps.sum())


@dataclass(frozen=True)
class MaskSchedule:
    """Global reverse trajectory plus per-step binary patch masks.

    ``timesteps`` descends from t_start to 1; ``masks[k, i]`` says patch i
    is updated at global step k; ``per_patch_sequences[i]`` is the
    timestep sub-trajectory patch i follows.
    """

    timesteps: np.ndarray
    masks: np.ndarray
    per_patch_sequences: tuple[np.ndarray, ...]
    mode: str = "strided"

    def __post_init__(self) -> None:
        object.__setattr__(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        object.__setattr__(self, "masks", np.asarray(self.masks, dtype=bool))
        if self.masks.shape[0] != self.timesteps.shape[0]:
            raise ValueError("one mask row per trajectory entry required")
        if np.any(np.diff(self.timesteps) >= 0):
            raise ValueError("trajectory must be strictly decreasing")
        if self.mode not in MASK_MODES:
            raise ValueError(f"mode must be one of {MASK_MODES}, got {self.mode!r}")

    @property
    def n_steps(self) -> int:
        return int(self.timesteps.shape[0])

    @property
    def n_patches(self) -> int:
        return int(self.masks.shape[1])


def _as_hwc(x, channels_hint: int | None = None) -> torch.Tensor:
    xt = torch.as_tensor(x)
    if xt.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image tensor, got shape {tuple(xt.shape)}")
    if channels_hint is not None and xt.shape[2] != channels_hint:
        raise ValueError(f"expected {channels_hint} channels last, got shape {tuple(xt.shape)}")
    return xt if xt.is_floating_point() else xt.to(torch.float32)


def _hwc_to_bchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(2, 0, 1).unsqueeze(0).contiguous()


def _bchw_to_hwc(x: torch.Tensor) -> torch.Tensor:
    return x.squeeze(0).permute(1, 2, 0).contiguous()


def encode(x0, t: int, ch: ChannelRealization, s: NoiseSchedule, rng: torch.Generator) -> LatentSignal:
    """Noise x0 to timestep t, normalize to unit power, pre-compensate fading.

    Returns the transmitted signal: (sqrt(ab_t) x0 + sqrt(1-ab_t) eps) / c
    divided element-wise by the channel gains, where c is the measured RMS
    amplitude of the noised image.
    """
    x0t = _as_hwc(x0)
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} out of range 1..{s.T}")
    if x0t.shape != ch.gains.shape:
        raise ValueError(f"shape mismatch: image {tuple(x0t.shape)} vs gains {tuple(ch.gains.shape)}")
    ab = s.alpha_bars[t]
    eps = torch.randn(x0t.shape, generator=rng, dtype=x0t.dtype)
    x_tilde = math.sqrt(ab) * x0t + math.sqrt(1.0 - ab) * eps
    c = float(torch.sqrt(torch.mean(x_tilde * x_tilde)).item())
    if not c > 0.0:
        raise FloatingPointError("noised signal has zero power; cannot normalize")
    transmitted = precompensate(x_tilde / c, ch)
    return LatentSignal(values=transmitted, t=t, norm_scale=c)


def align_received(
    y: torch.Tensor,
    t: int,
    ch: ChannelRealization,
    c: float,
    s: NoiseSchedule,
    mode: str = "aligned",
) -> LatentSignal:
    """Re-tag the received signal with the timestep its total noise matches.

    After undoing the power normalization (y' = c y), the signal is
    sqrt(ab_t) x0 plus zero-mean noise of variance v = (1-ab_t) + c^2
    sigma_n^2. The effective timestep t' >= t is the one whose
    noise-to-signal ratio (1-ab)/ab best matches v/ab_t; the values are
    rescaled by sqrt(ab_t'/ab_t) so the result is statistically a forward
    diffusion state at t'. mode="literal" skips the search and rescale and
    simply returns c y tagged with t.
    """
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} out of range 1..{s.T}")
    if mode not in ALIGN_MODES:
        raise ValueError(f"mode must be one of {ALIGN_MODES}, got {mode!r}")
    if not c > 0.0:
        raise ValueError(f"norm scale must be positive, got {c}")
    y_scaled = c * y
    if mode == "literal":
        return LatentSignal(values=y_scaled, t=t, norm_scale=c)

    ab_t = s.alpha_bars[t]
    v = (1.0 - ab_t) + c * c * ch.noise_std**2
    target = v / ab_t
    ratios = (1.0 - s.alpha_bars[t:]) / s.alpha_bars[t:]
    if target > ratios[-1]:
        raise ChannelTooNoisyError(
            f"combined noise-to-signal ratio {target:.4g} exceeds the schedule's maximum "
            f"{ratios[-1]:.4g} (t={t}, T={s.T}); encode at a larger timestep, raise the "
            "channel SNR, or extend the schedule"
        )
    t_eff = t + int(np.argmin(np.abs(ratios - target)))
    values = math.sqrt(s.alpha_bars[t_eff] / ab_t) * y_scaled
    return LatentSignal(values=values, t=t_eff, norm_scale=c)


def importance_weights(attention: AttentionMap | np.ndarray) -> np.ndarray:
    """Per-patch importance: how much the average patch attends to each one.

    Column means of the row-stochastic attention matrix; they sum to 1.
    """
    a = attention.weights if isinstance(attention, AttentionMap) else np.asarray(attention, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"attention matrix must be square, got shape {a.shape}")
    return a.mean(axis=0)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def allocate_steps(w, n_min: int, n_max: int, grid: tuple[int, int] | None = None) -> StepAllocation:
    """Map importance weights to integer per-patch step budgets.

    Weights are min-max normalized to [0, 1] and interpolated linearly
    between n_min and n_max, rounding halves away from zero. All-equal
    weights normalize to 0.5 everywhere (midpoint budget).
    """
    weights = np.asarray(w, dtype=np.float64).reshape(-1)
    if weights.size == 0:
        raise ValueError("weights must be non-empty")
    if not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite")
    if not (isinstance(n_min, (int, np.integer)) and isinstance(n_max, (int, np.integer))):
        raise ValueError("step bounds must be integers")
    if not 1 <= n_min <= n_max:
        raise ValueError(f"need 1 <= n_min <= n_max, got n_min={n_min}, n_max={n_max}")
    lo, hi = weights.min(), weights.max()
    if hi > lo:
        norm = (weights - lo) / (hi - lo)
    else:
        norm = np.full_like(weights, 0.5)
    steps = _round_half_away(n_min + norm * (n_max - n_min)).astype(np.int64)
    if grid is None:
        side = math.isqrt(weights.size)
        grid = (side, side) if side * side == weights.size else (1, weights.size)
    return StepAllocation(
        weights=weights, norm_weights=norm, steps=steps, n_min=int(n_min), n_max=int(n_max), grid=grid
    )


def _strided_ints(t_start: int, n: int) -> np.ndarray:
    """n evenly spaced integers from t_start down to 1, endpoints included.

    n = 1 degenerates to [t_start]: the single update must happen at the
    state's actual timestep (it then jumps straight to clean).
    """
    if n == 1:
        return np.array([t_start], dtype=np.int64)
    raw = np.linspace(float(t_start), 1.0, n)
    return np.rint(raw).astype(np.int64)


def _snap_subsequence(trajectory: np.ndarray, n: int) -> np.ndarray:
    """Pick n entries of the descending trajectory, evenly spread, endpoints kept.

    Ideal (real-valued) timesteps are snapped to the nearest trajectory
    entry, ties toward the larger timestep; collisions shift to the next
    free entry downward (then upward as a last resort).
    """
    k_total = trajectory.shape[0]
    if n >= k_total:
        return trajectory.copy()
    if n == 1:
        # a single update is only consistent at the starting timestep
        return trajectory[:1].copy()
    taken = np.zeros(k_total, dtype=bool)
    taken[0] = taken[-1] = True  # endpoints reserved
    ideal = np.linspace(float(trajectory[0]), float(trajectory[-1]), n)[1:-1]
    for v in ideal:
        # first argmin of the distance = larger timestep on ties (descending order)
        k = int(np.argmin(np.abs(trajectory - v)))
        k = min(max(k, 1), k_total - 2)
        j = k
        while j <= k_total - 2 and taken[j]:
            j += 1
        if j > k_total - 2:
            j = k
            while taken[j]:
                j -= 1
        taken[j] = True
    return trajectory[taken]


def build_mask_schedule(alloc: StepAllocation, t_start: int, mode: str = "strided") -> MaskSchedule:
    """Lay out which patches are updated at which global reverse step.

    The global trajectory is min(n_max, t_start) evenly strided timesteps
    from t_start down to 1. In "strided" mode each patch follows its own
    evenly spread length-n_i sub-trajectory of the global one (so every
    patch reaches the clean state); in "countdown" mode patch i is active
    on the first n_i global steps and then freezes at its residual noise
    level.
    """
    if t_start < 1:
        raise ValueError(f"t_start must be >= 1, got {t_start}")
    if mode not in MASK_MODES:
        raise ValueError(f"mode must be one of {MASK_MODES}, got {mode!r}")
    if int(alloc.steps.max()) > t_start:
        raise ConfigurationError(
            f"allocation asks for {int(alloc.steps.max())} steps but only {t_start} "
            "timesteps are available; lower the step bounds or encode at a larger timestep"
        )
    k_total = min(alloc.n_max, t_start)
    trajectory = _strided_ints(t_start, k_total)
    n = alloc.n_patches
    masks = np.zeros((k_total, n), dtype=bool)
    sequences: list[np.ndarray] = []
    index_of = {int(t): k for k, t in enumerate(trajectory)}
    for i in range(n):
        n_i = int(alloc.steps[i])
        seq = trajectory[:n_i].copy() if mode == "countdown" else _snap_subsequence(trajectory, n_i)
        sequences.append(seq)
        for t in seq:
            masks[index_of[int(t)], i] = True
    return MaskSchedule(timesteps=trajectory, masks=masks, per_patch_sequences=tuple(sequences), mode=mode)


def _patch_bounds(grid: tuple[int, int], height: int, width: int) -> list[tuple[int, int, int, int]]:
    rows, cols = grid
    if height % rows or width % cols:
        raise ConfigurationError(f"patch grid {grid} does not tile a {height}x{width} image")
    ph, pw = height // rows, width // cols
    return [(r * ph, (r + 1) * ph, c * pw, (c + 1) * pw) for r in range(rows) for c in range(cols)]


def _jump_targets(ms: MaskSchedule) -> np.ndarray:
    """Destination timestep for each (global step, patch); -1 where inactive."""
    k_total, n = ms.masks.shape
    index_of = {int(t): k for k, t in enumerate(ms.timesteps)}
    targets = np.full((k_total, n), -1, dtype=np.int64)
    for i, seq in enumerate(ms.per_patch_sequences):
        for j, t in enumerate(seq):
            k = index_of[int(t)]
            if j + 1 < len(seq):
                targets[k, i] = int(seq[j + 1])
            elif ms.mode == "strided":
                targets[k, i] = 0
            else:  # countdown: one more stride along the global trajectory, then freeze
                targets[k, i] = int(ms.timesteps[k + 1]) if k + 1 < k_total else 0
    return targets


def decode(
    y: LatentSignal,
    alloc: StepAllocation,
    net: DenoiserNetwork | None,
    s: NoiseSchedule,
    rng: torch.Generator | None = None,
    *,
    estimator: Estimator | None = None,
    deterministic: bool = False,
    mask_mode: str = "strided",
    schedule: MaskSchedule | None = None,
) -> torch.Tensor:
    """Masked reverse diffusion from y.t down to the clean state.

    Each global step runs the noise estimator once on the full tensor and
    writes the reverse update only into that step's active patches, each
    jumping to its own next sub-trajectory timestep. Returns the (H, W, C)
    reconstruction clamped to [-1, 1]. With deterministic=True all jump
    noise is suppressed (sigma = 0), making the pass a pure function.
    """
    if y.t < 1:
        raise ValueError(f"decode needs a noisy state, got timestep {y.t}")
    est: Estimator = estimator if estimator is not None else lambda xb, t: predict_noise(net, xb, t)
    if estimator is None and net is None:
        raise ValueError("either a network or an explicit estimator is required")
    ms = schedule if schedule is not None else build_mask_schedule(alloc, y.t, mode=mask_mode)
    if ms.n_patches != alloc.n_patches:
        raise ValueError("mask schedule and allocation disagree on the patch count")
    if int(ms.timesteps[0]) != y.t:
        raise ValueError(f"mask schedule starts at {int(ms.timesteps[0])} but the signal is at {y.t}")

    x = _hwc_to_bchw(_as_hwc(y.values)).clone()
    bounds = _patch_bounds(alloc.grid, x.shape[2], x.shape[3])
    targets = _jump_targets(ms)
    if not deterministic and rng is None:
        rng = torch.Generator()

    for k in range(ms.n_steps):
        t_a = int(ms.timesteps[k])
        z = None if deterministic else torch.randn(x.shape, generator=rng, dtype=x.dtype)
        active = np.flatnonzero(ms.masks[k])
        if active.size == 0:
            continue
        eps = est(x, t_a)
        for i in active:
            cf = jump_coeffs(s, t_a, int(targets[k, i]))
            r0, r1, c0, c1 = bounds[i]
            upd = cf.inv_sqrt_alpha * (x[..., r0:r1, c0:c1] - cf.noise_coeff * eps[..., r0:r1, c0:c1])
            if not deterministic and cf.sigma > 0.0:
                upd = upd + cf.sigma * z[..., r0:r1, c0:c1]
            x[..., r0:r1, c0:c1] = upd
    return _bchw_to_hwc(torch.clamp(x, -1.0, 1.0))


def reverse_diffuse(
    y: LatentSignal,
    steps: int,
    net: DenoiserNetwork | None,
    s: NoiseSchedule,
    rng: torch.Generator | None = None,
    *,
    estimator: Estimator | None = None,
    deterministic: bool = False,
) -> torch.Tensor:
    """Unmasked strided reverse diffusion over the whole tensor.

    Reference path for decode: the arithmetic per step is identical, so a
    uniform all-patches-active allocation reproduces this bit for bit.
    """
    if y.t < 1:
        raise ValueError(f"reverse diffusion needs a noisy state, got timestep {y.t}")
    if not 1 <= steps <= y.t:
        raise ValueError(f"steps must be in 1..{y.t}, got {steps}")
    est: Estimator = estimator if estimator is not None else lambda xb, t: predict_noise(net, xb, t)
    if estimator is None and net is None:
        raise ValueError("either a network or an explicit estimator is required")
    trajectory = _strided_ints(y.t, steps)
    x = _hwc_to_bchw(_as_hwc(y.values)).clone()
    if not deterministic and rng is None:
        rng = torch.Generator()
    for k, t_a in enumerate(trajectory):
        t_b = int(trajectory[k + 1]) if k + 1 < len(trajectory) else 0
        z = None if deterministic else torch.randn(x.shape, generator=rng, dtype=x.dtype)
        cf = jump_coeffs(s, int(t_a), t_b)
        upd = cf.inv_sqrt_alpha * (x - cf.noise_coeff * est(x, int(t_a)))
        if not deterministic and cf.sigma > 0.0:
            upd = upd + cf.sigma * z
        x = upd
    return _bchw_to_hwc(torch.clamp(x, -1.0, 1.0))


@dataclass
class TransmissionReport:
    """Everything the harness wants to know about one transmission."""

    snr_db: float
    channel_kind: str
    mode: str
    t_encode: int
    t_aligned: int
    norm_scale: float
    steps: list[int] = field(default_factory=list)
    patch_updates: int = 0
    decode_ms: float = 0.0
    psnr_db: float | None = None
    ms_ssim: float | None = None

    def to_record(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_record(cls, line: str) -> "TransmissionReport":
        return cls(**json.loads(line))


def transmit(
    x0,
    snr_db: float,
    *,
    net: DenoiserNetwork,
    s: NoiseSchedule,
    channel_kind: str = "awgn",
    n_min: int = 100,
    n_max: int = 200,
    patch_grid: tuple[int, int] = (4, 4),
    mode: str = "adaptive",
    fixed_steps: int = 150,
    align_mode: str = "aligned",
    mask_mode: str = "strided",
    gain_floor: float = DEFAULT_GAIN_FLOOR,
    rng: torch.Generator | None = None,
    seed: int = 0,
    estimator: Estimator | None = None,
    deterministic: bool = False,
    compute_metrics: bool = True,
    capture: dict | None = None,
) -> tuple[torch.Tensor, TransmissionReport]:
    """One image end-to-end: encode, channel, align, allocate, decode.

    The encode timestep matches the forward-diffusion noise-to-signal
    ratio to the channel SNR corrected by the measured source power. In
    "fixed" mode every patch gets fixed_steps reverse steps and attention
    is never consulted; "adaptive" extracts attention from the aligned
    received signal and allocates n_min..n_max steps by importance. Step
    bounds are clamped to the aligned timestep when the channel is clean
    enough to leave fewer timesteps than the configured budget.
    """
    if mode not in ("adaptive", "fixed"):
        raise ValueError(f"mode must be 'adaptive' or 'fixed', got {mode!r}")
    x0t = _as_hwc(x0)
    if rng is None:
        rng = torch.Generator().manual_seed(seed)

    power = float(torch.mean(x0t * x0t).item())
    snr_corrected = snr_db - 10.0 * math.log10(max(power, 1e-12))
    t_enc = timestep_for_snr(s, snr_corrected)

    channel_seed = int(torch.randint(0, 2**31 - 1, (1,), generator=rng).item())
    ch_cfg = ChannelConfig(kind=channel_kind, snr_db=snr_db, gain_floor=gain_floor, seed=channel_seed)
    ch = sample_channel(ch_cfg, tuple(x0t.shape))

    sent = encode(x0t, t_enc, ch, s, rng)
    received = apply_channel(sent.values, ch, rng)
    aligned = align_received(received, t_enc, ch, sent.norm_scale, s, mode=align_mode)
    if capture is not None:
        capture.update(sent=sent.values, received=received, aligned=aligned.values)

    n_patches = patch_grid[0] * patch_grid[1]
    if mode == "fixed":
        budget = min(fixed_steps, aligned.t)
        alloc = allocate_steps(np.full(n_patches, 1.0 / n_patches), budget, budget, grid=patch_grid)
    else:
        amap = extract_attention(net, _hwc_to_bchw(aligned.values).squeeze(0), t=aligned.t, patch_grid=patch_grid)
        weights = importance_weights(amap)
        lo, hi = min(n_min, aligned.t), min(n_max, aligned.t)
        alloc = allocate_steps(weights, lo, hi, grid=patch_grid)

    start = time.perf_counter()
    recon = decode(
        aligned, alloc, net, s, rng,
        estimator=estimator, deterministic=deterministic, mask_mode=mask_mode,
    )
    decode_ms = (time.perf_counter() - start) * 1000.0

    report = TransmissionReport(
        snr_db=float(snr_db),
        channel_kind=channel_kind,
        mode=mode,
        t_encode=t_enc,
        t_aligned=aligned.t,
        norm_scale=sent.norm_scale,
        steps=[int(v) for v in alloc.steps],
        patch_updates=alloc.total_updates,
        decode_ms=decode_ms,
    )
    if compute_metrics:
        from .metrics import ms_ssim as _ms_ssim
        from .metrics import psnr as _psnr
        from .metrics import to_uint8

        ref = to_uint8(x0t.numpy())
        out = to_uint8(recon.numpy())
        report.psnr_db = _psnr(ref, out)
        report.ms_ssim = _ms_ssim(ref, out)
    return recon, report
