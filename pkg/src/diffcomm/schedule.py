"""Diffusion noise schedule and the SNR <-> timestep correspondence.

Convention: timestep 0 is clean data and timesteps run 1..T.  All tables
are stored as float64 arrays of length T+1 indexed by timestep, with the
index-0 entries fixed at beta=0, alpha=1, alpha_bar=1 (empty product).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta/alpha/alpha_bar tables for a T-step schedule."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


@dataclass(frozen=True)
class ReverseStepCoeffs:
    """Coefficients of one reverse update x_b = inv_sqrt_alpha * (x_a - noise_coeff * eps_hat) + sigma * z."""

    inv_sqrt_alpha: float
    noise_coeff: float
    sigma: float


def build_schedule(
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build the linear schedule beta_t = beta_start + (t-1)/(T-1) * (beta_end - beta_start).

    For T = 1 the single beta is beta_start.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.zeros(T + 1, dtype=np.float64)
    if T == 1:
        betas[1] = beta_start
    else:
        steps = np.arange(1, T + 1, dtype=np.float64)
        betas[1:] = beta_start + (steps - 1.0) / (T - 1.0) * (beta_end - beta_start)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # sequential product, alpha_bars[0] == 1 exactly
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def snr_of_timestep(s: NoiseSchedule, t: int) -> float:
    """SNR in dB, 10*log10(alpha_bar_t / (1 - alpha_bar_t)), of a unit-power source at timestep t.

    t = 0 is noiseless and returns math.inf.
    """
    if not 0 <= t <= s.T:
        raise ValueError(f"timestep {t} out of range 0..{s.T}")
    if t == 0:
        return math.inf
    ab = s.alpha_bars[t]
    return 10.0 * math.log10(ab / (1.0 - ab))


def timestep_for_snr(s: NoiseSchedule, snr_db: float) -> int:
    """Timestep whose schedule SNR is nearest the requested SNR.

    Nearest match in linear SNR over t = 1..T, ties toward the smaller t;
    saturates at 1 for a nearly noiseless channel and at T for a channel
    noisier than the schedule tail.
    """
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    target = 10.0 ** (snr_db / 10.0)
    ab = s.alpha_bars[1:]
    snrs = ab / (1.0 - ab)
    return int(np.argmin(np.abs(snrs - target))) + 1


def reverse_coeffs(s: NoiseSchedule, t: int) -> ReverseStepCoeffs:
    """Coefficients of the single reverse step t -> t-1.

    sigma^2 is the posterior variance (1-alpha_bar_{t-1})/(1-alpha_bar_t) * beta_t,
    forced to 0 at t = 1 so the final step is deterministic.
    """
    if not 1 <= t <= s.T:
        raise ValueError(f"timestep {t} out of range 1..{s.T} (no reverse step at 0)")
    return jump_coeffs(s, t, t - 1)


def jump_coeffs(s: NoiseSchedule, t_from: int, t_to: int) -> ReverseStepCoeffs:
    """Reverse-update coefficients for a strided jump t_from -> t_to.

    Uses the effective alpha_bar_{t_from}/alpha_bar_{t_to} in place of the
    single-step alpha; t_to = t_from - 1 reproduces the plain reverse step.
    sigma = 0 whenever t_to = 0 (the jump lands on clean data).
    """
    if not 1 <= t_from <= s.T:
        raise ValueError(f"t_from {t_from} out of range 1..{s.T}")
    if not 0 <= t_to < t_from:
        raise ValueError(f"t_to {t_to} must satisfy 0 <= t_to < t_from ({t_from})")
    ab_from = s.alpha_bars[t_from]
    ab_to = s.alpha_bars[t_to]
    alpha_eff = ab_from / ab_to
    inv_sqrt_alpha = 1.0 / math.sqrt(alpha_eff)
    noise_coeff = (1.0 - alpha_eff) / math.sqrt(1.0 - ab_from)
    if t_to == 0:
        sigma = 0.0
    else:
        var = (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - alpha_eff)
        sigma = math.sqrt(max(var, 0.0))
    return ReverseStepCoeffs(
        inv_sqrt_alpha=float(inv_sqrt_alpha),
        noise_coeff=float(noise_coeff),
        sigma=float(sigma),
    )
