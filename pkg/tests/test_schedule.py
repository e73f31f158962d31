"""Noise-schedule tables and reverse/jump coefficients.

The expected values here come from two sources: closed-form identities
evaluated with an independent brute-force loop, and a handful of frozen
constants that were computed once with that same loop and pinned so a
regression in the vectorised implementation cannot slip by unnoticed.
"""

import math

import numpy as np
import pytest

from diffcomm import build_schedule, jump_coeffs, reverse_coeffs, snr_of_timestep, timestep_for_snr
from diffcomm.errors import ConfigurationError


def brute_force_tables(T, beta_start=1e-4, beta_end=0.02):
    """Element-by-element reference: no numpy reductions, plain Python floats."""
    betas = [0.0] * (T + 1)
    for t in range(1, T + 1):
        if T == 1:
            betas[t] = beta_start
        else:
            betas[t] = beta_start + (beta_end - beta_start) * (t - 1) / (T - 1)
    alpha_bars = [1.0] * (T + 1)
    for t in range(1, T + 1):
        alpha_bars[t] = alpha_bars[t - 1] * (1.0 - betas[t])
    return betas, alpha_bars


def test_tables_match_brute_force_oracle(schedule):
    betas, alpha_bars = brute_force_tables(1000)
    assert schedule.T == 1000
    assert schedule.betas[0] == 0.0 and schedule.alpha_bars[0] == 1.0
    np.testing.assert_allclose(schedule.betas, betas, rtol=1e-12, atol=0.0)
    np.testing.assert_allclose(schedule.alpha_bars, alpha_bars, rtol=1e-12, atol=0.0)


def test_frozen_terminal_alpha_bar(schedule):
    # Pinned from the brute-force loop above; catches any silent change in
    # the beta spacing convention (endpoints inclusive, T-1 denominator).
    assert schedule.alpha_bars[1000] == pytest.approx(4.0358297653756754e-05, rel=1e-12)


def test_beta_endpoints(schedule):
    assert schedule.betas[1] == pytest.approx(1e-4, rel=0, abs=0)
    assert schedule.betas[1000] == pytest.approx(0.02, rel=0, abs=0)


def test_snr_of_timestep_definition(schedule):
    for t in (1, 137, 500, 999, 1000):
        ab = schedule.alpha_bars[t]
        assert snr_of_timestep(schedule, t) == pytest.approx(10.0 * math.log10(ab / (1.0 - ab)))


def test_timestep_for_snr_frozen_anchor(schedule):
    # 0 dB means alpha_bar/(1-alpha_bar) = 1; the nearest table entry was
    # computed once by scanning the brute-force table: t = 259.
    assert timestep_for_snr(schedule, 0.0) == 259


def test_snr_round_trip_within_one_step(schedule):
    for t in range(1, schedule.T + 1):
        back = timestep_for_snr(schedule, snr_of_timestep(schedule, t))
        assert abs(back - t) <= 1, f"round trip t={t} -> {back}"


def test_timestep_for_snr_clamps_to_range(schedule):
    assert timestep_for_snr(schedule, 500.0) == 1
    assert timestep_for_snr(schedule, -500.0) == schedule.T


def test_reverse_coeffs_single_step_identities(schedule):
    # One-step coefficients follow directly from the update rule written in
    # terms of alpha_t and alpha_bar_t; check against scalar math at a few t.
    for t in (1, 2, 77, 400, 1000):
        cf = reverse_coeffs(schedule, t)
        alpha_t = 1.0 - schedule.betas[t]
        ab_t = schedule.alpha_bars[t]
        ab_prev = schedule.alpha_bars[t - 1]
        assert cf.inv_sqrt_alpha == pytest.approx(1.0 / math.sqrt(alpha_t), rel=1e-12)
        assert cf.noise_coeff == pytest.approx((1.0 - alpha_t) / math.sqrt(1.0 - ab_t), rel=1e-12)
        if t == 1:
            assert cf.sigma == 0.0
        else:
            var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_t)
            assert cf.sigma == pytest.approx(math.sqrt(var), rel=1e-12)


def test_jump_coeffs_generalise_single_step(schedule):
    for t in (2, 100, 900):
        one = reverse_coeffs(schedule, t)
        jump = jump_coeffs(schedule, t, t - 1)
        assert jump.inv_sqrt_alpha == one.inv_sqrt_alpha
        assert jump.noise_coeff == one.noise_coeff
        assert jump.sigma == one.sigma


def test_jump_coeffs_strided_oracle(schedule):
    # Direct evaluation of the strided-step formulas with scalar arithmetic.
    for t_from, t_to in ((10, 3), (500, 250), (1000, 0), (7, 0)):
        cf = jump_coeffs(schedule, t_from, t_to)
        ab_a = schedule.alpha_bars[t_from]
        ab_b = schedule.alpha_bars[t_to]
        alpha_tilde = ab_a / ab_b
        assert cf.inv_sqrt_alpha == pytest.approx(1.0 / math.sqrt(alpha_tilde), rel=1e-12)
        assert cf.noise_coeff == pytest.approx((1.0 - alpha_tilde) / math.sqrt(1.0 - ab_a), rel=1e-12)
        if t_to == 0:
            assert cf.sigma == 0.0
        else:
            var = (1.0 - ab_b) / (1.0 - ab_a) * (1.0 - alpha_tilde)
            assert cf.sigma == pytest.approx(math.sqrt(var), rel=1e-12)


def test_jump_to_zero_is_noiseless(schedule):
    assert jump_coeffs(schedule, 123, 0).sigma == 0.0


@pytest.mark.parametrize("t_from,t_to", [(0, 0), (5, 5), (5, 6), (1001, 0), (-1, 0)])
def test_jump_coeffs_rejects_bad_ranges(schedule, t_from, t_to):
    with pytest.raises(ValueError):
        jump_coeffs(schedule, t_from, t_to)


def test_build_schedule_validation():
    with pytest.raises(ConfigurationError):
        build_schedule(0)
    with pytest.raises(ConfigurationError):
        build_schedule(100, beta_start=0.0)
    with pytest.raises(ConfigurationError):
        build_schedule(100, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ConfigurationError):
        build_schedule(100, beta_end=1.0)


def test_single_step_schedule():
    s = build_schedule(1)
    assert s.betas[1] == pytest.approx(1e-4)
    assert s.alpha_bars[1] == pytest.approx(1.0 - 1e-4)
