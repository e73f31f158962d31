"""Channel sampling, application, and pre-compensation algebra."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from diffcomm.channel import (
    ChannelConfig,
    apply_channel,
    noise_std_for_snr,
    precompensate,
    sample_channel,
)
from diffcomm.errors import ConfigurationError


def test_noise_std_definition():
    # sigma^2 = P / 10^(snr/10) with unit signal power
    assert noise_std_for_snr(0.0) == pytest.approx(1.0)
    assert noise_std_for_snr(10.0) == pytest.approx(10.0 ** -0.5)
    assert noise_std_for_snr(3.0, signal_power=4.0) == pytest.approx(math.sqrt(4.0 / 10.0 ** 0.3))


def test_awgn_gains_are_unity():
    real = sample_channel(ChannelConfig("awgn", 5.0, seed=3), (8, 8, 3))
    assert real.kind == "awgn"
    assert torch.all(real.gains == 1.0)
    assert tuple(real.gains.shape) == (8, 8, 3)


def test_rayleigh_gain_statistics():
    # |h| with h = N(0, 1/2) + j N(0, 1/2) has E[|h|^2] = 1.  The floor at
    # 0.1 clips a sliver of mass (P(|h| < 0.1) ~ 1%), nudging the mean square
    # up by well under 0.1%, so a 2% tolerance is safe.
    real = sample_channel(ChannelConfig("rayleigh", 5.0, seed=11), (1000, 1000, 1))
    g = real.gains.ravel()
    assert g.min() >= 0.1
    assert g.pow(2).mean().item() == pytest.approx(1.0, rel=0.02)
    # Rayleigh mean for scale 1/sqrt(2) is sqrt(pi)/2
    assert g.mean().item() == pytest.approx(math.sqrt(math.pi) / 2.0, rel=0.02)


def test_rayleigh_seed_reproducible():
    a = sample_channel(ChannelConfig("rayleigh", 5.0, seed=4), (16, 16, 3))
    b = sample_channel(ChannelConfig("rayleigh", 5.0, seed=4), (16, 16, 3))
    c = sample_channel(ChannelConfig("rayleigh", 5.0, seed=5), (16, 16, 3))
    torch.testing.assert_close(a.gains, b.gains, rtol=0, atol=0)
    assert not torch.equal(a.gains, c.gains)


def test_unknown_channel_kind_rejected():
    with pytest.raises(ConfigurationError):
        ChannelConfig("laplace", 5.0)


def test_bad_gain_floor_rejected():
    with pytest.raises(ConfigurationError):
        ChannelConfig("rayleigh", 5.0, gain_floor=1.5)


def test_apply_then_precompensate_identity_at_zero_noise():
    # gains * (x / gains) == x with the noise switched off.
    rng = torch.Generator().manual_seed(0)
    x = torch.rand((12, 12, 3), generator=rng, dtype=torch.float64) * 2 - 1
    real = sample_channel(ChannelConfig("rayleigh", 30.0, seed=9), (12, 12, 3))
    noiseless = dataclasses.replace(real, noise_std=0.0)
    back = apply_channel(precompensate(x, noiseless), noiseless, rng=None)
    torch.testing.assert_close(back, x, rtol=1e-5, atol=1e-8)


def test_received_noise_power_matches_snr():
    # Unit-power input through AWGN: the residual y - x is exactly the noise
    # drawn at noise_std_for_snr(snr), so its power should match 10^(-snr/10).
    rng = torch.Generator().manual_seed(21)
    x = torch.randn((500, 500, 1), generator=rng, dtype=torch.float64)
    x = x / x.pow(2).mean().sqrt()
    for snr in (0.0, 10.0):
        real = sample_channel(ChannelConfig("awgn", snr, seed=1), tuple(x.shape))
        y = apply_channel(x, real, rng=torch.Generator().manual_seed(33))
        noise_power = (y - x).pow(2).mean().item()
        assert noise_power == pytest.approx(10.0 ** (-snr / 10.0), rel=0.02)


def test_apply_channel_noiseless_when_std_zero():
    x = torch.ones((4, 4, 3), dtype=torch.float64)
    real = sample_channel(ChannelConfig("awgn", 10.0, seed=0), (4, 4, 3))
    y = apply_channel(x, dataclasses.replace(real, noise_std=0.0), rng=None)
    torch.testing.assert_close(y, x)


def test_precompensate_rejects_nonpositive_gain():
    x = torch.ones((2, 2, 1))
    real = sample_channel(ChannelConfig("awgn", 10.0, seed=0), (2, 2, 1))
    bad = dataclasses.replace(real, gains=torch.zeros((2, 2, 1)))
    with pytest.raises(FloatingPointError):
        precompensate(x, bad)


def test_shape_mismatch_rejected():
    x = torch.ones((4, 4, 3))
    real = sample_channel(ChannelConfig("awgn", 10.0, seed=0), (2, 2, 3))
    with pytest.raises(ValueError):
        apply_channel(x, real, rng=None)
    with pytest.raises(ValueError):
        precompensate(x, real)


def test_gain_floor_configurable():
    real = sample_channel(ChannelConfig("rayleigh", 5.0, gain_floor=0.5, seed=2), (64, 64, 3))
    assert real.gains.min() >= 0.5
