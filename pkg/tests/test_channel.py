import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from toc_align.channel import ChannelSpec, normalize_power, snr_to_sigma, transmit
from toc_align.errors import ValidationError


def test_snr_to_sigma_values():
    assert snr_to_sigma(0.0) == 1.0
    assert snr_to_sigma(20.0) == pytest.approx(0.1, rel=1e-15)
    assert snr_to_sigma(6.0) ** 2 == pytest.approx(10 ** (-0.6), rel=1e-14)
    assert snr_to_sigma(6.0) ** 2 == pytest.approx(0.2512, abs=1e-4)


def test_channel_spec_needs_exactly_one_noise_level():
    with pytest.raises(ValidationError):
        ChannelSpec()
    with pytest.raises(ValidationError):
        ChannelSpec(snr_db=3.0, sigma=0.1)
    with pytest.raises(ValidationError):
        ChannelSpec(sigma=-1.0)
    spec = ChannelSpec(sigma=0.1)
    assert spec.snr_db == pytest.approx(20.0)
    assert ChannelSpec.from_dict(ChannelSpec(snr_db=6.0, seed=3).to_dict()) == ChannelSpec(snr_db=6.0, seed=3)


def test_normalize_power_examples(rng):
    signs = np.where(rng.standard_normal((4, 9)) > 0, 1.0, -1.0)
    out, scale = normalize_power(signs)
    assert scale == 1.0 and np.array_equal(out, signs)
    x = rng.standard_normal((16, 1000))
    out1, s1 = normalize_power(x)
    out5, s5 = normalize_power(5 * x)
    assert np.allclose(out1, out5, rtol=1e-14, atol=0) and s5 == pytest.approx(5 * s1)
    assert np.mean(out1**2) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(out1 * s1, x)


def test_normalize_power_rejects_zero():
    with pytest.raises(ValidationError):
        normalize_power(np.zeros((3, 3)))


@given(arrays(np.float64, (5, 7), elements=st.floats(-1e3, 1e3)).filter(lambda a: np.mean(a**2) > 1e-6))
@settings(max_examples=60, deadline=None)
def test_normalize_power_is_idempotent(x):
    once, _ = normalize_power(x)
    twice, scale = normalize_power(once)
    assert np.allclose(once, twice, rtol=1e-12, atol=1e-15)
    assert scale == pytest.approx(1.0, abs=1e-12)


def test_zero_sigma_is_exact(rng):
    x = rng.standard_normal((4, 5))
    assert np.array_equal(transmit(x, ChannelSpec(sigma=0.0)), x)


def test_noise_variance_over_a_million_entries():
    x = np.zeros((1000, 1000))
    out = transmit(x, ChannelSpec(sigma=0.5, seed=1))
    assert 0.2475 <= np.var(out - x) <= 0.2525


def test_same_seed_same_noise_different_stream_different_noise(rng):
    x = rng.standard_normal((8, 100))
    spec = ChannelSpec(snr_db=6.0, seed=42)
    assert np.array_equal(transmit(x, spec), transmit(x, spec))
    assert np.array_equal(transmit(x, spec, stream=3), transmit(x, spec, stream=3))
    assert not np.array_equal(transmit(x, spec, stream=0), transmit(x, spec, stream=1))


@pytest.mark.parametrize("sigma", [0.05, 0.5, 2.0])
def test_noise_mean_is_within_four_standard_errors(sigma):
    x = np.zeros((100, 1000))
    noise = transmit(x, ChannelSpec(sigma=sigma, seed=9)) - x
    assert abs(noise.mean()) < 4 * sigma / math.sqrt(noise.size)


def test_noise_coordinates_are_uncorrelated():
    noise = transmit(np.zeros((8, 100_000)), ChannelSpec(sigma=1.0, seed=2))
    corr = np.corrcoef(noise)
    assert np.max(np.abs(corr - np.eye(8))) < 0.01


def test_transmit_rejects_non_finite():
    with pytest.raises(ValidationError):
        transmit(np.array([[np.nan]]), ChannelSpec(sigma=1.0))
