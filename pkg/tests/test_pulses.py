import numpy as np
import pytest
from hypothesis import given, strategies as st

from alohacr.pulses import design_pulse
from alohacr.separation import DEFAULT_OFFSETS, WINDOW_PEAK


@pytest.mark.parametrize("kind", ["rrc", "iota"])
def test_peak_is_one_at_centre(kind):
    p = design_pulse(kind, 32, 8)
    assert p.taps[p.center] == pytest.approx(1.0)
    assert np.argmax(p.taps) == p.center
    assert len(p.taps) % 2 == 1


def test_rrc_self_convolution_is_nyquist():
    p = design_pulse("rrc", 32, 8, 0.25)
    rc = np.convolve(p.taps, p.taps)
    c = len(rc) // 2
    for k in (1, 2, 3):
        assert abs(rc[c + 32 * k]) / rc[c] < 1e-9
        assert abs(rc[c - 32 * k]) / rc[c] < 1e-9


@given(st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]))
def test_rrc_nyquist_for_any_rolloff(beta):
    p = design_pulse("rrc", 16, 8, beta)
    rc = np.convolve(p.taps, p.taps)
    c = len(rc) // 2
    assert max(abs(rc[c + 16 * k]) for k in (1, 2)) / rc[c] < 1e-6


def test_iota_mainlobe_and_sidelobes():
    p = design_pulse("iota", 32, 8)
    c = p.center
    # first zeros at +-Ts
    assert abs(p.taps[c + 32]) < 1e-9 and abs(p.taps[c - 32]) < 1e-9
    assert np.all(p.taps[c - 31 : c + 32] > 0)
    outside = np.concatenate([p.taps[: c - 64], p.taps[c + 65 :]])
    assert np.abs(outside).max() < 1e-2


def test_iota_length_two_channel_at_sampling_offsets():
    p = design_pulse("iota", 32, 8)
    o = np.asarray(DEFAULT_OFFSETS) - WINDOW_PEAK
    adjacent = p(o - 32)
    second = p(o - 64)
    assert np.abs(adjacent).max() > 0.01
    assert np.abs(second).max() < 0.01


def test_design_is_deterministic():
    a = design_pulse("iota", 32, 8)
    b = design_pulse("iota", 32, 8)
    np.testing.assert_array_equal(a.taps, b.taps)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(kind="rrc", rolloff=1.5),
        dict(kind="rrc", rolloff=-0.1),
        dict(kind="iota", rolloff=0.25),
        dict(kind="rrc", samples_per_symbol=2),
        dict(kind="iota", span_symbols=2),
        dict(kind="gauss"),
    ],
)
def test_invalid_designs_rejected(kwargs):
    with pytest.raises(ValueError):
        design_pulse(**kwargs)


def test_pulse_evaluates_between_samples():
    p = design_pulse("iota", 32, 8)
    assert p(0.0) == pytest.approx(1.0)
    assert p(0.5) == pytest.approx(0.5 * (p.taps[p.center] + p.taps[p.center + 1]))
    assert p(1e6) == 0.0
