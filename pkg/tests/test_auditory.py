import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import lfilter

from dysphase.auditory import (
    analytic_signal,
    apply_bank,
    design_gammatone_bank,
    envelope_fine_structure,
    erb,
    erb_rate_to_hz,
    hz_to_erb_rate,
)
from dysphase.corpus import AudioClip

FS = 16000


@pytest.fixture(scope="module")
def bank():
    return design_gammatone_bank()


def test_erb_reference_values():
    # 24.7 * (4.37 * f/kHz + 1)
    assert erb(1000.0) == pytest.approx(132.639, abs=1e-9)
    assert erb(0.0) == pytest.approx(24.7)
    assert hz_to_erb_rate(1000.0) == pytest.approx(21.4 * np.log10(5.37), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 8000.0))
def test_erb_rate_round_trip(f):
    assert erb_rate_to_hz(hz_to_erb_rate(f)) == pytest.approx(f, rel=1e-10)


def test_centres_span_range_evenly_on_erb_scale(bank):
    fc = bank.center_freqs
    assert bank.n_bands == 81
    assert fc[0] == 50.0 and fc[-1] == 7800.0
    assert np.all(np.diff(fc) > 0)
    np.testing.assert_allclose(np.diff(hz_to_erb_rate(fc)), np.diff(hz_to_erb_rate(fc)).mean(), rtol=1e-9)
    np.testing.assert_allclose(bank.bandwidths, 1.019 * erb(fc))


@pytest.mark.parametrize("band", [0, 10, 40, 70, 80])
def test_band_peaks_at_centre_with_unit_gain(bank, band):
    fc = bank.center_freqs[band]
    assert abs(bank.response(band, [fc])[0]) == pytest.approx(1.0, abs=1e-12)
    grid = fc + np.linspace(-0.25, 0.25, 501) * bank.bandwidths[band]
    mag = np.abs(bank.response(band, grid))
    step = grid[1] - grid[0]
    assert abs(grid[np.argmax(mag)] - fc) <= step


@pytest.mark.parametrize("band", [20, 40, 60])
def test_equivalent_rectangular_bandwidth(bank, band):
    """Power-equivalent bandwidth of a 4th-order gammatone with b = 1.019 ERB
    is one ERB; the all-pole form should land close."""
    fc = bank.center_freqs[band]
    f = np.linspace(1.0, FS / 2 - 1.0, 200_001)
    p = np.abs(bank.response(band, f)) ** 2
    ebw = np.sum(p) * (f[1] - f[0])
    assert ebw == pytest.approx(erb(fc), rel=0.1)


def test_apply_bank_matches_cascaded_lfilter(bank):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(2000)
    out = apply_bank(AudioClip(x, FS), bank)
    assert out.shape == (81, 2000)
    for band in (0, 33, 80):
        y = x
        for sec in bank.sos[band]:
            y = lfilter(sec[:3], sec[3:], y)
        np.testing.assert_allclose(out[band], y, rtol=1e-9, atol=1e-12)


def test_analytic_signal_of_bin_aligned_cosine():
    n = np.arange(1024)
    for k in (1, 37, 300):
        a = analytic_signal(np.cos(2 * np.pi * k * n / 1024))
        np.testing.assert_allclose(a.real, np.cos(2 * np.pi * k * n / 1024), atol=1e-12)
        np.testing.assert_allclose(a.imag, np.sin(2 * np.pi * k * n / 1024), atol=1e-9)


def test_analytic_signal_errors():
    with pytest.raises(ValueError):
        analytic_signal([])
    with pytest.raises(ValueError):
        analytic_signal([1.0])


@pytest.mark.parametrize("band", [30, 50, 70])
def test_envelope_of_band_centred_tone_is_flat(bank, band):
    fc = bank.center_freqs[band]
    amp = 0.3
    x = amp * np.cos(2 * np.pi * fc * np.arange(FS) / FS)
    env, fine = envelope_fine_structure(AudioClip(x, FS), bank)
    e = env.values[band]
    interior = e[10:-10]
    assert np.std(interior) / np.mean(interior) < 0.05
    # unit gain at fc: the envelope recovers the tone amplitude
    assert np.mean(interior) == pytest.approx(amp, rel=0.02)


def test_envelope_fine_structure_shapes_and_ranges(bank):
    rng = np.random.default_rng(1)
    clip = AudioClip(rng.standard_normal(8000), FS)
    env, fine = envelope_fine_structure(clip, bank)
    assert env.kind == "envelope" and fine.kind == "fine_structure"
    assert env.shape == fine.shape == (81, 50)
    assert np.all(env.values >= 0)
    assert np.all(np.abs(fine.values) <= 1.0 + 1e-12)


def test_fine_structure_zero_for_silence(bank):
    env, fine = envelope_fine_structure(AudioClip(np.zeros(480), FS), bank)
    assert np.all(env.values == 0) and np.all(fine.values == 0)


def test_frame_pooling_is_window_mean(bank):
    rng = np.random.default_rng(2)
    clip = AudioClip(rng.standard_normal(1000), FS)
    env, _ = envelope_fine_structure(clip, bank, win=200, hop=100)
    full = np.abs(analytic_signal(apply_bank(clip, bank)))
    assert env.shape == (81, 9)
    np.testing.assert_allclose(env.values[:, 3], full[:, 300:500].mean(axis=1), rtol=1e-12)


def test_design_and_rate_errors(bank):
    with pytest.raises(ValueError):
        design_gammatone_bank(fmax=8000.0)
    with pytest.raises(ValueError):
        design_gammatone_bank(fmin=500.0, fmax=400.0)
    with pytest.raises(ValueError, match="does not match"):
        apply_bank(AudioClip(np.zeros(100), 8000), bank)
