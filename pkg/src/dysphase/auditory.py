"""Gammatone filter bank, analytic signals and sub-sampled envelope /
temporal fine structure maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert, sosfreqz

from . import kernels
from .corpus import AudioClip
from .spectral import FeatureMap

ERB_BANDWIDTH_FACTOR = 1.019


def erb(f):
    """Equivalent rectangular bandwidth (Glasberg & Moore) in Hz."""
    return 24.7 * (4.37e-3 * np.asarray(f, dtype=np.float64) + 1.0)


def hz_to_erb_rate(f):
    return 21.4 * np.log10(1.0 + 4.37e-3 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 4.37e-3


@dataclass
class GammatoneBank:
    center_freqs: np.ndarray
    bandwidths: np.ndarray
    sample_rate: int
    order: int
    sos: list  # one (order, 6) second-order-section array per band

    @property
    def n_bands(self) -> int:
        return len(self.center_freqs)

    def response(self, band: int, freqs):
        """Complex frequency response of one band at ``freqs`` (Hz)."""
        _, h = sosfreqz(self.sos[band], worN=np.asarray(freqs, dtype=np.float64), fs=self.sample_rate)
        return h


def _band_sos(fc, bw, fs, order):
    """All-pole gammatone approximation: ``order`` identical two-pole resonators.

    The pole angle is shifted so each resonator (and hence the cascade)
    peaks exactly at ``fc``; the cascade is normalised to unit gain there.
    """
    r = np.exp(-2 * np.pi * bw / fs)
    cos_peak = np.cos(2 * np.pi * fc / fs)
    cos_pole = np.clip(cos_peak * 2 * r / (1 + r * r), -1.0, 1.0)
    a1, a2 = -2 * r * cos_pole, r * r
    # |A(e^jw)| at the peak, one section
    z = np.exp(-1j * 2 * np.pi * fc / fs)
    g = abs(1 + a1 * z + a2 * z * z)
    sec = np.array([g, 0.0, 0.0, 1.0, a1, a2])
    return np.tile(sec, (order, 1))


def design_gammatone_bank(n_bands: int = 81, fmin: float = 50.0, fmax: float = 7800.0,
                          fs: int = 16000, order: int = 4) -> GammatoneBank:
    """Bands equally spaced on the ERB-rate scale from ``fmin`` to ``fmax``."""
    if not 0 < fmin < fmax < fs / 2:
        raise ValueError(f"need 0 < fmin < fmax < fs/2, got fmin={fmin}, fmax={fmax}, fs={fs}")
    if n_bands < 1:
        raise ValueError("n_bands must be >= 1")
    if n_bands == 1:
        centers = np.array([fmin])
    else:
        centers = erb_rate_to_hz(np.linspace(hz_to_erb_rate(fmin), hz_to_erb_rate(fmax), n_bands))
        centers[0], centers[-1] = fmin, fmax
    bws = ERB_BANDWIDTH_FACTOR * erb(centers)
    sos = [_band_sos(fc, bw, fs, order) for fc, bw in zip(centers, bws)]
    return GammatoneBank(centers, bws, fs, order, sos)


def apply_bank(clip: AudioClip, bank: GammatoneBank) -> np.ndarray:
    """Band-pass outputs, shape ``(K, n_samples)``."""
    if clip.sample_rate != bank.sample_rate:
        raise ValueError(
            f"clip rate {clip.sample_rate} Hz does not match bank rate {bank.sample_rate} Hz"
        )
    return np.stack([kernels.sos_filter(clip.samples, s) for s in bank.sos])


def analytic_signal(x) -> np.ndarray:
    """x + j*H{x} via the one-sided spectrum (DC and Nyquist kept once)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("analytic signal of an empty sequence")
    if x.shape[-1] < 2:
        raise ValueError("analytic signal needs at least two samples")
    return hilbert(x, axis=-1)


def envelope_fine_structure(clip: AudioClip, bank: GammatoneBank, win: int = 160,
                            hop: int = 160) -> tuple[FeatureMap, FeatureMap]:
    if len(clip) < win:
        raise ValueError(f"clip of {len(clip)} samples is shorter than one window ({win})")
    bands = apply_bank(clip, bank)
    a = analytic_signal(bands)
    env = np.abs(a)
    nz = env > 0
    fine = np.divide(a.real, env, out=np.zeros_like(env), where=nz)
    prov = {"win": win, "hop": hop, "n_bands": bank.n_bands}
    return (
        FeatureMap(kernels.frame_mean(env, win, hop), "envelope", prov),
        FeatureMap(kernels.frame_mean(fine, win, hop), "fine_structure", prov),
    )
