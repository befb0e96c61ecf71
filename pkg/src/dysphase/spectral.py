"""STFT analysis and the STFT-domain representations.

All maps are shaped ``(K, L)``: subbands by frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from .corpus import AudioClip

MAGNITUDE_FLOOR = 1e-10

FEATURE_KINDS = (
    "log_magnitude",
    "phase",
    "group_delay",
    "mgd",
    "if",
    "envelope",
    "fine_structure",
)


@dataclass(frozen=True)
class StftParams:
    frame_len: int = 160
    hop: int = 160
    window: str = "hanning"

    def __post_init__(self):
        if self.frame_len < 2 or self.frame_len % 2:
            raise ValueError("frame_len must be an even number >= 2")
        if not 1 <= self.hop <= self.frame_len:
            raise ValueError("hop must satisfy 1 <= hop <= frame_len")
        if self.window not in ("hanning", "rectangular"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_fft(self) -> int:
        return self.frame_len

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.hop + 1

    def window_samples(self) -> np.ndarray:
        if self.window == "rectangular":
            return np.ones(self.frame_len)
        # periodic Hann, the usual analysis window for DFT filter banks
        return get_window("hann", self.frame_len, fftbins=True)


@dataclass(frozen=True)
class MgdParams:
    alpha: float = 0.6
    gamma: float = 0.3
    lifter_len: int = 20
    magnitude_floor: float = MAGNITUDE_FLOOR

    def __post_init__(self):
        if self.lifter_len < 1:
            raise ValueError("lifter_len must be >= 1")
        if self.magnitude_floor <= 0:
            raise ValueError("magnitude_floor must be positive")


@dataclass
class ComplexSpectrogram:
    coeffs: np.ndarray
    params: StftParams
    sample_rate: int

    @property
    def shape(self):
        return self.coeffs.shape


@dataclass
class FeatureMap:
    values: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def shape(self):
        return self.values.shape


def _frames(x: np.ndarray, params: StftParams) -> np.ndarray:
    """Windowed frames, shape ``(L, N)``."""
    if len(x) < params.frame_len:
        raise ValueError(
            f"clip of {len(x)} samples is shorter than one frame ({params.frame_len})"
        )
    n_frames = params.n_frames(len(x))
    fr = sliding_window_view(x, params.frame_len)[:: params.hop][:n_frames]
    return fr * params.window_samples()


def stft(clip: AudioClip, params: StftParams = StftParams()) -> ComplexSpectrogram:
    frames = _frames(clip.samples, params)
    coeffs = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(coeffs), params, clip.sample_rate)


def _ramp_stft(clip: AudioClip, params: StftParams):
    """STFT of the frames and of their in-frame ramp-weighted copies n*w(n)s_l(n)."""
    frames = _frames(clip.samples, params)
    ramp = np.arange(params.frame_len, dtype=np.float64)
    S = np.fft.rfft(frames, axis=1).T
    Y = np.fft.rfft(frames * ramp, axis=1).T
    return S, Y


def _principal_angle(z: np.ndarray) -> np.ndarray:
    """Complex argument in (-pi, pi]; zero maps to 0."""
    theta = np.angle(z)
    theta = np.where(theta == -np.pi, np.pi, theta)
    return np.where(z == 0, 0.0, theta)


def log_magnitude(spec: ComplexSpectrogram, floor: float = MAGNITUDE_FLOOR) -> FeatureMap:
    vals = np.log(np.maximum(np.abs(spec.coeffs), floor))
    return FeatureMap(vals, "log_magnitude", {"stft": spec.params})


def phase_spectrum(spec: ComplexSpectrogram) -> FeatureMap:
    return FeatureMap(_principal_angle(spec.coeffs), "phase", {"stft": spec.params})


def _gd_numerator(S, Y):
    return S.real * Y.real + S.imag * Y.imag


def group_delay(clip: AudioClip, params: StftParams = StftParams(),
                floor: float = MAGNITUDE_FLOOR) -> FeatureMap:
    """Group delay in samples via the ramp-signal identity (no phase unwrapping)."""
    S, Y = _ramp_stft(clip, params)
    vals = _gd_numerator(S, Y) / np.maximum(np.abs(S) ** 2, floor)
    return FeatureMap(vals, "group_delay", {"stft": params})


def cepstral_smooth(mag, lifter_len: int, floor: float = MAGNITUDE_FLOOR) -> np.ndarray:
    """Low-quefrency liftering of one-sided magnitude spectra.

    ``mag`` is ``(K,)`` or ``(K, L)``; smoothing runs along the first axis.
    Quefrency bins with circular index ``|q| < lifter_len`` are kept; a
    lifter of ``N/2`` spans the whole quefrency axis and returns the input.
    """
    mag = np.asarray(mag, dtype=np.float64)
    k = mag.shape[0]
    n = 2 * (k - 1)
    if not 1 <= lifter_len <= n // 2:
        raise ValueError(f"lifter_len must lie in [1, {n // 2}], got {lifter_len}")
    logmag = np.log(np.maximum(mag, floor))
    ceps = np.fft.irfft(logmag, n=n, axis=0)
    if lifter_len < n // 2:
        ceps[lifter_len:n - lifter_len + 1] = 0.0
    return np.exp(np.fft.rfft(ceps, axis=0).real)


def signed_power(x, alpha: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** alpha


def mgd_from_coefficients(S, Y, smoothed, mgd: MgdParams = MgdParams()) -> np.ndarray:
    """MGD values from STFT coefficients of the frames (S), the ramped frames (Y)
    and a caller-supplied smoothed magnitude."""
    denom = np.maximum(np.asarray(smoothed, dtype=np.float64) ** (2 * mgd.gamma), mgd.magnitude_floor)
    return signed_power(_gd_numerator(S, Y) / denom, mgd.alpha)


def modified_group_delay(clip: AudioClip, params: StftParams = StftParams(),
                         mgd: MgdParams = MgdParams(), smoothed=None) -> FeatureMap:
    S, Y = _ramp_stft(clip, params)
    if smoothed is None:
        smoothed = cepstral_smooth(np.abs(S), mgd.lifter_len, mgd.magnitude_floor)
    vals = mgd_from_coefficients(S, Y, smoothed, mgd)
    return FeatureMap(vals, "mgd", {"stft": params, "mgd": mgd})


def instantaneous_frequency(spec: ComplexSpectrogram) -> FeatureMap:
    """Phase advance between consecutive frames, arg(S[:, l+1] * conj(S[:, l])).

    The last column repeats the one before it so the map keeps ``L`` frames.
    """
    S = spec.coeffs
    if S.shape[1] < 2:
        raise ValueError("instantaneous frequency needs at least two frames")
    adv = _principal_angle(S[:, 1:] * np.conj(S[:, :-1]))
    vals = np.concatenate([adv, adv[:, -1:]], axis=1)
    return FeatureMap(vals, "if", {"stft": spec.params})
