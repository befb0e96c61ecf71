"""Audio ingestion, resampling, labelled manifests and the synthetic corpus."""
from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

log = logging.getLogger(__name__)

TARGET_RATE = 16000
NEUROTYPICAL, DYSARTHRIC = 0, 1

_LABEL_TOKENS = {
    "0": NEUROTYPICAL,
    "1": DYSARTHRIC,
    "neurotypical": NEUROTYPICAL,
    "control": NEUROTYPICAL,
    "dysarthric": DYSARTHRIC,
}


class AudioFormatError(ValueError):
    """Base class for unreadable audio files."""


class MalformedWavError(AudioFormatError):
    pass


class UnsupportedEncodingError(AudioFormatError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    speaker_id: str | None = None
    label: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples contain NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


# --------------------------------------------------------------------------
# WAV I/O


def _sniff_wav(path: Path) -> tuple[int, int]:
    """Return (format tag, bits per sample) from the RIFF header."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                raise MalformedWavError(f"{path}: missing fmt chunk")
            cid, size = struct.unpack("<4sI", chunk)
            if cid == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise MalformedWavError(f"{path}: truncated fmt chunk")
                tag, _, _, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == 0xFFFE and len(body) >= 26:  # WAVE_FORMAT_EXTENSIBLE
                    tag = struct.unpack("<H", body[24:26])[0]
                return tag, bits
            fh.seek(size + (size & 1), os.SEEK_CUR)


def load_wav(path) -> AudioClip:
    """Read a 16-bit integer or 32-bit float PCM WAV file as a mono clip.

    Multichannel audio is averaged to mono and integer samples are scaled
    by 1/32768.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such audio file")
    tag, bits = _sniff_wav(path)
    if not ((tag == 1 and bits == 16) or (tag == 3 and bits == 32)):
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding (format tag {tag}, {bits} bits); "
            "expected 16-bit PCM or 32-bit float"
        )
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise MalformedWavError(f"{path}: {exc}") from exc
    data = np.asarray(data)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(rate))


def write_wav(path, clip: AudioClip, encoding: str = "int16") -> None:
    """Write ``clip`` as mono PCM; ``encoding`` is ``"int16"`` or ``"float32"``."""
    if encoding == "int16":
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    elif encoding == "float32":
        data = clip.samples.astype("<f4")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    wavfile.write(path, clip.sample_rate, data)


# --------------------------------------------------------------------------
# resampling

TAPS_PER_PHASE = 64
KAISER_BETA = 8.0


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling (64 taps per phase, Kaiser beta 8).

    The anti-aliasing cutoff sits at 0.45 * min(source, target) Hz.
    """
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if src == target_rate:
        return clip
    g = gcd(src, target_rate)
    up, down = target_rate // g, src // g
    cutoff = 0.45 * min(src, target_rate)
    # odd length keeps the filter delay an integer number of samples;
    # resample_poly applies the gain of ``up`` itself
    taps = signal.firwin(TAPS_PER_PHASE * up + 1, cutoff, window=("kaiser", KAISER_BETA), fs=src * up)
    y = signal.resample_poly(clip.samples, up, down, window=taps)
    return AudioClip(y, target_rate, clip.speaker_id, clip.label)


def ingest(path, target_rate: int = TARGET_RATE) -> AudioClip:
    return resample(load_wav(path), target_rate)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    speaker_id: str
    label: int

    @property
    def utterance_id(self) -> str:
        return self.path.stem


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    source: str = "external"

    def speaker_labels(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out.setdefault(e.speaker_id, e.label)
        return out

    def speakers_by_class(self) -> dict[int, list[str]]:
        by: dict[int, list[str]] = {NEUROTYPICAL: [], DYSARTHRIC: []}
        for spk, lab in sorted(self.speaker_labels().items()):
            by[lab].append(spk)
        return by

    @property
    def usable_for_training(self) -> bool:
        by = self.speakers_by_class()
        return all(len(v) > 0 for v in by.values())

    def write(self, path) -> None:
        path = Path(path)
        root = path.parent.resolve()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "speaker_id", "label"])
            for e in self.entries:
                p = Path(e.path).resolve()
                try:
                    p = p.relative_to(root)
                except ValueError:
                    pass
                w.writerow([p.as_posix(), e.speaker_id, e.label])


def _parse_label(token: str, lineno: int, path: Path) -> int:
    try:
        return _LABEL_TOKENS[token.strip().lower()]
    except KeyError:
        raise ManifestError(f"{path}:{lineno}: unknown label token {token!r}") from None


def load_manifest(path) -> CorpusManifest:
    """Parse a ``path,speaker_id,label`` CSV manifest.

    Relative paths are resolved against the manifest's directory. An empty
    manifest is valid but reports ``usable_for_training == False``.
    """
    path = Path(path)
    root = path.parent.resolve()
    entries: list[ManifestEntry] = []
    seen: set[Path] = set()
    labels: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
            "path",
            "speaker_id",
            "label",
        ]:
            raise ManifestError(f"{path}: header must be 'path,speaker_id,label'")
        for lineno, row in enumerate(reader, start=2):
            p = Path(row["path"].strip())
            if not p.is_absolute():
                p = root / p
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate entry for {p}")
            seen.add(p)
            spk = row["speaker_id"].strip()
            lab = _parse_label(row["label"], lineno, path)
            if labels.setdefault(spk, lab) != lab:
                raise ManifestError(f"{path}:{lineno}: speaker {spk!r} has conflicting labels")
            entries.append(ManifestEntry(p, spk, lab))
    manifest = CorpusManifest(entries, "external")
    if not manifest.usable_for_training:
        log.warning("manifest %s lacks speakers of both classes; unusable for training", path)
    return manifest


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    n_speakers_per_class: int = 10
    utterances_per_speaker: int = 1
    utterance_seconds: float = 8.0
    f0_base: float = 200.0
    f0_spread: float = 20.0
    jitter_pct: float = 25.0
    tremor_depth: float = 0.5
    tremor_rate: float = 5.0
    noise_snr_db: float = 15.0
    clean_snr_db: float = 40.0
    n_harmonics: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers_per_class < 1:
            raise ValueError("n_speakers_per_class must be >= 1")
        if self.utterances_per_speaker < 1:
            raise ValueError("utterances_per_speaker must be >= 1")
        if self.utterance_seconds <= 0:
            raise ValueError("utterance_seconds must be positive")
        if not 0.0 <= self.tremor_depth <= 1.0:
            raise ValueError("tremor_depth must lie in [0, 1]")


def _f0_walk(rng, n, fs, jitter):
    """Bounded random walk in [-jitter, jitter], updated every 10 ms."""
    n_ctrl = n // (fs // 100) + 2
    steps = rng.normal(0.0, 0.35, n_ctrl)
    w = np.empty(n_ctrl)
    acc = 0.0
    for i, s in enumerate(steps):
        acc += s
        # reflect into [-1, 1]
        acc = (acc + 1.0) % 4.0 - 1.0
        if acc > 1.0:
            acc = 2.0 - acc
        w[i] = acc
    ctrl_t = np.arange(n_ctrl) * (fs // 100)
    return jitter * np.interp(np.arange(n), ctrl_t, w)


def _add_noise(rng, x, snr_db):
    p = np.mean(x**2)
    noise = rng.standard_normal(len(x))
    return x + noise * np.sqrt(p / 10 ** (snr_db / 10.0))


def synth_utterance(spec: SynthSpec, label: int, f0: float, rng) -> np.ndarray:
    fs = TARGET_RATE
    n = int(round(spec.utterance_seconds * fs))
    t = np.arange(n) / fs
    if label == DYSARTHRIC:
        f0_track = f0 * (1.0 + _f0_walk(rng, n, fs, spec.jitter_pct / 100.0))
    else:
        f0_track = np.full(n, f0)
    phase = 2 * np.pi * np.cumsum(f0_track) / fs
    phase0 = rng.uniform(0, 2 * np.pi, spec.n_harmonics)
    x = sum(np.sin(h * phase + phase0[h - 1]) / h for h in range(1, spec.n_harmonics + 1))
    if label == DYSARTHRIC:
        trem = 1.0 + spec.tremor_depth * np.sin(2 * np.pi * spec.tremor_rate * t + rng.uniform(0, 2 * np.pi))
        x = x * trem / (1.0 + spec.tremor_depth)
        # breathiness: high-passed turbulence noise
        breath = signal.sosfilt(signal.butter(2, 1000, "highpass", fs=fs, output="sos"), rng.standard_normal(n))
        x = x + breath * np.sqrt(np.mean(x**2) / np.mean(breath**2) / 10 ** (spec.noise_snr_db / 10.0))
    else:
        x = _add_noise(rng, x, spec.clean_snr_db)
    return 0.9 * x / np.max(np.abs(x))


def synthesize_corpus(spec: SynthSpec, out_dir) -> CorpusManifest:
    """Write a deterministic two-class synthetic corpus and its manifest.

    Neurotypical speakers produce a steady harmonic complex; dysarthric
    speakers add f0 jitter, amplitude tremor and breath noise. Output is a
    pure function of ``spec``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out}: directory not writable")
    entries = []
    for label, prefix in ((NEUROTYPICAL, "nt"), (DYSARTHRIC, "dy")):
        for s in range(spec.n_speakers_per_class):
            spk = f"{prefix}{s:03d}"
            srng = np.random.default_rng([spec.seed, label, s])
            f0 = spec.f0_base + srng.uniform(-spec.f0_spread, spec.f0_spread)
            for u in range(spec.utterances_per_speaker):
                urng = np.random.default_rng([spec.seed, label, s, u, 1])
                x = synth_utterance(spec, label, f0, urng)
                path = out / f"{spk}_u{u:02d}.wav"
                write_wav(path, AudioClip(x, TARGET_RATE))
                entries.append(ManifestEntry(path, spk, label))
    manifest = CorpusManifest(entries, "synthetic")
    manifest.write(out / "manifest.csv")
    return manifest
