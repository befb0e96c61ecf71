"""Feature extraction front end, K x B segmentation, normalisation and the
binary segment cache."""
from __future__ import annotations

import functools
import logging
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import auditory, spectral
from .corpus import AudioClip, CorpusManifest, ManifestEntry, ingest

log = logging.getLogger(__name__)

REPRESENTATIONS = ("mag", "phase", "mgd", "if", "env", "tfs")
NORMALIZATION_SCOPES = ("segment", "utterance", "none")
STD_FLOOR = 1e-8

CACHE_MAGIC = b"PDFC"
CACHE_VERSION = 1


class CacheFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SegmenterParams:
    frames: int = 50
    overlap_fraction: float = 0.5

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("segment length B must be >= 1")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap_fraction must lie in [0, 1)")

    @property
    def hop(self) -> int:
        return max(1, int(round(self.frames * (1.0 - self.overlap_fraction))))


@dataclass
class FeatureSegment:
    values: np.ndarray
    speaker_id: str
    label: int
    utterance_id: str
    index: int

    def __eq__(self, other):
        if not isinstance(other, FeatureSegment):
            return NotImplemented
        return (
            self.speaker_id == other.speaker_id
            and self.label == other.label
            and self.utterance_id == other.utterance_id
            and self.index == other.index
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass
class FeatureConfig:
    """Every knob of the feature front end; defaults are the classification setup."""

    stft: spectral.StftParams = field(default_factory=spectral.StftParams)
    mgd: spectral.MgdParams = field(default_factory=spectral.MgdParams)
    n_bands: int = 81
    fmin: float = 50.0
    fmax: float = 7800.0
    segmenter: SegmenterParams = field(default_factory=SegmenterParams)
    normalization: str = "segment"

    def __post_init__(self):
        if self.normalization not in NORMALIZATION_SCOPES:
            raise ValueError(f"normalization must be one of {NORMALIZATION_SCOPES}")


def compute_map(clip: AudioClip, rep: str, cfg: FeatureConfig | None = None,
                bank: auditory.GammatoneBank | None = None) -> spectral.FeatureMap:
    """K x L map of one representation for one clip."""
    cfg = cfg or FeatureConfig()
    if rep in ("mag", "phase", "if"):
        spec = spectral.stft(clip, cfg.stft)
        if rep == "mag":
            return spectral.log_magnitude(spec, cfg.mgd.magnitude_floor)
        if rep == "phase":
            return spectral.phase_spectrum(spec)
        return spectral.instantaneous_frequency(spec)
    if rep == "mgd":
        return spectral.modified_group_delay(clip, cfg.stft, cfg.mgd)
    if rep in ("env", "tfs"):
        if bank is None:
            bank = auditory.design_gammatone_bank(cfg.n_bands, cfg.fmin, cfg.fmax, clip.sample_rate)
        env, tfs = auditory.envelope_fine_structure(clip, bank, cfg.stft.frame_len, cfg.stft.hop)
        return env if rep == "env" else tfs
    raise ValueError(f"unknown representation {rep!r}; expected one of {REPRESENTATIONS}")


def segment(fmap, params: SegmenterParams = SegmenterParams(), speaker_id: str = "",
            label: int = -1, utterance_id: str = "") -> list[FeatureSegment]:
    """Cut a K x L map into K x B windows starting every ``params.hop`` frames."""
    values = fmap.values if isinstance(fmap, spectral.FeatureMap) else np.asarray(fmap)
    n_frames = values.shape[1]
    b, hop = params.frames, params.hop
    if n_frames < b:
        log.warning("utterance %r has %d frames < B=%d; skipped", utterance_id, n_frames, b)
        return []
    count = (n_frames - b) // hop + 1
    return [
        FeatureSegment(values[:, i * hop:i * hop + b].copy(), speaker_id, label, utterance_id, i)
        for i in range(count)
    ]


def normalize_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean()
    return centred / max(float(centred.std()), STD_FLOOR)


def normalize(seg: FeatureSegment) -> FeatureSegment:
    """Zero mean, unit population std over the whole segment."""
    return FeatureSegment(normalize_array(seg.values), seg.speaker_id, seg.label,
                          seg.utterance_id, seg.index)


def featurize_clip(clip: AudioClip, rep: str, cfg: FeatureConfig | None = None,
                   utterance_id: str = "", bank=None) -> list[FeatureSegment]:
    cfg = cfg or FeatureConfig()
    fmap = compute_map(clip, rep, cfg, bank)
    values = fmap.values
    if cfg.normalization == "utterance":
        values = normalize_array(values)
    segs = segment(values, cfg.segmenter, clip.speaker_id or "", -1 if clip.label is None else clip.label,
                   utterance_id)
    if cfg.normalization == "segment":
        segs = [normalize(s) for s in segs]
    for s in segs:
        s.values = s.values.astype(np.float32)
    return segs


# --------------------------------------------------------------------------
# cache


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_segments(segments: list[FeatureSegment]) -> bytes:
    if segments:
        k, b = segments[0].values.shape
    else:
        k = b = 0
    parts = [CACHE_MAGIC, struct.pack("<HIII", CACHE_VERSION, k, b, len(segments))]
    for s in segments:
        if s.values.shape != (k, b):
            raise ValueError(f"segment shape {s.values.shape} differs from {(k, b)}")
        parts.append(_pack_str(s.speaker_id))
        parts.append(struct.pack("<B", s.label & 0xFF))
        parts.append(_pack_str(s.utterance_id))
        parts.append(struct.pack("<I", s.index))
        parts.append(np.ascontiguousarray(s.values, dtype="<f4").tobytes())
    return b"".join(parts)


def cache_write(segments: list[FeatureSegment], path) -> None:
    """Atomically write ``segments`` (temp file + rename)."""
    path = Path(path)
    data = encode_segments(segments)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CacheFormatError(f"{self.path}: truncated cache file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode_segments(data: bytes, path="<bytes>") -> list[FeatureSegment]:
    r = _Reader(data, path)
    if r.take(4) != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic, not a feature cache")
    version, k, b, count = r.unpack("<HIII")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: unsupported cache version {version}")
    if count and (k == 0 or b == 0):
        raise CacheFormatError(f"{path}: dimension mismatch (K={k}, B={b}, count={count})")
    out = []
    for _ in range(count):
        spk = r.string()
        (label,) = r.unpack("<B")
        utt = r.string()
        (idx,) = r.unpack("<I")
        vals = np.frombuffer(r.take(4 * k * b), dtype="<f4").reshape(k, b).astype(np.float32)
        out.append(FeatureSegment(vals, spk, label if label != 0xFF else -1, utt, idx))
    if r.pos != len(data):
        raise CacheFormatError(f"{path}: {len(data) - r.pos} trailing bytes; dimension mismatch")
    return out


def cache_read(path) -> list[FeatureSegment]:
    path = Path(path)
    return decode_segments(path.read_bytes(), path)


# --------------------------------------------------------------------------
# corpus-level extraction


def cache_path(cache_dir, rep: str, utterance_id: str) -> Path:
    return Path(cache_dir) / rep / f"{utterance_id}.pdfc"


@functools.lru_cache(maxsize=8)
def _bank(n_bands, fmin, fmax, fs):
    return auditory.design_gammatone_bank(n_bands, fmin, fmax, fs)


def _extract_one(entry: ManifestEntry, rep: str, cfg: FeatureConfig, cache_dir) -> Path:
    clip = ingest(entry.path)
    clip = AudioClip(clip.samples, clip.sample_rate, entry.speaker_id, entry.label)
    bank = _bank(cfg.n_bands, cfg.fmin, cfg.fmax, clip.sample_rate) if rep in ("env", "tfs") else None
    segs = featurize_clip(clip, rep, cfg, entry.utterance_id, bank)
    out = cache_path(cache_dir, rep, entry.utterance_id)
    cache_write(segs, out)
    return out


def extract_corpus(manifest: CorpusManifest, rep: str, cache_dir, cfg: FeatureConfig | None = None,
                   workers: int = 1) -> list[Path]:
    """Featurize every manifest entry for one representation and write one
    cache file per utterance under ``cache_dir/rep/``.

    Output files do not depend on ``workers``.
    """
    if rep not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {rep!r}; expected one of {REPRESENTATIONS}")
    cfg = cfg or FeatureConfig()
    ids = [e.utterance_id for e in manifest.entries]
    dup = sorted({u for u in ids if ids.count(u) > 1})
    if dup:
        raise ValueError(f"utterance ids must be unique (file stems); duplicated: {dup[:5]}")
    (Path(cache_dir) / rep).mkdir(parents=True, exist_ok=True)
    entries = list(manifest.entries)
    if workers <= 1 or len(entries) < 2:
        return [_extract_one(e, rep, cfg, cache_dir) for e in entries]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_extract_one, e, rep, cfg, cache_dir) for e in entries]
        return [f.result() for f in futs]
