"""Preprocessing: peak normalization, speaker segment extraction and
recombination into fixed-duration clips, and resampling to a fixed length."""

from __future__ import annotations

import csv
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInputError, EmptyResultError, FormatError


@dataclass(frozen=True)
class Annotation:
    t0: float
    t1: float
    tag: str


@dataclass
class RawRecording:
    samples: np.ndarray
    sample_rate: float
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        dur = len(self.samples) / self.sample_rate
        prev_end = -np.inf
        for a in sorted(self.annotations, key=lambda a: a.t0):
            if not 0 <= a.t0 < a.t1 <= dur + 1e-9:
                raise ConfigError(f"annotation {a} outside [0, {dur:.3f}] s or empty")
            if a.t0 < prev_end:
                raise ConfigError(f"annotation {a} overlaps its predecessor")
            prev_end = a.t1


@dataclass
class Segment:
    samples: np.ndarray
    speaker_tag: str
    sample_rate: float

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def peak_normalize(x):
    x = np.asarray(x)
    peak = np.abs(x).max() if x.size else 0
    if peak == 0:
        raise DegenerateInputError("peak_normalize: all-zero input")
    return x / peak


def extract_segments(rec: RawRecording, keep_tag: str) -> list[Segment]:
    out = []
    for a in sorted(rec.annotations, key=lambda a: a.t0):
        if a.tag != keep_tag:
            continue
        i0 = int(round(a.t0 * rec.sample_rate))
        i1 = int(round(a.t1 * rec.sample_rate))
        out.append(Segment(np.asarray(rec.samples[i0:i1]), a.tag, rec.sample_rate))
    if not out:
        raise EmptyResultError(f"no segments tagged {keep_tag!r}")
    return out


def recombine(segments: list[Segment], target: float) -> list[Segment]:
    """Greedy in-order concatenation; a clip is emitted as soon as it reaches
    ``target`` seconds and any shorter remainder is dropped."""
    if target <= 0:
        raise ConfigError(f"target duration must be > 0, got {target}")
    if not segments:
        return []
    tags = {s.speaker_tag for s in segments}
    rates = {s.sample_rate for s in segments}
    if len(tags) > 1:
        raise ConfigError(f"recombine joins one speaker only, got tags {sorted(tags)}")
    if len(rates) > 1:
        raise ConfigError("segments have mixed sample rates")
    tag, sr = tags.pop(), rates.pop()
    out, buf, acc = [], [], 0
    for s in segments:
        buf.append(np.asarray(s.samples))
        acc += len(s.samples)
        if acc / sr >= target - 1e-12:
            out.append(Segment(np.concatenate(buf), tag, sr))
            buf, acc = [], 0
    return out


def resample_to(x, L: int):
    """Linear interpolation at L evenly spaced positions over [0, len-1]."""
    x = np.asarray(x)
    if len(x) < 2 or L < 2:
        raise ConfigError(f"resample_to needs len(x) >= 2 and L >= 2, got {len(x)} and {L}")
    if len(x) == L:
        return x.copy()
    n = len(x)
    pos = np.arange(L) * ((n - 1) / (L - 1))
    pos[-1] = n - 1
    i = np.minimum(pos.astype(np.int64), n - 2)
    w = pos - i
    a, b = x[i], x[i + 1]
    y = np.clip(a + w * (b - a), np.minimum(a, b), np.maximum(a, b))
    y[0], y[-1] = x[0], x[-1]
    return y.astype(x.dtype, copy=False) if np.issubdtype(x.dtype, np.floating) else y


def read_wav(path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM WAV as float64 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatError(f"{path}: expected mono 16-bit PCM")
            sr = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (OSError, wave.Error) as e:
        raise FormatError(f"cannot read WAV {path}: {e}") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path, x, sample_rate: int):
    pcm = np.clip(np.round(np.asarray(x) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_audio(path, sample_rate: float | None = None) -> tuple[np.ndarray, float]:
    """WAV, or raw little-endian f32 (needs ``sample_rate``)."""
    p = Path(path)
    if p.suffix.lower() == ".wav":
        return read_wav(p)
    if sample_rate is None:
        raise ConfigError(f"{p}: raw f32 input needs an explicit sample rate")
    try:
        return np.fromfile(p, dtype="<f4").astype(np.float64), sample_rate
    except OSError as e:
        raise FormatError(f"cannot read {p}: {e}") from e


def read_annotations(path) -> list[Annotation]:
    """CSV rows ``t0,t1,tag``; a header row is skipped when present."""
    out = []
    try:
        with open(path, newline="") as f:
            for n, row in enumerate(csv.reader(f), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if n == 1 and row[0].strip().lower() == "t0":
                    continue
                if len(row) != 3:
                    raise FormatError(f"{path}:{n}: expected t0,t1,tag")
                try:
                    out.append(Annotation(float(row[0]), float(row[1]), row[2].strip()))
                except ValueError as e:
                    raise FormatError(f"{path}:{n}: {e}") from e
    except OSError as e:
        raise FormatError(f"cannot read annotations {path}: {e}") from e
    return out


def preprocess_recording(rec: RawRecording, keep_tag: str, target: float, L: int) -> list[np.ndarray]:
    """Full chain: normalize the recording, extract the kept speaker, recombine
    and resample each clip to ``L`` samples."""
    rec = RawRecording(peak_normalize(rec.samples), rec.sample_rate, rec.annotations)
    clips = recombine(extract_segments(rec, keep_tag), target)
    return [resample_to(c.samples, L).astype(np.float32) for c in clips]
