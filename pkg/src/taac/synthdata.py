"""Deterministic synthetic corpus with planted identity and condition cues.

Identity lives in a speaker's fundamental frequency and its four harmonic
gains. The condition label (1 = depressed) adds a slow amplitude modulation
and steepens the spectral tilt by 6 dB/octave.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TaacError

F0_MIN, F0_MAX = 100.0, 250.0
N_HARMONICS = 4
EVEN_SLOTS = 76   # 100, 102, ..., 250
ODD_SLOTS = 75    # 101, 103, ..., 249
AM_RATE_HZ = 0.5
AM_DEPTH = 0.3
TILT_SHIFT_DB = -6.0


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0: float
    harmonic_gains: tuple[float, ...]
    base_tilt: float


@dataclass
class SyntheticClip:
    samples: np.ndarray
    speaker_id: int
    label: int
    clip_seed: int


@dataclass
class CorpusConfig:
    seed: int = 7
    n_speakers: int = 40
    clips_per_speaker: int = 30
    depression_rate: float = 0.4
    sample_rate: int = 32000
    L: int = 2000
    gain_depth_db: float = 4.0
    tilt_range_db: float = 1.0
    noise: float = 0.02


@dataclass
class ClipRecord:
    file: str
    offset: int
    speaker_id: int
    index: int
    label: int
    clip_seed: int


@dataclass
class CorpusManifest:
    corpus_seed: int
    n_speakers: int
    clips_per_speaker: int
    depression_rate: float
    sample_rate: int
    L: int
    clips: list[ClipRecord] = field(default_factory=list)

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    def speakers(self) -> np.ndarray:
        return np.array([c.speaker_id for c in self.clips], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        d = json.loads(text)
        d["clips"] = [ClipRecord(**c) for c in d["clips"]]
        return cls(**d)


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def f0_slot(corpus_seed: int, speaker_id: int) -> float:
    """Speaker f0 on a 2 Hz grid, permuted by a seeded affine map.

    Ids below 76 get distinct even-Hz values, so any two differ by at least
    2 Hz. The next 75 ids use the odd-Hz grid (gaps of at least 1 Hz to
    everything earlier); larger ids fall back to a seeded uniform draw.
    """
    if speaker_id < 0:
        raise ConfigError(f"speaker_id must be >= 0, got {speaker_id}")
    rng = np.random.default_rng([corpus_seed, 0xF0])
    units = [a for a in range(1, EVEN_SLOTS) if np.gcd(a, EVEN_SLOTS) == 1]
    a, b = units[rng.integers(len(units))], int(rng.integers(EVEN_SLOTS))
    if speaker_id < EVEN_SLOTS:
        return F0_MIN + 2.0 * ((a * speaker_id + b) % EVEN_SLOTS)
    j = speaker_id - EVEN_SLOTS
    if j < ODD_SLOTS:
        units = [c for c in range(1, ODD_SLOTS) if np.gcd(c, ODD_SLOTS) == 1]
        c, d = units[rng.integers(len(units))], int(rng.integers(ODD_SLOTS))
        return F0_MIN + 1.0 + 2.0 * ((c * j + d) % ODD_SLOTS)
    return float(np.random.default_rng([corpus_seed, speaker_id, 0xF1]).uniform(F0_MIN, F0_MAX))


def make_speaker(corpus_seed: int, speaker_id: int, gain_depth_db: float = 4.0,
                 tilt_range_db: float = 1.0) -> SpeakerProfile:
    """Seeded speaker profile.

    Gains are drawn in dB, then the least-squares slope over log2(harmonic)
    is removed so the gains carry no tilt of their own, and the largest gain
    is pinned to 1.
    """
    f0 = f0_slot(corpus_seed, speaker_id)
    rng = np.random.default_rng([corpus_seed, speaker_id])
    db = rng.uniform(-gain_depth_db, 0.0, N_HARMONICS)
    oct_ = np.log2(np.arange(1, N_HARMONICS + 1))
    slope = np.polyfit(oct_, db, 1)[0]
    db = db - slope * oct_
    db -= db.max()
    gains = np.clip(10 ** (db / 20), 0.2, 1.0)
    tilt = float(rng.uniform(-tilt_range_db, tilt_range_db))
    return SpeakerProfile(speaker_id, f0, tuple(float(g) for g in gains), tilt)


def synth_clip(profile: SpeakerProfile, label: int, clip_seed: int, L: int, sample_rate: float,
               noise: float = 0.02) -> SyntheticClip:
    """Harmonic stack plus uniform noise, peak-normalized.

    Each clip draws its own harmonic phases and modulation phase from
    ``clip_seed``.
    """
    if L < 64:
        raise ConfigError(f"clip length must be >= 64, got {L}")
    top = N_HARMONICS * profile.f0
    if sample_rate < 4 * top:
        raise ConfigError(f"sample rate {sample_rate} Hz risks aliasing: top harmonic {top} Hz "
                          f"needs at least {4 * top} Hz")
    if not 0 <= noise <= 0.05:
        raise ConfigError(f"generation noise amplitude must be in [0, 0.05], got {noise}")
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    rng = np.random.default_rng(clip_seed)
    t = np.arange(L) / float(sample_rate)
    h = np.arange(1, N_HARMONICS + 1)
    tilt = profile.base_tilt + (TILT_SHIFT_DB if label else 0.0)
    amp = np.asarray(profile.harmonic_gains) * 10 ** (tilt * np.log2(h) / 20)
    phases = rng.uniform(0, 2 * np.pi, N_HARMONICS)
    x = (amp[:, None] * np.sin(2 * np.pi * profile.f0 * h[:, None] * t + phases[:, None])).sum(axis=0)
    am_phase = rng.uniform(0, 2 * np.pi)
    if label:
        x = x * (1 + AM_DEPTH * np.sin(2 * np.pi * AM_RATE_HZ * t + am_phase))
    x = x + rng.uniform(-noise, noise, L)
    x = x / np.abs(x).max()
    return SyntheticClip(x.astype(np.float32), profile.speaker_id, int(label), int(clip_seed))


def depressed_speakers(corpus_seed: int, n_speakers: int, rate: float) -> set[int]:
    """The first floor(rate·n) speakers of a seeded permutation."""
    if not 0 <= rate <= 1:
        raise ConfigError(f"depression rate must be in [0, 1], got {rate}")
    n_dep = int(np.floor(rate * n_speakers + 1e-9))
    perm = np.random.default_rng([corpus_seed, 0xDE]).permutation(n_speakers)
    return {int(s) for s in perm[:n_dep]}


def clip_filename(speaker: int, index: int) -> str:
    return f"clip_{speaker:04}_{index:04}.f32"


def generate(cfg: CorpusConfig) -> tuple[np.ndarray, CorpusManifest]:
    """Build the corpus in memory: a [n_clips, L] float32 array and its manifest."""
    if cfg.n_speakers < 2 or cfg.clips_per_speaker < 1:
        raise ConfigError("corpus needs n_speakers >= 2 and clips_per_speaker >= 1")
    dep = depressed_speakers(cfg.seed, cfg.n_speakers, cfg.depression_rate)
    man = CorpusManifest(cfg.seed, cfg.n_speakers, cfg.clips_per_speaker, cfg.depression_rate,
                         cfg.sample_rate, cfg.L)
    X = np.empty((cfg.n_speakers * cfg.clips_per_speaker, cfg.L), dtype=np.float32)
    row = 0
    for s in range(cfg.n_speakers):
        prof = make_speaker(cfg.seed, s, cfg.gain_depth_db, cfg.tilt_range_db)
        label = int(s in dep)
        for i in range(cfg.clips_per_speaker):
            seed = _seed_int(cfg.seed, s, i)
            X[row] = synth_clip(prof, label, seed, cfg.L, cfg.sample_rate, cfg.noise).samples
            man.clips.append(ClipRecord(clip_filename(s, i), 0, s, i, label, seed))
            row += 1
    return X, man


def write_clip(path, samples):
    np.asarray(samples, dtype="<f4").tofile(path)


def read_clip(path) -> np.ndarray:
    try:
        return np.fromfile(path, dtype="<f4").astype(np.float32)
    except OSError as e:
        raise TaacError(f"cannot read clip {path}: {e}") from e


def gen_corpus(cfg: CorpusConfig, out_dir) -> tuple[np.ndarray, CorpusManifest]:
    """Generate and write one ``.f32`` file per clip plus ``manifest.json``."""
    X, man = generate(cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for rec, x in zip(man.clips, X):
            write_clip(out / rec.file, x)
        (out / "manifest.json").write_text(man.to_json())
    except OSError as e:
        raise TaacError(f"cannot write corpus under {out}: {e}") from e
    return X, man


def load_corpus(corpus_dir) -> tuple[np.ndarray, CorpusManifest]:
    d = Path(corpus_dir)
    try:
        man = CorpusManifest.from_json((d / "manifest.json").read_text())
    except OSError as e:
        raise TaacError(f"cannot read manifest in {d}: {e}") from e
    X = np.stack([read_clip(d / c.file) for c in man.clips]) if man.clips else np.empty((0, man.L), np.float32)
    return X, man


def split_corpus(manifest: CorpusManifest, n_splits: int = 10, split_seed: int = 0,
                 test_fraction: float = 0.2) -> list[tuple[np.ndarray, np.ndarray]]:
    """Speaker-disjoint splits as (train clip indices, test clip indices)."""
    if n_splits < 1:
        raise ConfigError(f"n_splits must be >= 1, got {n_splits}")
    spk = manifest.speakers()
    ids = np.unique(spk)
    if len(ids) < 5:
        raise ConfigError(f"{len(ids)} speakers cannot form a 20% test split (need >= 5)")
    n_test = max(1, int(round(test_fraction * len(ids))))
    out = []
    for i in range(n_splits):
        test_spk = np.random.default_rng([split_seed, i]).permutation(ids)[:n_test]
        te = np.isin(spk, test_spk)
        out.append((np.flatnonzero(~te), np.flatnonzero(te)))
    return out
