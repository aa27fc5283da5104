"""Classification, linkage and reconstruction metrics, the speaker-linkage
attack harness and a logistic-map encryption baseline.

Metrics whose denominator is zero are reported as ``None`` rather than 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError

UNDEFINED = None


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    FN: int
    TN: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TN) < 0:
            raise ConfigError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN

    @classmethod
    def from_labels(cls, truth, pred) -> "ConfusionCounts":
        t = np.asarray(truth).astype(bool)
        p = np.asarray(pred).astype(bool)
        return cls(int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum()))


@dataclass(frozen=True)
class PairScore:
    clip_a: int
    clip_b: int
    same_speaker: bool
    score: float


@dataclass(frozen=True)
class ReconStats:
    mse: float
    mae: float
    psnr: float
    peak: float


def _ratio(num, den):
    return num / den if den else UNDEFINED


def classification_metrics(cc: ConfusionCounts) -> dict:
    """Accuracy, precision, recall and F1 (positives = condition present)."""
    if cc.total <= 0:
        raise ConfigError("metrics need at least one counted sample")
    prec = _ratio(cc.TP, cc.TP + cc.FP)
    rec = _ratio(cc.TP, cc.TP + cc.FN)
    if prec is None or rec is None or prec + rec == 0:
        f1 = UNDEFINED
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return {"accuracy": (cc.TP + cc.TN) / cc.total, "precision": prec, "recall": rec, "f1": f1}


def far_frr(cc: ConfusionCounts) -> tuple:
    """FAR = FP/(FP+TN), FRR = FN/(FN+TP); positives are same-speaker pairs."""
    return _ratio(cc.FP, cc.FP + cc.TN), _ratio(cc.FN, cc.FN + cc.TP)


def _rates(pos, neg, thresholds):
    # accept when score >= threshold
    ps, ns = np.sort(pos), np.sort(neg)
    far = 1.0 - np.searchsorted(ns, thresholds, side="left") / len(ns)
    frr = np.searchsorted(ps, thresholds, side="left") / len(ps)
    return far, frr


def sweep_thresholds(pos, neg) -> np.ndarray:
    u = np.unique(np.concatenate([pos, neg]))
    mids = (u[:-1] + u[1:]) / 2
    return np.concatenate([[-np.inf], np.sort(np.concatenate([u, mids])), [np.inf]])


def eer_sweep(pos, neg) -> float:
    """Equal error rate from a sweep over unique scores and midpoints.

    A pair is accepted when its score is at least the threshold. The value
    is read where FAR − FRR changes sign, interpolating linearly between the
    two bracketing thresholds.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if not len(pos) or not len(neg):
        raise ConfigError("EER needs non-empty positive and negative score lists")
    far, frr = _rates(pos, neg, sweep_thresholds(pos, neg))
    d = far - frr
    j = int(np.argmax(d <= 0))
    if d[j] == 0 or j == 0:
        return float((far[j] + frr[j]) / 2)
    w = d[j - 1] / (d[j - 1] - d[j])
    return float(far[j - 1] + w * (far[j] - far[j - 1]))


def recon_stats(a, b, peak: float = 1.0) -> ReconStats:
    """MSE, MAE and PSNR = 10·log10(peak²/MSE); PSNR is +inf when MSE = 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"recon_stats: shapes {a.shape} and {b.shape} differ")
    if not peak > 0:
        raise ConfigError(f"peak must be > 0, got {peak}")
    d = a - b
    mse = float(np.mean(d * d))
    mae = float(np.mean(np.abs(d)))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
    return ReconStats(mse, mae, psnr, float(peak))


# ---------------------------------------------------------------------------
# linkage attack


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_inv(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)


@dataclass
class SpectralEnvelope:
    """Mean log-spectral envelope on mel-spaced bands.

    Frames of ``frame`` samples (Hann window, half overlap, zero-padded to
    ``nfft``) are averaged in the power domain, pooled into ``n_bands`` bands
    evenly spaced in mel from 0 to Nyquist, log-compressed, centred and scaled
    to unit norm.
    """

    sample_rate: float
    n_bands: int = 64
    frame: int = 2048
    nfft: int = 8192
    floor: float = 1e-10

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        n, L = X.shape
        fl = min(self.frame, L)
        hop = max(fl // 2, 1)
        starts = range(0, L - fl + 1, hop)
        win = np.hanning(fl)
        P = np.zeros((n, self.nfft // 2 + 1))
        count = 0
        for s in starts:
            P += np.abs(np.fft.rfft(X[:, s:s + fl] * win, n=self.nfft, axis=1)) ** 2
            count += 1
        P /= count
        freqs = np.fft.rfftfreq(self.nfft, 1.0 / self.sample_rate)
        edges = _mel_inv(np.linspace(0.0, _mel(self.sample_rate / 2), self.n_bands + 1))
        band = np.clip(np.searchsorted(edges, freqs, side="right") - 1, 0, self.n_bands - 1)
        cnt = np.bincount(band, minlength=self.n_bands)
        if (cnt == 0).any():
            raise ConfigError("spectral envelope has empty bands; raise nfft")
        B = np.stack([np.bincount(band, weights=row, minlength=self.n_bands) for row in P]) / cnt
        E = np.log10(B + self.floor)
        E -= E.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(E, axis=1, keepdims=True)
        return E / np.where(norm > 0, norm, 1.0)


def cosine_scores(E, pairs) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    a, b = E[pairs[:, 0]], E[pairs[:, 1]]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return (a * b).sum(axis=1) / np.maximum(na * nb, 1e-300)


PAIR_PLANS = {"balanced": (189, 189), "skewed": (189, 611)}


def make_pairs(speakers, plan="balanced", seed: int = 0, n_pos: int | None = None,
               n_neg: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distinct unordered clip pairs, as (pairs [P, 2], same_speaker [P]).

    ``plan`` picks the (positive, negative) counts: ``"balanced"`` 189/189 or
    ``"skewed"`` 189/611; explicit counts override it.
    """
    spk = np.asarray(speakers)
    if len(np.unique(spk)) < 2:
        raise ConfigError("linkage needs at least two speakers to form negative pairs")
    if plan not in PAIR_PLANS:
        raise ConfigError(f"unknown pairing plan {plan!r}")
    dp, dn = PAIR_PLANS[plan]
    n_pos = dp if n_pos is None else n_pos
    n_neg = dn if n_neg is None else n_neg
    rng = np.random.default_rng([seed, 0x9A1])
    i, j = np.triu_indices(len(spk), k=1)
    same = spk[i] == spk[j]
    pos_idx, neg_idx = np.flatnonzero(same), np.flatnonzero(~same)
    if len(pos_idx) < n_pos or len(neg_idx) < n_neg:
        raise ConfigError(f"not enough pairs for plan: have {len(pos_idx)}/{len(neg_idx)}")
    pick_p = rng.choice(pos_idx, n_pos, replace=False)
    pick_n = rng.choice(neg_idx, n_neg, replace=False)
    sel = np.concatenate([pick_p, pick_n])
    return np.stack([i[sel], j[sel]], axis=1), np.concatenate([np.ones(n_pos, bool), np.zeros(n_neg, bool)])


def calibrate_threshold(pos, neg) -> float:
    """Threshold maximizing accuracy on calibration pairs (lowest such one)."""
    pos, neg = np.asarray(pos, np.float64), np.asarray(neg, np.float64)
    th = sweep_thresholds(pos, neg)[1:-1]
    far, frr = _rates(pos, neg, th)
    correct = (1 - frr) * len(pos) + (1 - far) * len(neg)
    return float(th[int(np.argmax(correct))])


@dataclass
class LinkageResult:
    scores: list[PairScore]
    accuracy: float
    far: float | None
    frr: float | None
    eer: float | None
    threshold: float

    def summary(self) -> dict:
        return {"ACC": self.accuracy, "FAR": self.far, "FRR": self.frr, "EER": self.eer,
                "threshold": self.threshold, "n_pairs": len(self.scores)}


def linkage_attack(clips, speakers, pairs, same, embedder, threshold: float) -> LinkageResult:
    """Score every pair, decide at ``threshold`` (accept when score >= it)."""
    E = embedder(clips)
    s = cosine_scores(E, pairs)
    same = np.asarray(same, bool)
    accept = s >= threshold
    cc = ConfusionCounts.from_labels(same, accept)
    far, frr = far_frr(cc)
    ps = [PairScore(int(a), int(b), bool(t), float(v)) for (a, b), t, v in zip(pairs, same, s)]
    eer = eer_sweep(s[same], s[~same]) if same.any() and not same.all() else UNDEFINED
    return LinkageResult(ps, (cc.TP + cc.TN) / cc.total, far, frr, eer, threshold)


def write_pair_scores(path, result: LinkageResult):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_a", "clip_b", "same_speaker", "score"])
        for p in result.scores:
            w.writerow([p.clip_a, p.clip_b, int(p.same_speaker), repr(p.score)])


# ---------------------------------------------------------------------------
# chaos-map baseline

CHAOS_BURN_IN = 100
CHAOS_SCALE = 10.0


def logistic_keystream(key_seed, n: int, r: float = 3.99) -> np.ndarray:
    """Logistic-map iterates after a burn-in of 100; vectorized over seeds."""
    seeds = np.atleast_1d(np.asarray(key_seed, dtype=np.float64))
    if np.any((seeds <= 0) | (seeds >= 1)):
        raise ConfigError("logistic-map seed must lie in (0, 1)")
    if not 3.57 < r < 4:
        raise ConfigError(f"r must be in (3.57, 4), got {r}")
    l = seeds.copy()
    for _ in range(CHAOS_BURN_IN):
        l = r * l * (1 - l)
    out = np.empty((len(seeds), n))
    for i in range(n):
        l = r * l * (1 - l)
        out[:, i] = l
    return out


def chaos_encrypt(x, key_seed, r: float = 3.99) -> np.ndarray:
    """c_i = x_i + 10·(l_i − 0.5). Rows of ``x`` pair with entries of ``key_seed``."""
    x = np.asarray(x, dtype=np.float64)
    ks = logistic_keystream(key_seed, x.shape[-1], r)
    return x + CHAOS_SCALE * (ks.reshape(x.shape) - 0.5)


def chaos_decrypt(c, key_seed, r: float = 3.99) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    ks = logistic_keystream(key_seed, c.shape[-1], r)
    return c - CHAOS_SCALE * (ks.reshape(c.shape) - 0.5)


def chaos_seeds(n: int, master_seed: int) -> np.ndarray:
    """Per-clip keys in (0.01, 0.99) derived from one master seed."""
    return np.random.default_rng([master_seed, 0xC4A05]).uniform(0.01, 0.99, n)


# ---------------------------------------------------------------------------
# reports

SWEEP_THRESHOLDS = (0.3, 0.4, 0.5, 0.6)


def detection_report(truth, scores, threshold: float = 0.4) -> dict:
    pred = np.asarray(scores) > threshold
    cc = ConfusionCounts.from_labels(truth, pred)
    out = classification_metrics(cc)
    out["confusion"] = asdict(cc)
    return out


def write_confusion_csvs(out_dir, truth, scores, thresholds=SWEEP_THRESHOLDS) -> list[str]:
    from pathlib import Path
    paths = []
    for t in thresholds:
        cc = ConfusionCounts.from_labels(truth, np.asarray(scores) > t)
        p = Path(out_dir) / f"confusion_{t:.1f}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["", "pred_1", "pred_0"])
            w.writerow(["true_1", cc.TP, cc.FN])
            w.writerow(["true_0", cc.FP, cc.TN])
        paths.append(str(p))
    return paths
