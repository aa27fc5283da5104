"""Desk-scale experiment runner used by the acceptance suite and ``taac eval``.

Training here uses the desk learning rates (classifier 1e-3, autoencoder
3e-3) instead of the 1e-4 preset, which needs far more than 10 epochs at this
scale. Everything else keeps the preset values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .classifier import GateMode, Vpm, VpmConfig, gate
from .encryptor import SecretKey, encrypt
from .evaluator import (SpectralEnvelope, calibrate_threshold, chaos_encrypt, chaos_seeds,
                        cosine_scores, detection_report, linkage_attack, make_pairs)
from .sdae import FeaturePair, Sdae, SdaeConfig, relative_recon_error
from .synthdata import CorpusConfig, CorpusManifest, generate, split_corpus
from .trainer import DpConfig, PhaseConfig, TrainReport, train_classifier, train_phase1

DESK_LR = 1e-3
DESK_SDAE_LR = 3e-3
LINKAGE_STRENGTHS = (0, 5, 10, 25)
LINKAGE_KEYS = 4


def desk_phase(phase: int, seed: int, **kw) -> PhaseConfig:
    return PhaseConfig(phase=phase, lr=DESK_LR, sdae_lr=DESK_SDAE_LR, seed=seed, **kw)


def split_key(split: int, index: int = 0) -> SecretKey:
    return SecretKey.random(np.random.default_rng([split, index, 0x4B]))


def accuracy(truth, scores, threshold: float) -> float:
    return detection_report(truth, scores, threshold)["accuracy"]


@dataclass
class SplitRun:
    split: int
    sdae: Sdae
    phase1: TrainReport
    train_pair: FeaturePair
    test_pair: FeaturePair
    ortho_ratio: float
    recon_error: float
    acc: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"split": self.split, "ortho_ratio": self.ortho_ratio, "recon_error": self.recon_error,
                "accuracy": dict(self.acc), "seconds": dict(self.seconds)}


def _fit_from(state, cfg: VpmConfig, seed, F, y, pcfg):
    vpm = Vpm(cfg, seed)
    vpm.load_state_dict(state)
    train_classifier(vpm, F, y, pcfg)
    return vpm


def run_split(X, manifest: CorpusManifest, split: int, train_idx, test_idx, strengths=(10, 25),
              chaos: bool = True, sdae_cfg: SdaeConfig | None = None,
              vpm_cfg: VpmConfig | None = None) -> SplitRun:
    """Phase I, Phase II, Phase III at each strength and the chaos baseline on one split.

    The split index doubles as the training seed. Phase III and the chaos run
    warm-start from the Phase II classifier and retrain on their own inputs.
    """
    vpm_cfg = vpm_cfg or VpmConfig()
    y = manifest.labels()
    Xtr, ytr, Xte, yte = X[train_idx], y[train_idx], X[test_idx], y[test_idx]
    th = vpm_cfg.threshold
    sdae = Sdae(sdae_cfg or SdaeConfig(), seed=split)
    vpm = Vpm(vpm_cfg, seed=split)
    t0 = time.perf_counter()
    rep = train_phase1(sdae, vpm, Xtr, ytr, desk_phase(1, split))
    sec = {"phase1": time.perf_counter() - t0}
    sdae.set_trainable(False)
    ptr, pte = sdae.features(Xtr), sdae.features(Xte)
    em = rep.epoch_means("ortho")
    run = SplitRun(split, sdae, rep, ptr, pte, em[-1] / em[0], relative_recon_error(pte, Xte), seconds=sec)

    t0 = time.perf_counter()
    train_classifier(vpm, gate(ptr, GateMode.FULL), ytr, desk_phase(2, split))
    sec["phase2"] = time.perf_counter() - t0
    run.acc["unencrypted"] = accuracy(yte, vpm.scores(gate(pte, GateMode.FULL)), th)
    p2 = vpm.state_dict()

    key = split_key(split)
    for T in strengths:
        t0 = time.perf_counter()
        enc = lambda p: gate(FeaturePair(p.v_d, encrypt(p.v_nd, key, T).astype(np.float32)), GateMode.FULL)
        cfg = desk_phase(3, split, key=key, strength=T)
        m = _fit_from(p2, vpm_cfg, split, enc(ptr), ytr, cfg)
        run.acc[f"T={T}"] = accuracy(yte, m.scores(enc(pte)), th)
        sec[f"phase3_T{T}"] = time.perf_counter() - t0

    if chaos:
        t0 = time.perf_counter()
        seeds = chaos_seeds(len(X), 1000 + split)
        # prior-work scheme: the whole released clip is encrypted
        ch = lambda p, idx: chaos_encrypt(gate(p, GateMode.FULL), seeds[idx]).astype(np.float32)
        m = _fit_from(p2, vpm_cfg, split, ch(ptr, train_idx), ytr, desk_phase(3, split))
        run.acc["chaos"] = accuracy(yte, m.scores(ch(pte, test_idx)), th)
        sec["chaos"] = time.perf_counter() - t0
    return run


def linkage_sweep(run: SplitRun, manifest: CorpusManifest, train_idx, test_idx,
                  strengths=LINKAGE_STRENGTHS, n_keys: int = LINKAGE_KEYS, plan: str = "balanced") -> dict:
    """Linkage metrics on released fused clips, per strength, averaged over keys.

    The verifier threshold comes from unencrypted pairs of the training
    speakers; evaluation pairs are drawn from the held-out speakers. T = 0
    means the clips are released unencrypted.
    """
    spk = manifest.speakers()
    emb = SpectralEnvelope(manifest.sample_rate)
    cal_pairs, cal_same = make_pairs(spk[train_idx], plan, seed=run.split)
    s = cosine_scores(emb(gate(run.train_pair, GateMode.FULL)), cal_pairs)
    tau = calibrate_threshold(s[cal_same], s[~cal_same])
    pairs, same = make_pairs(spk[test_idx], plan, seed=run.split + 1)
    out = {}
    for T in strengths:
        rows = []
        for k in range(n_keys if T > 0 else 1):
            v_nd = run.test_pair.v_nd if T == 0 else encrypt(run.test_pair.v_nd, split_key(run.split, 100 + k), T)
            clips = gate(FeaturePair(run.test_pair.v_d, np.asarray(v_nd, np.float32)), GateMode.FULL)
            rows.append(linkage_attack(clips, spk[test_idx], pairs, same, emb, tau).summary())
        out[T] = {m: float(np.mean([r[m] for r in rows])) for m in ("ACC", "EER")}
        out[T].update(threshold=tau, n_pairs=len(pairs), per_key=rows if T > 0 else None)
        for r in rows:
            r.pop("threshold", None)
    return out


def dp_runs(X, manifest: CorpusManifest, split: int, train_idx, clip_norm: float = 1.0,
            noise_multiplier: float = 1.0, sdae_cfg: SdaeConfig | None = None,
            baseline: TrainReport | None = None, baseline_sdae: Sdae | None = None) -> dict:
    """DP Phase I next to the non-DP run and the σ = 0, C = ∞ configuration.

    ``baseline``/``baseline_sdae`` reuse an existing non-DP run of the same
    split; otherwise one is trained here.
    """
    y = manifest.labels()
    Xtr, ytr = X[train_idx], y[train_idx]
    cfg = desk_phase(1, split)

    def run(dp):
        sd, vp = Sdae(sdae_cfg or SdaeConfig(), seed=split), Vpm(VpmConfig(), seed=split)
        return sd, vp, train_phase1(sd, vp, Xtr, ytr, cfg, dp)

    if baseline is None:
        baseline_sdae, _, baseline = run(None)
    sd_dp, _, rep_dp = run(DpConfig(True, clip_norm, noise_multiplier))
    sd_0, _, rep_0 = run(DpConfig(True, float("inf"), 0.0))
    a, b = baseline_sdae.state_dict(), sd_0.state_dict()
    same_params = a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    same_trace = all(getattr(baseline, t) == getattr(rep_0, t) for t in ("ortho", "recon", "cls", "total"))
    return {"dp": rep_dp.dp, "bit_exact": bool(same_params and same_trace),
            "overhead": float(np.mean(rep_dp.epoch_seconds) / np.mean(baseline.epoch_seconds)),
            "dp_epoch_seconds": rep_dp.epoch_seconds, "base_epoch_seconds": baseline.epoch_seconds,
            "dp_report": rep_dp, "dp_sdae": sd_dp}


def desk_corpus(cfg: CorpusConfig | None = None):
    X, man = generate(cfg or CorpusConfig())
    return X, man, split_corpus(man, 3, 0)
