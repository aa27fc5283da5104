"""Three-phase training with gradient routing, freezing and an optional
DP-SGD mechanism on the autoencoder.

Phase 1 trains the autoencoder and the classifier jointly; the classifier sees
only ``v_d``. Phase 2 freezes the autoencoder and trains the classifier on the
fused pair. Phase 3 encrypts ``v_nd`` before fusion and fine-tunes the
classifier.

Autoencoder gradients are always formed from per-clip gradient stacks reduced
in a fixed order. The DP path clips those stacks before the same reduction,
so with an infinite clip norm and zero noise it performs identical arithmetic.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import GateMode, Vpm, gate
from .encryptor import SecretKey, encrypt
from .errors import ConfigError, NumericError
from .nn_core import AdamW, Dropout, Module, Param, cross_entropy, save_checkpoint
from .sdae import FeaturePair, Sdae, loss_ortho, loss_recon


@dataclass
class PhaseConfig:
    phase: int = 1
    lambda_ortho: float = 10.0
    lambda_recon: float = 10.0
    lambda_cls: float = 1.0
    lr: float = 1e-4
    sdae_lr: float | None = None
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    label_smoothing: float = 0.1
    ortho_all_pairs: bool = False
    key: SecretKey | None = None
    strength: int | None = None
    warm_start: str = "phase2"

    def __post_init__(self):
        if self.phase not in (1, 2, 3):
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warm_start not in ("phase1", "phase2"):
            raise ConfigError(f"warm_start must be phase1 or phase2, got {self.warm_start!r}")


@dataclass
class DpConfig:
    enabled: bool = False
    clip_norm: float = 1.0
    noise_multiplier: float | None = None
    epsilon: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.enabled:
            if not self.clip_norm > 0:
                raise ConfigError(f"clip norm must be > 0, got {self.clip_norm}")
            if self.noise_multiplier is None or self.noise_multiplier < 0:
                raise ConfigError("DP needs an explicit noise multiplier >= 0")


@dataclass
class TrainReport:
    phase: int
    batches_per_epoch: int
    ortho: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    cls: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoint: str | None = None
    dp: dict | None = None

    def epoch_means(self, trace: str) -> list[float]:
        v = np.asarray(getattr(self, trace), dtype=np.float64)
        return [float(c.mean()) for c in np.array_split(v, len(v) // self.batches_per_epoch)] if len(v) else []

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded shuffle; a trailing batch of one clip is dropped."""
    perm = np.random.default_rng([seed, 0xBA7C, epoch]).permutation(n)
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def reseed_dropout(model: Module, rng: np.random.Generator):
    stack = [model]
    while stack:
        m = stack.pop()
        if isinstance(m, Dropout):
            m.rng = rng
        stack.extend(m.children())


# ---------------------------------------------------------------------------
# DP mechanism


def dp_clip(g, C: float):
    """``g · min(1, C/‖g‖)``; the result's norm never exceeds C."""
    if not C > 0:
        raise ConfigError(f"clip norm must be > 0, got {C}")
    g = np.asarray(g)
    norm = float(np.linalg.norm(g.astype(np.float64).ravel()))
    if norm <= C:
        return g
    # shrink the factor one ULP of the gradient's own precision at a time
    ft = g.dtype.type if np.issubdtype(g.dtype, np.floating) else np.float64
    f = ft(C / norm)
    while True:
        out = g * f
        if float(np.linalg.norm(np.asarray(out, dtype=np.float64).ravel())) <= C:
            return out
        f = np.nextafter(f, ft(0))


def dp_aggregate(clipped, C: float, sigma: float, B: int, seed=None, rng=None):
    """(Σ clipped + N(0, σ²C²)) / B; noise drawn from ``rng`` or ``seed``."""
    if B < 1:
        raise ConfigError(f"batch size must be >= 1, got {B}")
    clipped = np.asarray(clipped)
    total = clipped.sum(axis=0)
    if sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(seed)
        total = total + rng.normal(0.0, sigma * C, total.shape).astype(total.dtype)
    return total / total.dtype.type(B) if np.issubdtype(total.dtype, np.floating) else total / B


def per_example_norms(params: list[Param]) -> np.ndarray:
    sq = None
    for p in params:
        s = np.square(p.grad_stack.astype(np.float64)).reshape(p.grad_stack.shape[0], -1).sum(axis=1)
        sq = s if sq is None else sq + s
    return np.sqrt(sq)


def _clip_stacks(params: list[Param], C: float) -> tuple[list[np.ndarray], np.ndarray]:
    norms = per_example_norms(params)
    dtype = params[0].grad_stack.dtype
    factor = np.where(norms > C, C / np.where(norms > 0, norms, 1.0), 1.0).astype(dtype)
    over = np.flatnonzero(norms > C)

    def apply(f):
        out = []
        for p in params:
            if not len(over):
                out.append(p.grad_stack)
                continue
            shape = (-1,) + (1,) * (p.grad_stack.ndim - 1)
            out.append(p.grad_stack * f.reshape(shape))
        return out

    clipped = apply(factor)
    while len(over):
        got = np.sqrt(sum(np.square(c.astype(np.float64)).reshape(c.shape[0], -1).sum(axis=1) for c in clipped))
        bad = got > C
        if not bad.any():
            return clipped, got
        factor[bad] = np.nextafter(factor[bad], dtype.type(0))
        clipped = apply(factor)
    return clipped, norms


class _SdaeUpdater:
    """Turns per-clip gradient stacks into the autoencoder update."""

    def __init__(self, params: list[Param], dp: DpConfig, seed: int):
        self.params = [p for p in params if p.trainable and not p.is_buffer]
        self.dp = dp
        self.seed = seed
        self.step = 0
        self.max_norm = 0.0
        self.violations = 0
        self.clipped_examples = 0
        self.examples = 0

    def __call__(self, B: int):
        self.step += 1
        if not self.dp.enabled:
            for p in self.params:
                p.grad = p.grad_stack.sum(axis=0) / p.grad.dtype.type(B)
            return
        C, sigma = self.dp.clip_norm, self.dp.noise_multiplier
        raw = per_example_norms(self.params)
        clipped, norms = _clip_stacks(self.params, C)
        self.examples += B
        self.clipped_examples += int((raw > C).sum())
        self.max_norm = max(self.max_norm, float(norms.max()))
        bad = int((norms > C).sum())
        self.violations += bad
        assert bad == 0, f"{bad} clipped per-example gradients exceed C={C}"
        rng = np.random.default_rng([self.seed, 0xD9, self.step])
        for p, c in zip(self.params, clipped):
            p.grad = dp_aggregate(c, C, sigma, B, rng=rng)

    def summary(self) -> dict | None:
        if not self.dp.enabled:
            return None
        return {"clip_norm": self.dp.clip_norm, "noise_multiplier": self.dp.noise_multiplier,
                "epsilon": self.dp.epsilon, "delta": self.dp.delta, "max_clipped_norm": self.max_norm,
                "violations": self.violations, "clipped_fraction":
                    self.clipped_examples / self.examples if self.examples else 0.0}


# ---------------------------------------------------------------------------
# phases


def _finite_guard(values, models, snapshot, checkpoint, meta):
    if all(math.isfinite(v) for v in values):
        return
    for m, s in zip(models, snapshot):
        m.load_state_dict(s)
    if checkpoint:
        save_checkpoint(checkpoint, _merged_state(models), dict(meta, diverged=True))
    raise NumericError("training diverged (non-finite loss); last finite state restored")


def _merged_state(models):
    out = {}
    for m in models:
        out.update(m.state_dict())
    return out


def _meta(cfg: PhaseConfig, dp: DpConfig | None = None):
    from . import __version__
    c = asdict(cfg)
    c["key"] = None if cfg.key is None else {"fingerprint": cfg.key.fingerprint()}
    return {"phase": cfg.phase, "seed": cfg.seed, "config": c,
            "dp": None if dp is None else asdict(dp), "version": __version__}


def train_phase1(sdae: Sdae, vpm: Vpm, X, y, cfg: PhaseConfig, dp: DpConfig | None = None,
                 checkpoint=None) -> TrainReport:
    """Joint objective λ_o·L_ortho + λ_r·L_recon + λ_c·L_C.

    L_C reaches both networks through ``v_d``; the other terms only touch the
    autoencoder. With ``λ_c = 0`` the classifier is not run or updated.
    """
    dp = dp or DpConfig()
    X = np.asarray(X, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    sdae.train()
    vpm.train()
    reseed_dropout(sdae, np.random.default_rng([cfg.seed, 0xD1]))
    reseed_dropout(vpm, np.random.default_rng([cfg.seed, 0xD2]))
    use_cls = cfg.lambda_cls != 0
    sd_opt = AdamW(sdae.params(), lr=cfg.sdae_lr or cfg.lr, weight_decay=cfg.weight_decay)
    vpm_opt = AdamW(vpm.params(), lr=cfg.lr, weight_decay=cfg.weight_decay) if use_cls else None
    upd = _SdaeUpdater(sdae.params(), dp, cfg.seed)
    models = [sdae, vpm]
    rep = TrainReport(1, len(epoch_batches(len(X), cfg.batch_size, cfg.seed, 0)))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        for idx in epoch_batches(len(X), cfg.batch_size, cfg.seed, epoch):
            B = len(idx)
            xb, yb = X[idx], y[idx]
            snapshot = [m.state_dict() for m in models]
            sdae.zero_grad()
            vpm.zero_grad()
            pair = sdae.forward(xb)
            lo, go_d, go_nd = loss_ortho(pair.v_d, pair.v_nd, cfg.ortho_all_pairs, reduction="sum")
            lr_, gr = loss_recon(pair.v_d, pair.v_nd, xb, reduction="sum")
            g_d = cfg.lambda_ortho * go_d + cfg.lambda_recon * gr
            g_nd = cfg.lambda_ortho * go_nd + cfg.lambda_recon * gr
            lc = 0.0
            if use_cls:
                logits = vpm.forward(gate(pair, GateMode.PARTIAL))
                try:
                    lc, glog = cross_entropy(logits, yb, cfg.label_smoothing, reduction="sum")
                except NumericError:
                    lc, glog = math.nan, None
                else:
                    g_d = g_d + cfg.lambda_cls * vpm.backward(glog)
            vals = [float(lo) / B, float(lr_) / B, float(lc) / B]
            total = cfg.lambda_ortho * vals[0] + cfg.lambda_recon * vals[1] + cfg.lambda_cls * vals[2]
            _finite_guard(vals + [total], models, snapshot, checkpoint, _meta(cfg, dp))
            sdae.backward(g_d, g_nd, per_example=True)
            upd(B)
            sd_opt.step()
            if use_cls:
                for p in vpm.params():
                    p.grad = p.grad / p.grad.dtype.type(B)
                vpm_opt.step()
            rep.ortho.append(vals[0])
            rep.recon.append(vals[1])
            rep.cls.append(vals[2])
            rep.total.append(total)
        rep.epoch_seconds.append(time.perf_counter() - t0)
    rep.dp = upd.summary()
    if checkpoint:
        save_checkpoint(checkpoint, _merged_state(models), _meta(cfg, dp))
        rep.checkpoint = str(checkpoint)
    return rep


def train_classifier(vpm: Vpm, F, y, cfg: PhaseConfig, checkpoint=None, extra_state=None) -> TrainReport:
    """Classifier-only training on fixed inputs ``F`` with L_C."""
    F = np.asarray(F, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    vpm.train()
    reseed_dropout(vpm, np.random.default_rng([cfg.seed, 0xD2]))
    opt = AdamW(vpm.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rep = TrainReport(cfg.phase, len(epoch_batches(len(F), cfg.batch_size, cfg.seed, 0)))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        for idx in epoch_batches(len(F), cfg.batch_size, cfg.seed, epoch):
            snapshot = [vpm.state_dict()]
            vpm.zero_grad()
            try:
                loss, g = cross_entropy(vpm.forward(F[idx]), y[idx], cfg.label_smoothing)
            except NumericError:
                loss = math.nan
            _finite_guard([float(loss)], [vpm], snapshot, checkpoint, _meta(cfg))
            vpm.backward(g)
            opt.step()
            rep.cls.append(float(loss))
            rep.total.append(float(loss))
        rep.epoch_seconds.append(time.perf_counter() - t0)
    if checkpoint:
        state = dict(extra_state or {})
        state.update(vpm.state_dict())
        save_checkpoint(checkpoint, state, _meta(cfg))
        rep.checkpoint = str(checkpoint)
    return rep


def phase_inputs(pair: FeaturePair, phase: int, key: SecretKey | None = None,
                 strength: int | None = None) -> np.ndarray:
    """Classifier inputs for phase 2 (fused) or phase 3 (fused with encrypted v_nd)."""
    if phase == 2:
        return gate(pair, GateMode.FULL)
    if phase == 3:
        if key is None or strength is None:
            raise ConfigError("phase 3 needs a key and a strength T")
        enc = encrypt(pair.v_nd, key, strength).astype(np.float32)
        return gate(FeaturePair(pair.v_d, enc), GateMode.FULL)
    raise ConfigError(f"no classifier inputs defined for phase {phase}")


def train_phase2(sdae: Sdae, vpm: Vpm, X, y, cfg: PhaseConfig, checkpoint=None,
                 pair: FeaturePair | None = None) -> TrainReport:
    """Frozen autoencoder; classifier trains on v_d + v_nd."""
    sdae.set_trainable(False)
    pair = pair or sdae.features(X)
    return train_classifier(vpm, phase_inputs(pair, 2), y, cfg, checkpoint, sdae.state_dict())


def train_phase3(sdae: Sdae, vpm: Vpm, X, y, cfg: PhaseConfig, checkpoint=None,
                 pair: FeaturePair | None = None) -> TrainReport:
    """Frozen autoencoder; v_nd is encrypted with (key, T) before fusion."""
    if cfg.key is None or cfg.strength is None:
        raise ConfigError("phase 3 needs a key and a strength T")
    sdae.set_trainable(False)
    pair = pair or sdae.features(X)
    return train_classifier(vpm, phase_inputs(pair, 3, cfg.key, cfg.strength), y, cfg, checkpoint,
                            sdae.state_dict())
