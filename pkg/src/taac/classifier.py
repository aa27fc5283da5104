"""Phase-gated 1-D CNN head producing two logits per clip."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn_core import (BatchNorm, Conv1d, Dropout, Linear, Module, ReLU, avgpool_backward,
                      avgpool_forward, softmax)
from .sdae import FeaturePair, fuse


class GateMode(enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    BLOCKED = "blocked"


PHASE_GATE = {1: GateMode.PARTIAL, 2: GateMode.FULL, 3: GateMode.FULL}


def gate(pair: FeaturePair, mode: GateMode):
    """What reaches the classifier: the fused pair, ``v_d`` alone, or nothing."""
    if pair.v_d.shape != pair.v_nd.shape:
        raise DimensionError(f"component shapes differ: {pair.v_d.shape} vs {pair.v_nd.shape}")
    if mode is GateMode.FULL:
        return fuse(pair.v_d, pair.v_nd)
    if mode is GateMode.PARTIAL:
        return pair.v_d
    if mode is GateMode.BLOCKED:
        return None
    raise ConfigError(f"unknown gate mode {mode!r}")


@dataclass
class VpmConfig:
    L: int = 2000
    channels: tuple[int, int] = (16, 32)
    kernel: int = 17
    pool: int = 8
    dropout: float = 0.2
    threshold: float = 0.4

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.L // self.pool // self.pool < 1:
            raise ConfigError(f"L={self.L} too short for two pools of {self.pool}")

    def flat_width(self) -> int:
        return self.channels[1] * (self.L // self.pool // self.pool)


@dataclass(frozen=True)
class Decision:
    score: float
    label: int


class Tier(Module):
    """conv -> batchnorm -> relu -> dropout -> average pool."""

    def __init__(self, c_in, c_out, kernel, pool, dropout_rate, name, rng, drop_rng):
        self.conv = Conv1d(c_in, c_out, kernel, f"{name}.conv", rng, padding=kernel // 2)
        self.bn = BatchNorm(c_out, f"{name}.bn")
        self.act = ReLU()
        self.drop = Dropout(dropout_rate, drop_rng)
        self.pool = pool
        self._L = None

    def forward(self, x):
        h = self.drop.forward(self.act.forward(self.bn.forward(self.conv.forward(x))))
        self._L = h.shape[2]
        return avgpool_forward(h, self.pool)

    def backward(self, dy):
        d = avgpool_backward(dy, self._L, self.pool)
        return self.conv.backward(self.bn.backward(self.act.backward(self.drop.backward(d))))


class Vpm(Module):
    def __init__(self, cfg: VpmConfig = None, seed: int = 0):
        self.cfg = cfg = cfg or VpmConfig()
        rng = np.random.default_rng([seed, 0x0F11])
        self.drop_rng = np.random.default_rng([seed, 0xD40F])
        c1, c2 = cfg.channels
        self.tier1 = Tier(1, c1, cfg.kernel, cfg.pool, cfg.dropout, "vpm.tier1", rng, self.drop_rng)
        self.tier2 = Tier(c1, c2, cfg.kernel, cfg.pool, cfg.dropout, "vpm.tier2", rng, self.drop_rng)
        self.head = Linear(cfg.flat_width(), 2, "vpm.head", rng)
        self._shape = None

    def forward(self, x):
        """Logits [N, 2] for clips [N, L]."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.L:
            raise DimensionError(f"classifier expects [N, {self.cfg.L}], got {x.shape}")
        h = self.tier2.forward(self.tier1.forward(x[:, None, :]))
        self._shape = h.shape
        return self.head.forward(h.reshape(h.shape[0], -1))

    def backward(self, dlogits):
        d = self.head.backward(dlogits).reshape(self._shape)
        return self.tier1.backward(self.tier2.backward(d))[:, 0, :]

    def scores(self, X, batch: int = 256) -> np.ndarray:
        """Eval-mode depressed-class probabilities."""
        was = self.training
        self.eval()
        out = [softmax(self.forward(np.asarray(X[i:i + batch], dtype=np.float32)))[:, 1]
               for i in range(0, len(X), batch)]
        self.train(was)
        return np.concatenate(out) if out else np.empty(0)


def classify(model: Vpm, x, mode="eval"):
    model.train(mode == "train")
    return model.forward(x)


def decide(logits, threshold: float = 0.4) -> list[Decision]:
    if not 0 < threshold < 1:
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
    s = softmax(np.atleast_2d(logits))[:, 1]
    return [Decision(float(v), int(v > threshold)) for v in s]


def scores_to_labels(scores, threshold: float = 0.4) -> np.ndarray:
    return (np.asarray(scores) > threshold).astype(np.int64)


def write_decisions(path, clip_ids, decisions: list[Decision]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["clip_id", "score", "label"])
        for cid, d in zip(clip_ids, decisions):
            w.writerow([cid, repr(d.score), d.label])
