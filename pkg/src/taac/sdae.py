"""Dual-decoder autoencoder that splits a clip into two signal-space parts.

A clip of length ``L`` is cut into ``segments`` equal frames. The encoder and
both decoders are stacks of fully-connected layers shared across frames, so
the widths in :class:`SdaeConfig` are totals over all frames. The two decoder
outputs are ``v_d`` (condition-related) and ``v_nd`` (everything else); their
sum approximates the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn_core import Dropout, Linear, Module, ReLU


@dataclass
class SdaeConfig:
    L: int = 2000
    h1: int = 1024
    h2: int = 512
    latent: int = 256
    segments: int = 8
    resblocks: int = 1
    dropout: float = 0.2
    init: str = "lecun"

    def __post_init__(self):
        for name in ("L", "h1", "h2", "latent"):
            v = getattr(self, name)
            if v < 1 or v % self.segments:
                raise ConfigError(f"{name}={v} must be a positive multiple of segments={self.segments}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def per_segment(self) -> tuple[int, int, int, int]:
        s = self.segments
        return self.L // s, self.h1 // s, self.h2 // s, self.latent // s


@dataclass
class FeaturePair:
    v_d: np.ndarray
    v_nd: np.ndarray

    def residual(self, x):
        return np.asarray(x) - self.v_d - self.v_nd


class ResBlock(Module):
    """``x + FC_b(dropout(relu(FC_a(x))))``."""

    def __init__(self, width, name, rng, dropout_rate, drop_rng, init):
        self.a = Linear(width, width, f"{name}.a", rng, init)
        self.act = ReLU()
        self.drop = Dropout(dropout_rate, drop_rng)
        self.b = Linear(width, width, f"{name}.b", rng, init)

    def forward(self, x):
        return x + self.b.forward(self.drop.forward(self.act.forward(self.a.forward(x))))

    def backward(self, dy, n_examples=None):
        d = self.b.backward(dy, n_examples)
        d = self.act.backward(self.drop.backward(d))
        return dy + self.a.backward(d, n_examples)


class Stack(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy, n_examples=None):
        for layer in reversed(self.layers):
            dy = layer.backward(dy, n_examples)
        return dy


def _stack(widths, name, rng, resblocks, dropout_rate, drop_rng, init):
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Linear(a, b, f"{name}.fc{i}", rng, init))
        if i < len(widths) - 2:
            layers += [ResBlock(b, f"{name}.res{i}_{r}", rng, dropout_rate, drop_rng, init)
                       for r in range(resblocks)]
    return Stack(layers)


class Sdae(Module):
    def __init__(self, cfg: SdaeConfig = None, seed: int = 0):
        self.cfg = cfg = cfg or SdaeConfig()
        seg, h1, h2, z = cfg.per_segment()
        rng = np.random.default_rng([seed, 0x5DAE])
        self.drop_rng = np.random.default_rng([seed, 0xD409])
        self.encoder = _stack([seg, h1, h2, z], "encoder", rng, cfg.resblocks, cfg.dropout,
                              self.drop_rng, cfg.init)
        self.decoder_d = _stack([z, h2, h1, seg], "decoder_d", rng, cfg.resblocks, 0.0, None, cfg.init)
        self.decoder_nd = _stack([z, h2, h1, seg], "decoder_nd", rng, cfg.resblocks, 0.0, None, cfg.init)
        self._n = None

    def _rows(self, x):
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.L:
            raise DimensionError(f"sdae expects [N, {self.cfg.L}], got {x.shape}")
        return x.reshape(-1, self.cfg.L // self.cfg.segments)

    def encode(self, x):
        """Latent code [N, latent]."""
        n = np.asarray(x).shape[0]
        self._n = n
        return self.encoder.forward(self._rows(x)).reshape(n, self.cfg.latent)

    def decode_pair(self, z) -> FeaturePair:
        z = np.asarray(z)
        if z.ndim != 2 or z.shape[1] != self.cfg.latent:
            raise DimensionError(f"latent must be [N, {self.cfg.latent}], got {z.shape}")
        n = z.shape[0]
        rows = z.reshape(-1, self.cfg.latent // self.cfg.segments)
        v_d = self.decoder_d.forward(rows).reshape(n, self.cfg.L)
        v_nd = self.decoder_nd.forward(rows).reshape(n, self.cfg.L)
        return FeaturePair(v_d, v_nd)

    def forward(self, x) -> FeaturePair:
        return self.decode_pair(self.encode(x))

    def backward(self, dv_d, dv_nd, per_example=False):
        """Accumulate parameter gradients; returns d/dx.

        With ``per_example`` every parameter also receives a ``grad_stack``
        of per-clip contributions, and ``grad`` is their sum.
        """
        n = self._n
        k = n if per_example else None
        seg = self.cfg.L // self.cfg.segments
        dz = self.decoder_d.backward(np.asarray(dv_d).reshape(-1, seg), k)
        dz = dz + self.decoder_nd.backward(np.asarray(dv_nd).reshape(-1, seg), k)
        return self.encoder.backward(dz, k).reshape(n, self.cfg.L)

    def features(self, X, batch: int = 256) -> FeaturePair:
        """Eval-mode decomposition of many clips, batched."""
        was = self.training
        self.eval()
        vd, vnd = [], []
        for i in range(0, len(X), batch):
            p = self.forward(np.asarray(X[i:i + batch], dtype=np.float32))
            vd.append(p.v_d)
            vnd.append(p.v_nd)
        self.train(was)
        return FeaturePair(np.concatenate(vd), np.concatenate(vnd))


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"component shapes differ: {a.shape} vs {b.shape}")


def loss_ortho(v_d, v_nd, all_pairs=False, reduction="mean"):
    """Mean absolute inner product of the two components.

    Default pairs sample i with sample i; ``all_pairs`` averages |<v_d_i, v_nd_j>|
    over every (i, j). ``reduction="sum"`` multiplies the value (and its
    gradient) by N. Returns ``(loss, d_v_d, d_v_nd)``.
    """
    v_d, v_nd = np.asarray(v_d), np.asarray(v_nd)
    _check_pair(v_d, v_nd)
    n = v_d.shape[0]
    scale = 1.0 if reduction == "sum" else 1.0 / n
    if all_pairs:
        S = v_d @ v_nd.T
        sg = np.sign(S)
        loss = np.abs(S).sum() / n * scale
        return loss, (sg @ v_nd) * v_d.dtype.type(scale / n), (sg.T @ v_d) * v_d.dtype.type(scale / n)
    s = np.einsum("ij,ij->i", v_d, v_nd)
    sg = np.sign(s)[:, None].astype(v_d.dtype)
    c = v_d.dtype.type(scale)
    return np.abs(s).sum() * scale, sg * v_nd * c, sg * v_d * c


def loss_recon(v_d, v_nd, x, reduction="mean"):
    """Mean over the batch of the per-sample squared L2 residual.

    Returns ``(loss, grad)``; the gradient is the same for both components.
    """
    v_d, v_nd, x = np.asarray(v_d), np.asarray(v_nd), np.asarray(x)
    _check_pair(v_d, v_nd)
    _check_pair(v_d, x)
    r = v_d + v_nd - x
    n = x.shape[0]
    scale = 1.0 if reduction == "sum" else 1.0 / n
    return float((r * r).sum()) * scale, r * r.dtype.type(2 * scale)


def fuse(v_d, v_nd):
    v_d, v_nd = np.asarray(v_d), np.asarray(v_nd)
    _check_pair(v_d, v_nd)
    return v_d + v_nd


def relative_recon_error(pair: FeaturePair, x) -> float:
    """Mean over clips of ‖v_d + v_nd − x‖ / ‖x‖."""
    x = np.asarray(x, dtype=np.float64)
    r = pair.residual(x)
    return float(np.mean(np.linalg.norm(r, axis=1) / np.linalg.norm(x, axis=1)))


def subspace_cross(v_d_rows, v_nd_rows) -> float:
    """Max |entry| of Q_dᵀQ_nd for orthonormal bases of the two row stacks."""
    qd, _ = np.linalg.qr(np.asarray(v_d_rows, dtype=np.float64).T)
    qn, _ = np.linalg.qr(np.asarray(v_nd_rows, dtype=np.float64).T)
    return float(np.abs(qd.T @ qn).max())
