"""Dense layers with hand-derived gradients, an AdamW optimizer and checkpoints.

Every differentiable op comes as a ``*_forward`` / ``*_backward`` pair of pure
functions. The layer classes wrap them, hold :class:`Param` objects and cache
what the backward pass needs. Training runs in float32; the gradient checker
works in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, FormatError, NumericError

DTYPE = np.float32


@dataclass
class Param:
    """A named tensor with its gradient.

    ``grad_stack`` optionally holds per-example gradients with a leading batch
    axis; when present ``grad`` is its sum over that axis.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True
    is_buffer: bool = False
    grad_stack: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)
        self.grad_stack = None


# ---------------------------------------------------------------------------
# functional ops


def fc_forward(x, W, b):
    """``y = x Wᵀ + b`` for ``x`` of shape [N, in]."""
    x = np.asarray(x)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"fc: expected x[N,in], W[out,in], b[out]; got x{x.shape}, W{W.shape}, b{b.shape}")
    if x.shape[1] != W.shape[1]:
        raise DimensionError(f"fc: x has {x.shape[1]} features but W expects {W.shape[1]}")
    if b.shape[0] != W.shape[0]:
        raise DimensionError(f"fc: b has {b.shape[0]} entries but W has {W.shape[0]} rows")
    return x @ W.T + b


def fc_backward(dy, x, W, n_examples=None):
    """Gradients of the fc map.

    Returns ``(dx, dW, db)``. With ``n_examples`` the rows of ``x`` are read as
    ``n_examples`` equal consecutive groups and per-example gradient stacks are
    returned instead, shaped [n_examples, out, in] and [n_examples, out].
    """
    dx = dy @ W
    if n_examples is None:
        return dx, dy.T @ x, dy.sum(axis=0)
    rows = x.shape[0]
    if rows % n_examples:
        raise DimensionError(f"fc: {rows} rows cannot be split into {n_examples} examples")
    r = rows // n_examples
    dy3 = dy.reshape(n_examples, r, -1)
    x3 = x.reshape(n_examples, r, -1)
    return dx, np.matmul(dy3.transpose(0, 2, 1), x3), dy3.sum(axis=1)


def conv_out_len(L, K, stride, padding):
    return (L + 2 * padding - K) // stride + 1


def _conv_cols(x, K, stride, padding):
    # [N, C, L] -> columns [N, L_out, C*K]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
    N, C, Lo, _ = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(N, Lo, C * K)


def conv1d_forward(x, w, b=None, stride=1, padding=0):
    """1-D cross-correlation of ``x`` [N, C_in, L] with ``w`` [C_out, C_in, K]."""
    x = np.asarray(x)
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d: expected x[N,C,L] and w[Co,Ci,K]; got x{x.shape}, w{w.shape}")
    N, C, L = x.shape
    Co, Ci, K = w.shape
    if C != Ci:
        raise DimensionError(f"conv1d: x has {C} channels but kernels expect {Ci}")
    if stride < 1 or padding < 0 or L + 2 * padding < K:
        raise DimensionError(f"conv1d: invalid geometry L={L}, K={K}, stride={stride}, padding={padding}")
    cols = _conv_cols(x, K, stride, padding)
    y = cols @ w.reshape(Co, Ci * K).T
    if b is not None:
        y = y + b
    return np.ascontiguousarray(y.transpose(0, 2, 1)), cols


def conv1d_backward(dy, cols, x_shape, w, stride=1, padding=0):
    """Returns ``(dx, dw, db)`` given the columns cached by the forward pass."""
    N, C, L = x_shape
    Co, Ci, K = w.shape
    Lo = dy.shape[2]
    dyt = dy.transpose(0, 2, 1).reshape(N * Lo, Co)
    dw = (dyt.T @ cols.reshape(N * Lo, Ci * K)).reshape(Co, Ci, K)
    db = dy.sum(axis=(0, 2))
    dcols = (dyt @ w.reshape(Co, Ci * K)).reshape(N, Lo, Ci, K)
    dxp = np.zeros((N, C, L + 2 * padding), dtype=dy.dtype)
    span = stride * (Lo - 1) + 1
    for k in range(K):
        dxp[:, :, k:k + span:stride] += dcols[:, :, :, k].transpose(0, 2, 1)
    dx = dxp[:, :, padding:padding + L] if padding else dxp
    return dx, dw, db


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 3:
        return (0, 2), (1, -1, 1)
    raise DimensionError(f"batchnorm: expected [N,C] or [N,C,L], got {x.shape}")


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None,
                      momentum=0.1, eps=1e-5):
    """Batch normalization over every axis except channels (axis 1).

    In train mode the running statistics, when given, are updated in place
    (the running variance uses the unbiased estimate). Returns ``(y, cache)``.
    """
    axes, shape = _bn_axes(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateInputError("batchnorm: train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            m = x.size // x.shape[1]
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    elif mode == "eval":
        mean, var = running_mean, running_var
    else:
        raise ConfigError(f"batchnorm: unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return y, (xhat, inv, mode)


def batchnorm_backward(dy, cache, gamma):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv, mode = cache
    axes, shape = _bn_axes(dy)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if mode == "eval":
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = dy.size // dy.shape[1]
    s1 = dxhat.sum(axis=axes).reshape(shape)
    s2 = (dxhat * xhat).sum(axis=axes).reshape(shape)
    dx = inv.reshape(shape) / m * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x, None
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def avgpool_forward(x, pool):
    """Non-overlapping average pooling on the last axis; a short tail is dropped."""
    N, C, L = x.shape
    Lo = L // pool
    if Lo < 1:
        raise DimensionError(f"avgpool: length {L} shorter than pool {pool}")
    return x[:, :, :Lo * pool].reshape(N, C, Lo, pool).mean(axis=3)


def avgpool_backward(dy, L, pool):
    N, C, Lo = dy.shape
    dx = np.zeros((N, C, L), dtype=dy.dtype)
    dx[:, :, :Lo * pool] = np.repeat(dy / dy.dtype.type(pool), pool, axis=2)
    return dx


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(np.asarray(z, dtype=np.float64)))


def cross_entropy(logits, labels, smoothing=0.1, reduction="mean"):
    """Label-smoothed cross-entropy and its gradient w.r.t. the logits.

    Targets are ``(1 - smoothing) * onehot + smoothing / K``. ``reduction`` is
    ``"mean"`` or ``"sum"`` over the batch.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if not np.all(np.isfinite(logits)):
        raise NumericError("cross_entropy: non-finite logits")
    N, K = logits.shape
    if labels.shape != (N,) or (N and (labels.min() < 0 or labels.max() >= K)):
        raise DimensionError(f"cross_entropy: labels must be {N} integers in [0, {K})")
    q = np.full((N, K), smoothing / K, dtype=logits.dtype)
    q[np.arange(N), labels] += 1 - smoothing
    ls = log_softmax(logits)
    per = -(q * ls).sum(axis=1)
    grad = np.exp(ls) - q
    if reduction == "mean":
        return per.mean(), grad / logits.dtype.type(N)
    if reduction == "sum":
        return per.sum(), grad
    raise ConfigError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# layers


class Module:
    """Owns parameters and sub-modules; ``training`` toggles train/eval behaviour."""

    training = True

    def children(self) -> Iterator["Module"]:
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (m for m in v if isinstance(m, Module))

    def own_params(self) -> list[Param]:
        return [v for v in vars(self).values() if isinstance(v, Param)]

    def params(self) -> list[Param]:
        out = list(self.own_params())
        for c in self.children():
            out.extend(c.params())
        return out

    def train(self, flag=True):
        self.training = flag
        for c in self.children():
            c.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def set_trainable(self, flag):
        for p in self.params():
            if not p.is_buffer:
                p.trainable = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state_dict(self, state):
        ps = {p.name: p for p in self.params()}
        missing = set(ps) - set(state)
        if missing:
            raise FormatError(f"state is missing parameters: {sorted(missing)[:5]}")
        for name, p in ps.items():
            v = np.asarray(state[name])
            if v.shape != p.value.shape:
                raise DimensionError(f"{name}: stored shape {v.shape} != {p.value.shape}")
            p.value = v.astype(p.value.dtype, copy=True)

    def astype(self, dtype):
        for p in self.params():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
        return self


def _init_weight(rng, shape, fan_in, init, dtype):
    if init == "uniform":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype)
    if init == "lecun":
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    if init == "he":
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    raise ConfigError(f"unknown init {init!r}")


class Linear(Module):
    """Fully-connected layer. ``init="uniform"`` draws U(±1/√fan_in) for weights
    and biases; ``init="lecun"`` and ``init="he"`` draw N(0, 1/fan_in) and N(0, 2/fan_in)
    weights with zero biases."""

    def __init__(self, n_in, n_out, name, rng, init="uniform", dtype=DTYPE):
        self.W = Param(f"{name}.W", _init_weight(rng, (n_out, n_in), n_in, init, dtype))
        if init == "uniform":
            b = _init_weight(rng, (n_out,), n_in, init, dtype)
        else:
            b = np.zeros(n_out, dtype=dtype)
        self.b = Param(f"{name}.b", b)
        self._x = None

    def forward(self, x):
        self._x = x
        return fc_forward(x, self.W.value, self.b.value)

    def backward(self, dy, n_examples=None):
        dx, dW, db = fc_backward(dy, self._x, self.W.value, n_examples)
        if n_examples is None:
            self.W.grad += dW
            self.b.grad += db
        else:
            _accumulate_stack(self.W, dW)
            _accumulate_stack(self.b, db)
        return dx


def _accumulate_stack(p, stack):
    p.grad_stack = stack if p.grad_stack is None else p.grad_stack + stack
    p.grad = p.grad_stack.sum(axis=0)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, name, rng, stride=1, padding=0, dtype=DTYPE):
        fan_in = c_in * kernel
        self.W = Param(f"{name}.W", _init_weight(rng, (c_out, c_in, kernel), fan_in, "uniform", dtype))
        self.b = Param(f"{name}.b", _init_weight(rng, (c_out,), fan_in, "uniform", dtype))
        self.stride, self.padding = stride, padding
        self._cache = None

    def forward(self, x):
        y, cols = conv1d_forward(x, self.W.value, self.b.value, self.stride, self.padding)
        self._cache = (cols, x.shape)
        return y

    def backward(self, dy):
        cols, shape = self._cache
        dx, dw, db = conv1d_backward(dy, cols, shape, self.W.value, self.stride, self.padding)
        self.W.grad += dw
        self.b.grad += db
        return dx


class BatchNorm(Module):
    def __init__(self, channels, name, momentum=0.1, eps=1e-5, dtype=DTYPE):
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Param(f"{name}.running_mean", np.zeros(channels, dtype=dtype),
                                  trainable=False, is_buffer=True)
        self.running_var = Param(f"{name}.running_var", np.ones(channels, dtype=dtype),
                                 trainable=False, is_buffer=True)
        self.momentum, self.eps = momentum, eps
        self._cache = None

    def forward(self, x):
        mode = "train" if self.training else "eval"
        y, self._cache = batchnorm_forward(x, self.gamma.value, self.beta.value, mode,
                                           self.running_mean.value, self.running_var.value,
                                           self.momentum, self.eps)
        return y

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(dy, self._cache, self.gamma.value)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class Dropout(Module):
    def __init__(self, rate, rng):
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate, self.rng = rate, rng
        self._mask = None

    def forward(self, x):
        y, self._mask = dropout(x, self.rate, "train" if self.training else "eval", self.rng)
        return y

    def backward(self, dy):
        return dropout_backward(dy, self._mask)


class ReLU(Module):
    def forward(self, x):
        self._x = x
        return relu_forward(x)

    def backward(self, dy):
        return relu_backward(dy, self._x)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay.

    Params with ``trainable=False`` (and buffers) are skipped entirely.
    """

    params: list[Param]
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = [p for p in self.params if not p.is_buffer]
        for p in self.params:
            self.m.setdefault(p.name, np.zeros_like(p.value))
            self.v.setdefault(p.name, np.zeros_like(p.value))

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1 - b1 ** self.step_count
        bc2 = 1 - b2 ** self.step_count
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            p.value *= 1 - self.lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            denom = np.sqrt(v) / np.sqrt(bc2) + self.eps
            p.value -= (self.lr / bc1) * m / denom


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(fn: Callable[[np.ndarray], float], x, analytic, h=1e-5, zero_atol=0.0):
    """Max relative error between ``analytic`` and central differences of ``fn``.

    The per-coordinate error is ``|a - n| / max(1e-8, |a| + |n|)``. A coordinate
    where ``|a| + |n| <= zero_atol`` counts as agreeing on a zero gradient.
    ``x`` is perturbed in a float64 copy.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(f"gradient_check: analytic {analytic.shape} vs point {x.shape}")
    flat = x.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        if abs(a) + abs(num) <= zero_atol:
            continue
        worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TAAC"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None):
    """Write ``state`` as a binary tensor table plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path.write_bytes(b"".join(parts))
    sidecar = dict(meta or {})
    sidecar.setdefault("format_version", FORMAT_VERSION)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=str))


def load_checkpoint(path):
    """Returns ``(state, meta)``; ``meta`` is empty when the sidecar is absent."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    off = 10
    state = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode()
            off += n
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + size > len(buf):
                raise FormatError(f"{path}: truncated payload for {name}")
            state[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).copy()
            off += size
    except (struct.error, KeyError) as e:
        raise FormatError(f"{path}: corrupt tensor table ({e})") from e
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return state, meta
