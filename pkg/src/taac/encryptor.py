"""Key-conditioned deterministic noise diffusion.

The noise pattern is input-agnostic: ``encrypt(x) = x + A(T) * phi(key)``
where ``A(T)`` is the total weight of the annealed schedule and ``phi`` a
per-element pattern derived from a scalar key hash. Decryption subtracts the
identical expression, so the round trip costs one rounding per element.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

TWO_PI = 2.0 * math.pi
DIGIT_LIMIT = 2 ** 31


@dataclass(frozen=True)
class SecretKey:
    digits: tuple[int, ...]

    def __post_init__(self):
        if len(self.digits) < 1:
            raise ConfigError("secret key needs at least one digit")
        for d in self.digits:
            if not isinstance(d, (int, np.integer)) or not 0 <= int(d) < DIGIT_LIMIT:
                raise ConfigError(f"key digit {d!r} outside [0, 2^31)")
        object.__setattr__(self, "digits", tuple(int(d) for d in self.digits))

    @classmethod
    def parse(cls, text: str) -> "SecretKey":
        text = text.strip()
        if not text:
            raise ConfigError("empty key")
        try:
            return cls(tuple(int(t) for t in text.split(",")))
        except ValueError as e:
            raise FormatError(f"key must be comma-separated decimal integers: {e}") from e

    @classmethod
    def random(cls, rng: np.random.Generator, m: int = 8) -> "SecretKey":
        return cls(tuple(int(d) for d in rng.integers(0, DIGIT_LIMIT, size=m)))

    def serialize(self) -> str:
        return ",".join(str(d) for d in self.digits)

    def fingerprint(self) -> int:
        """Γ mod 2^32, safe to store next to ciphertext."""
        return key_hash_int(self) % (2 ** 32)


@dataclass(frozen=True)
class NoisePattern:
    gamma: float
    phi: np.ndarray


def _digits(k) -> tuple[int, ...]:
    if isinstance(k, SecretKey):
        return k.digits
    return SecretKey(tuple(k)).digits


def key_hash_int(k) -> int:
    return sum(d * j for j, d in enumerate(_digits(k), start=1))


def key_hash(k) -> float:
    """Γ = Σ_j k_j·j with 1-based j, exact in integers then converted."""
    return float(key_hash_int(k))


def base_noise(gamma: float, L: int) -> NoisePattern:
    """phi_i = sin(θ_i)·cos(θ_i) = 0.5·sin(2θ_i), θ_i = fmod(Γ·(i+1), 2π)."""
    if L < 1:
        raise ConfigError(f"pattern length must be >= 1, got {L}")
    theta = np.fmod(float(gamma) * np.arange(1, L + 1, dtype=np.float64), TWO_PI)
    return NoisePattern(float(gamma), 0.5 * np.sin(2.0 * theta))


def schedule_sum(T: int) -> float:
    """A(T) = Σ_{t=1..T} (1 − t/T), accumulated term by term."""
    if T < 1:
        raise ConfigError(f"strength T must be >= 1, got {T}")
    total = 0.0
    for t in range(1, T + 1):
        total += 1.0 - t / T
    return total


def schedule_closed_form(T: int) -> float:
    if T < 1:
        raise ConfigError(f"strength T must be >= 1, got {T}")
    return (T - 1) / 2.0


def noise_term(k, T: int, L: int) -> np.ndarray:
    """The additive term A(T)·phi, shared verbatim by encrypt and decrypt."""
    return schedule_sum(T) * base_noise(key_hash(k), L).phi


def encrypt(x, k, T: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + noise_term(k, T, x.shape[-1])


def decrypt(xt, k, T: int) -> np.ndarray:
    xt = np.asarray(xt, dtype=np.float64)
    return xt - noise_term(k, T, xt.shape[-1])


def encrypt_loop(x, k, T: int) -> np.ndarray:
    """Literal iterative form, one scheduled addition per step."""
    if T < 1:
        raise ConfigError(f"strength T must be >= 1, got {T}")
    x = np.array(x, dtype=np.float64)
    phi = np.sin(np.fmod(key_hash(k) * np.arange(1, x.shape[-1] + 1, dtype=np.float64), TWO_PI))
    phi = phi * np.cos(np.fmod(key_hash(k) * np.arange(1, x.shape[-1] + 1, dtype=np.float64), TWO_PI))
    for t in range(1, T + 1):
        x = x + (1.0 - t / T) * phi
    return x


def read_key(path) -> SecretKey:
    try:
        return SecretKey.parse(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read key file {path}: {e}") from e


def write_key(path, key: SecretKey):
    Path(path).write_text(key.serialize() + "\n")


def write_sidecar(path, key: SecretKey, T: int, extra: dict | None = None):
    meta = {"strength": int(T), "key_fingerprint": key.fingerprint()}
    meta.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
