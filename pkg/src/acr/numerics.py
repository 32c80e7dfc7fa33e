"""Numeric kernel: stable softmax, soft-label cross-entropy, Adam, seeded streams.

Everything runs in float64 on dense numpy arrays.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from acr.errors import InvalidInput, ShapeMismatch


def _as_finite(v, name: str = "input") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInput(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def softmax(v, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max-subtraction.

    Accepts a vector or a matrix of row vectors.
    """
    z = _as_finite(v, "logits")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def logsumexp(v, axis: int = -1) -> np.ndarray | float:
    z = _as_finite(v, "logits")
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    out = np.squeeze(out, axis=axis)
    return float(out) if out.ndim == 0 else out


def cross_entropy_soft(probs, target) -> float:
    """Return ``-sum(target * log(probs))`` for a single pair of distributions."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatch(f"probs {p.shape} vs target {t.shape}")
    if p.size == 0:
        raise InvalidInput("empty distribution")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise InvalidInput("probs must be strictly positive and finite")
    if np.any(t < 0) or abs(t.sum() - 1.0) > 1e-9:
        raise InvalidInput("target must be a probability vector")
    return float(-np.sum(t * np.log(p)))


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax, used by the losses to avoid log(0)."""
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p, dtype=np.float64)
            state.v[name] = np.zeros_like(p, dtype=np.float64)
        return state

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            t=self.t,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays and a new state;
    the inputs are not modified."""
    new_params = {k: np.array(p, dtype=np.float64) for k, p in params.items()}
    new_state = state.copy()
    adam_update_(new_params, grads, new_state)
    return new_params, new_state


def adam_update_(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """In-place variant of :func:`adam_step` used by the training loop."""
    if set(params) != set(grads):
        raise ShapeMismatch("gradient names do not match parameter names")
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != p.shape:
            raise ShapeMismatch(f"{name}: grad {np.shape(g)} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise InvalidInput(f"{name}: non-finite gradient")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# Random streams


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class RandomStream:
    """Seeded Philox stream with labeled forking.

    A child created by ``fork(label)`` depends only on the root seed and the
    chain of labels, never on how many draws the parent has made.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if seed < 0 or seed >= 2**64:
            raise InvalidInput("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, label: str) -> "RandomStream":
        return RandomStream(self.seed, self.path + (_label_key(label),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform_int(self, lo: int, hi: int) -> int:
        return rng_uniform_int(self, lo, hi)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def rng_uniform_int(stream: RandomStream, lo: int, hi: int) -> int:
    """Uniform integer in the closed range [lo, hi]."""
    if lo > hi:
        raise InvalidInput(f"empty range [{lo}, {hi}]")
    return int(stream.generator.integers(lo, hi, endpoint=True))
