"""Confidence scores. Higher always means "more likely correct".

Each scorer accepts a single vector or a matrix with one sample per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acr.errors import InvalidInput
from acr.numerics import logsumexp, softmax

SCORER_NAMES = ("msp", "maxlogit", "energy", "entropy", "doctor_a", "doctor_b", "gen")


def _probs(p) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise InvalidInput("empty probability vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1 + 1e-12):
        raise InvalidInput("probabilities must lie in [0, 1]")
    # sub-stochastic rows are allowed: restricted fused outputs drop the outlier class
    if np.any(arr.sum(axis=-1) > 1 + 1e-9):
        raise InvalidInput("probabilities sum to more than 1")
    return arr


def _logits(z) -> np.ndarray:
    arr = np.asarray(z, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise InvalidInput("empty logit vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput("non-finite logits")
    return arr


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def score_msp(probs):
    return _out(np.max(_probs(probs), axis=-1))


def score_maxlogit(logits):
    return _out(np.max(_logits(logits), axis=-1))


def score_energy(logits, T: float = 1.0):
    """Negative free energy ``T * logsumexp(logits / T)``."""
    if not T > 0:
        raise InvalidInput("temperature must be positive")
    return _out(T * np.asarray(logsumexp(_logits(logits) / T)))


def score_entropy(probs):
    """Negated Shannon entropy in nats, with 0 log 0 = 0."""
    p = _probs(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return _out(np.sum(terms, axis=-1))


def score_doctor(probs, variant: str = "alpha"):
    p = _probs(probs)
    if variant in ("alpha", "a"):
        g = np.sum(p * p, axis=-1)
        return _out(-(1.0 - g) / g)
    if variant in ("beta", "b"):
        pe = 1.0 - np.max(p, axis=-1)
        denom = 1.0 - pe
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(pe <= 0, 0.0, -pe / np.where(denom > 0, denom, 1.0))
        return _out(s)
    raise InvalidInput(f"unknown DOCTOR variant {variant!r}")


def score_gen(probs, gamma: float = 0.1, top_m: int | None = None):
    p = _probs(probs)
    C = p.shape[-1]
    if top_m is None:
        top_m = min(C, 100)
    if not 0 < gamma < 1:
        raise InvalidInput("gamma must lie in (0, 1)")
    if not 1 <= top_m <= C:
        raise InvalidInput(f"top_m must lie in [1, {C}]")
    top = -np.sort(-p, axis=-1)[..., :top_m]
    # clip guards tiny negative 1-p from rounding when p == 1
    return _out(-np.sum(top**gamma * np.clip(1.0 - top, 0.0, None) ** gamma, axis=-1))


def decide(score: float, tau: float) -> str:
    return "correct" if score >= tau else "misclassified"


@dataclass(frozen=True)
class ScorerSpec:
    kind: str = "msp"
    temperature: float = 1.0
    gamma: float = 0.1
    top_m: int | None = None

    def __post_init__(self):
        if self.kind not in SCORER_NAMES:
            raise InvalidInput(
                f"unknown scorer {self.kind!r}; expected one of {', '.join(SCORER_NAMES)}"
            )
        if not self.temperature > 0:
            raise InvalidInput("temperature must be positive")
        if not 0 < self.gamma < 1:
            raise InvalidInput("gamma must lie in (0, 1)")


def restricted_probs(logits, num_classes: int, renormalize: bool = False) -> np.ndarray:
    """Probabilities over the first ``num_classes`` entries of fused logits.

    By default the softmax runs over every output (outlier class included) and
    the tail is dropped without renormalizing.
    """
    z = _logits(logits)
    if renormalize:
        return softmax(z[..., :num_classes])
    return softmax(z)[..., :num_classes]


def score_logits(
    logits, spec: ScorerSpec, num_classes: int | None = None, renormalize: bool = False
) -> np.ndarray:
    """Apply ``spec`` to fused logit rows; outputs past ``num_classes`` are ignored."""
    z = np.atleast_2d(_logits(logits))
    C = z.shape[-1] if num_classes is None else num_classes
    kind = spec.kind
    if kind == "maxlogit":
        return np.asarray(score_maxlogit(z[:, :C])).reshape(-1)
    if kind == "energy":
        return np.asarray(score_energy(z[:, :C], spec.temperature)).reshape(-1)
    p = restricted_probs(z, C, renormalize)
    if kind == "msp":
        s = score_msp(p)
    elif kind == "entropy":
        s = score_entropy(p)
    elif kind == "doctor_a":
        s = score_doctor(p, "alpha")
    elif kind == "doctor_b":
        s = score_doctor(p, "beta")
    else:
        top_m = spec.top_m if spec.top_m is not None else min(C, 100)
        s = score_gen(p, spec.gamma, top_m)
    return np.asarray(s).reshape(-1)
