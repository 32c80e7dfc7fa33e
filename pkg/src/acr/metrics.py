"""Selective-classification metrics, confidence degradation and entropy diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from acr.errors import DegenerateSplit, InvalidInput, ShapeMismatch

METRIC_KEYS = (
    "aurc_x1000",
    "auroc",
    "fpr95",
    "acc",
    "degradation_rate_correct",
    "degradation_rate_incorrect",
)


def _scores_correct(scores, correct):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    c = np.asarray(correct, dtype=bool).reshape(-1)
    if s.size == 0:
        raise InvalidInput("no samples")
    if s.shape != c.shape:
        raise ShapeMismatch(f"{s.size} scores vs {c.size} correctness flags")
    if not np.all(np.isfinite(s)):
        raise InvalidInput("non-finite scores")
    return s, c


def fold_ood(correct, ood_flag=None) -> np.ndarray:
    """OOD samples count as failures, whatever their predicted label."""
    c = np.asarray(correct, dtype=bool).copy()
    if ood_flag is not None:
        c &= ~np.asarray(ood_flag, dtype=bool)
    return c


@dataclass
class RiskCoverageCurve:
    coverage: np.ndarray
    risk: np.ndarray

    def to_csv(self) -> str:
        lines = ["coverage,risk"]
        lines += [f"{c!r},{r!r}" for c, r in zip(self.coverage.tolist(), self.risk.tolist())]
        return "\n".join(lines) + "\n"


def selection_order(scores) -> np.ndarray:
    """Descending score, ties by ascending index."""
    s = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(s.size), -s))


def risk_coverage(scores, correct) -> RiskCoverageCurve:
    s, c = _scores_correct(scores, correct)
    n = s.size
    errors = (~c[selection_order(s)]).astype(np.float64)
    counts = np.arange(1, n + 1, dtype=np.float64)
    return RiskCoverageCurve(coverage=counts / n, risk=np.cumsum(errors) / counts)


def aurc(scores, correct) -> float:
    """Mean selective risk over all N coverage levels (not scaled)."""
    return float(np.mean(risk_coverage(scores, correct).risk))


def _split(scores, correct):
    s, c = _scores_correct(scores, correct)
    pos, neg = s[c], s[~c]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateSplit(
            f"need both correct and incorrect samples (got {pos.size} / {neg.size})"
        )
    return pos, neg


def auroc(scores, correct) -> float:
    """P(score of a correct sample > score of an incorrect one), ties count 1/2."""
    pos, neg = _split(scores, correct)
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    tied = np.searchsorted(neg_sorted, pos, side="right") - below
    u = float(np.sum(below)) + 0.5 * float(np.sum(tied))
    return u / (pos.size * neg.size)


def fpr_at_95_tpr(scores, correct) -> float:
    """FPR at the largest threshold keeping at least 95% of correct samples."""
    pos, neg = _split(scores, correct)
    n = pos.size
    k = (95 * n + 99) // 100  # smallest count with count / n >= 0.95
    tau = np.sort(pos)[::-1][k - 1]
    return float(np.count_nonzero(neg >= tau)) / neg.size


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ShapeMismatch(f"{p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise InvalidInput("no samples")
    return float(np.mean(p == y))


# --------------------------------------------------------------------------
# Confidence degradation


@dataclass
class DegradationReport:
    rate_correct: Optional[float]
    rate_incorrect: Optional[float]
    degraded: np.ndarray = field(repr=False)

    @property
    def gap(self) -> Optional[float]:
        if self.rate_correct is None or self.rate_incorrect is None:
            return None
        return self.rate_incorrect - self.rate_correct


def degraded_mask(fused_conf, unimodal_confs) -> np.ndarray:
    """Flag samples whose fused confidence is strictly below some unimodal one.

    ``unimodal_confs`` has one row per sample and one column per modality.
    """
    f = np.asarray(fused_conf, dtype=np.float64).reshape(-1)
    u = np.asarray(unimodal_confs, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] != f.size or u.shape[1] < 1:
        raise ShapeMismatch(f"fused {f.shape} vs unimodal {u.shape}")
    return np.any(f[:, None] < u, axis=1)


def degradation_rate(fused_conf, unimodal_confs, correct) -> DegradationReport:
    deg = degraded_mask(fused_conf, unimodal_confs)
    c = np.asarray(correct, dtype=bool).reshape(-1)
    if c.size != deg.size:
        raise ShapeMismatch("correctness length mismatch")
    rc = float(np.mean(deg[c])) if c.any() else None
    ri = float(np.mean(deg[~c])) if (~c).any() else None
    return DegradationReport(rate_correct=rc, rate_incorrect=ri, degraded=deg)


# --------------------------------------------------------------------------
# Metric bundle


def _maybe(fn, *args):
    try:
        return fn(*args)
    except DegenerateSplit:
        return None


def compute_metrics(
    scores,
    predictions,
    labels,
    ood_flag=None,
    fused_conf=None,
    unimodal_confs=None,
) -> dict:
    """All exported metrics in one dict keyed by ``METRIC_KEYS``.

    Rank metrics that are undefined for a one-sided split come back as None.
    Accuracy is measured on in-distribution rows only.
    """
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    correct = fold_ood(p == y, ood_flag)
    ind = np.ones_like(correct) if ood_flag is None else ~np.asarray(ood_flag, dtype=bool)
    out = {
        "aurc_x1000": 1000.0 * aurc(scores, correct),
        "auroc": _maybe(auroc, scores, correct),
        "fpr95": _maybe(fpr_at_95_tpr, scores, correct),
        "acc": accuracy(p[ind], y[ind]) if ind.any() else None,
        "degradation_rate_correct": None,
        "degradation_rate_incorrect": None,
    }
    if fused_conf is not None and unimodal_confs is not None:
        rep = degradation_rate(fused_conf, unimodal_confs, correct)
        out["degradation_rate_correct"] = rep.rate_correct
        out["degradation_rate_incorrect"] = rep.rate_incorrect
    return out


# --------------------------------------------------------------------------
# Discrete information-theoretic diagnostics


def _check_joint(joint) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 3:
        raise InvalidInput("joint must be a 3-d table over (X1, X2, Y)")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInput("joint has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-12:
        raise InvalidInput(f"joint sums to {p.sum()!r}, not 1")
    return p


def _xlogx_ratio(pxy: np.ndarray, px: np.ndarray) -> float:
    mask = pxy > 0
    return float(-np.sum(pxy[mask] * np.log(pxy[mask] / np.broadcast_to(px, pxy.shape)[mask])))


def conditional_entropy(joint, condition_on: Iterable[int] = (1, 2)) -> float:
    """H(Y | X_S) in nats for S a subset of {1, 2}."""
    p = _check_joint(joint)
    cond = set(condition_on)
    if not cond <= {1, 2}:
        raise InvalidInput(f"can only condition on X1 and X2, got {sorted(cond)}")
    drop = tuple(ax for ax, k in ((0, 1), (1, 2)) if k not in cond)
    pxy = p.sum(axis=drop, keepdims=True) if drop else p
    px = pxy.sum(axis=2, keepdims=True)
    return _xlogx_ratio(pxy, px)


@dataclass
class TheoryDiagnostic:
    h_y_x1: float
    h_y_x2: float
    h_y_x12: float
    bayes_error: float
    fano_bound: float
    dpi_ok: bool
    fano_ok: bool
    joint: Optional[list] = None

    @property
    def ok(self) -> bool:
        return self.dpi_ok and self.fano_ok


def dpi_and_fano_check(joint, tol: float = 1e-12) -> TheoryDiagnostic:
    """Check that extra modalities never raise H(Y|X) and that the Bayes error
    respects Fano's lower bound. A violation keeps the joint for inspection."""
    p = _check_joint(joint)
    ny = p.shape[2]
    if ny < 2:
        raise InvalidInput("need |Y| >= 2")
    h1 = conditional_entropy(p, (1,))
    h2 = conditional_entropy(p, (2,))
    h12 = conditional_entropy(p, (1, 2))
    bayes_error = 1.0 - float(np.sum(np.max(p, axis=2)))
    bound = (h12 / math.log(2) - 1.0) / math.log2(ny)
    dpi_ok = h12 <= h1 + tol and h12 <= h2 + tol
    fano_ok = bayes_error >= bound - tol
    return TheoryDiagnostic(
        h_y_x1=h1,
        h_y_x2=h2,
        h_y_x12=h12,
        bayes_error=bayes_error,
        fano_bound=bound,
        dpi_ok=dpi_ok,
        fano_ok=fano_ok,
        joint=None if (dpi_ok and fano_ok) else p.tolist(),
    )


def random_joint(rng: np.random.Generator, max_alphabet: int = 4, min_y: int = 2) -> np.ndarray:
    """Random joint table with alphabet sizes in [1, max_alphabet] (|Y| >= min_y)."""
    a = int(rng.integers(1, max_alphabet, endpoint=True))
    b = int(rng.integers(1, max_alphabet, endpoint=True))
    c = int(rng.integers(min_y, max_alphabet, endpoint=True))
    w = rng.exponential(size=(a, b, c))
    # sprinkle exact zeros so deterministic relationships get exercised too
    w[rng.random(size=w.shape) < 0.2] = 0.0
    if w.sum() == 0:
        w.flat[0] = 1.0
    return w / w.sum()
