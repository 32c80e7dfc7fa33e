"""Outlier synthesis in embedding space.

Multimodal feature swapping exchanges one contiguous block of ``n_swap``
dimensions between modality embeddings (cyclically when there are more than
two) and labels the result with a mix of the true class and the extra
outlier class, weighted by ``lam = n_swap / n_max``. The ablation perturbations
(noise, drop, non-contiguous mixing) reuse the same ``n_swap`` draw and label.

Every synthesizer is expressed as a :class:`SwapPlan`: a gather index into the
concatenated embedding row plus fill values, so the training code can route
gradients back to the source dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from acr.errors import InvalidConfig, InvalidInput, ShapeMismatch
from acr.numerics import RandomStream, rng_uniform_int

SYNTHESIZERS = ("mfs", "random_noise", "random_drop", "feature_mix")


@dataclass(frozen=True)
class SwapConfig:
    n_min: int = 32
    n_max: int = 256
    per_batch: bool = False  # draw one n_swap per batch instead of per sample

    def validate(self, d_e: int) -> None:
        if not 1 <= self.n_min <= self.n_max:
            raise InvalidConfig(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        if self.n_max > d_e:
            raise InvalidConfig(f"n_max={self.n_max} exceeds embedding width {d_e}")


@dataclass
class SwapPlan:
    """Recipe for one synthesized row over the concatenated embedding.

    ``src[j] >= 0`` copies input position ``src[j]``; ``src[j] == -1`` writes
    ``fill[j]`` instead.
    """

    src: np.ndarray
    fill: np.ndarray
    n_swap: int
    lam: float

    def apply(self, row: np.ndarray) -> np.ndarray:
        out = self.fill.copy()
        take = self.src >= 0
        out[take] = row[self.src[take]]
        return out


def soft_label(lam: float, y_true: int, num_classes: int) -> np.ndarray:
    """Length ``num_classes + 1`` vector: ``1 - lam`` on ``y_true``, ``lam`` on the outlier slot."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidInput(f"lam must lie in [0, 1], got {lam}")
    if not 0 <= y_true < num_classes:
        raise InvalidInput(f"label {y_true} outside [0, {num_classes})")
    out = np.zeros(num_classes + 1)
    out[y_true] = 1.0 - lam
    out[num_classes] += lam
    return out


def _draw_n_swap(cfg: SwapConfig, rng: RandomStream) -> int:
    return rng_uniform_int(rng, cfg.n_min, cfg.n_max)


def _draw_starts(M: int, d_e: int, n_swap: int, rng: RandomStream) -> List[int]:
    return [rng_uniform_int(rng, 0, d_e - n_swap) for _ in range(M)]


def plan_mfs(
    M: int,
    d_e: int,
    cfg: SwapConfig,
    rng: Optional[RandomStream],
    n_swap: Optional[int] = None,
    starts: Optional[Sequence[int]] = None,
) -> SwapPlan:
    """Cyclic block swap: modality k receives the block of modality k-1 (mod M)."""
    if M < 2:
        raise InvalidInput("feature swapping needs at least two modalities")
    cfg.validate(d_e)
    if n_swap is None:
        n_swap = _draw_n_swap(cfg, rng)
    if starts is None:
        starts = _draw_starts(M, d_e, n_swap, rng)
    if len(starts) != M or any(not 0 <= s <= d_e - n_swap for s in starts):
        raise InvalidInput(f"bad start indices {list(starts)} for n_swap={n_swap}")
    src = np.arange(M * d_e)
    for k in range(M):
        j = (k - 1) % M
        dst0 = k * d_e + starts[k]
        src0 = j * d_e + starts[j]
        src[dst0 : dst0 + n_swap] = np.arange(src0, src0 + n_swap)
    return SwapPlan(src=src, fill=np.zeros(M * d_e), n_swap=n_swap, lam=n_swap / cfg.n_max)


def _plan_replace(M, d_e, cfg, rng, n_swap, starts, noise: bool) -> SwapPlan:
    cfg.validate(d_e)
    if n_swap is None:
        n_swap = _draw_n_swap(cfg, rng)
    if starts is None:
        starts = _draw_starts(M, d_e, n_swap, rng)
    src = np.arange(M * d_e)
    fill = np.zeros(M * d_e)
    for k in range(M):
        lo = k * d_e + starts[k]
        src[lo : lo + n_swap] = -1
        if noise:
            fill[lo : lo + n_swap] = rng.normal(n_swap)
    return SwapPlan(src=src, fill=fill, n_swap=n_swap, lam=n_swap / cfg.n_max)


def plan_random_noise(M, d_e, cfg, rng, n_swap=None, starts=None) -> SwapPlan:
    return _plan_replace(M, d_e, cfg, rng, n_swap, starts, noise=True)


def plan_random_drop(M, d_e, cfg, rng, n_swap=None, starts=None) -> SwapPlan:
    return _plan_replace(M, d_e, cfg, rng, n_swap, starts, noise=False)


def plan_feature_mix(
    M: int,
    d_e: int,
    cfg: SwapConfig,
    rng: Optional[RandomStream],
    n_swap: Optional[int] = None,
    indices: Optional[Sequence[Sequence[int]]] = None,
) -> SwapPlan:
    """Non-contiguous swap: each modality picks its own sorted index subset and
    the subsets are exchanged position by position (cyclically for M > 2)."""
    if M < 2:
        raise InvalidInput("feature mixing needs at least two modalities")
    cfg.validate(d_e)
    if n_swap is None:
        n_swap = _draw_n_swap(cfg, rng)
    if indices is None:
        indices = [np.sort(rng.choice(d_e, n_swap, replace=False)) for _ in range(M)]
    idx = [np.asarray(i, dtype=np.int64) for i in indices]
    if any(i.size != n_swap or np.unique(i).size != n_swap for i in idx):
        raise InvalidInput("each modality needs n_swap distinct indices")
    src = np.arange(M * d_e)
    for k in range(M):
        j = (k - 1) % M
        src[k * d_e + idx[k]] = j * d_e + idx[j]
    return SwapPlan(src=src, fill=np.zeros(M * d_e), n_swap=n_swap, lam=n_swap / cfg.n_max)


_PLANNERS = {
    "mfs": plan_mfs,
    "random_noise": plan_random_noise,
    "random_drop": plan_random_drop,
    "feature_mix": plan_feature_mix,
}


def make_plan(kind: str, M: int, d_e: int, cfg: SwapConfig, rng: RandomStream, n_swap=None):
    try:
        planner = _PLANNERS[kind]
    except KeyError:
        raise InvalidConfig(
            f"unknown synthesizer {kind!r}; expected one of {', '.join(SYNTHESIZERS)}"
        ) from None
    return planner(M, d_e, cfg, rng, n_swap=n_swap)


# --------------------------------------------------------------------------
# Per-sample entry points on separate modality embeddings


def _stack(embeddings: Sequence[np.ndarray]) -> Tuple[np.ndarray, int]:
    rows = [np.asarray(e, dtype=np.float64).reshape(-1) for e in embeddings]
    d_e = rows[0].size
    if any(r.size != d_e for r in rows):
        raise ShapeMismatch("modality embeddings must share one width")
    if not all(np.all(np.isfinite(r)) for r in rows):
        raise InvalidInput("non-finite embedding")
    return np.concatenate(rows), d_e


def _finish(row, plan: SwapPlan, M, d_e, y_true, num_classes):
    out = plan.apply(row)
    parts = [out[k * d_e : (k + 1) * d_e] for k in range(M)]
    return parts, soft_label(plan.lam, y_true, num_classes), plan.lam


def mfs_two(E1, E2, y_true: int, num_classes: int, cfg: SwapConfig, rng, n_swap=None, starts=None):
    """Swap one block between two modality embeddings. Returns (parts, label, lam)."""
    row, d_e = _stack([E1, E2])
    plan = plan_mfs(2, d_e, cfg, rng, n_swap=n_swap, starts=starts)
    return _finish(row, plan, 2, d_e, y_true, num_classes)


def mfs_cyclic(embeddings, y_true: int, num_classes: int, cfg: SwapConfig, rng, n_swap=None, starts=None):
    row, d_e = _stack(embeddings)
    M = len(embeddings)
    plan = plan_mfs(M, d_e, cfg, rng, n_swap=n_swap, starts=starts)
    return _finish(row, plan, M, d_e, y_true, num_classes)


def aug_random_noise(embeddings, y_true: int, num_classes: int, cfg: SwapConfig, rng, n_swap=None, starts=None):
    row, d_e = _stack(embeddings)
    M = len(embeddings)
    plan = plan_random_noise(M, d_e, cfg, rng, n_swap=n_swap, starts=starts)
    return _finish(row, plan, M, d_e, y_true, num_classes)


def aug_random_drop(embeddings, y_true: int, num_classes: int, cfg: SwapConfig, rng, n_swap=None, starts=None):
    row, d_e = _stack(embeddings)
    M = len(embeddings)
    plan = plan_random_drop(M, d_e, cfg, rng, n_swap=n_swap, starts=starts)
    return _finish(row, plan, M, d_e, y_true, num_classes)


def aug_feature_mix(embeddings, y_true: int, num_classes: int, cfg: SwapConfig, rng, n_swap=None, indices=None):
    row, d_e = _stack(embeddings)
    M = len(embeddings)
    plan = plan_feature_mix(M, d_e, cfg, rng, n_swap=n_swap, indices=indices)
    return _finish(row, plan, M, d_e, y_true, num_classes)


# --------------------------------------------------------------------------
# Batched synthesis used during training


@dataclass
class OutlierBatch:
    """Synthesized rows over the concatenated embedding of an ID batch.

    ``src`` indexes the flattened ID batch (-1 means "take ``fill``"), so the
    rows can be rebuilt from live embeddings and gradients routed back.
    """

    labels: np.ndarray  # (n_o, C + 1) soft labels
    src: np.ndarray  # (n_o, M * d_e)
    fill: np.ndarray  # (n_o, M * d_e)
    lam: np.ndarray  # (n_o,)
    embeddings: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def _batch_blocks(n, M, d_e, cfg: SwapConfig, rng: RandomStream):
    if cfg.per_batch:
        n_swap = np.full(n, _draw_n_swap(cfg, rng))
    else:
        n_swap = rng.generator.integers(cfg.n_min, cfg.n_max, size=n, endpoint=True)
    # start index uniform on [0, d_e - n_swap] per sample and modality
    u = rng.uniform(size=(n, M))
    starts = np.minimum((u * (d_e - n_swap + 1)[:, None]).astype(np.int64), (d_e - n_swap)[:, None])
    return n_swap, starts


def plan_batch(kind: str, n: int, M: int, d_e: int, cfg: SwapConfig, rng: RandomStream):
    """Vectorized plans for ``n`` rows: (src, fill, n_swap) with ``src`` relative to each row.

    Same distributions as the per-sample planners, drawn in bulk.
    """
    if kind not in _PLANNERS:
        raise InvalidConfig(
            f"unknown synthesizer {kind!r}; expected one of {', '.join(SYNTHESIZERS)}"
        )
    if kind in ("mfs", "feature_mix") and M < 2:
        raise InvalidInput("swapping needs at least two modalities")
    cfg.validate(d_e)
    width = M * d_e
    src = np.tile(np.arange(width), (n, 1))
    fill = np.zeros((n, width))
    pos = np.arange(d_e)[None, :]

    if kind == "feature_mix":
        n_swap = (
            np.full(n, _draw_n_swap(cfg, rng))
            if cfg.per_batch
            else rng.generator.integers(cfg.n_min, cfg.n_max, size=n, endpoint=True)
        )
        picks = []
        for _ in range(M):
            rank = np.argsort(np.argsort(rng.uniform(size=(n, d_e)), axis=1), axis=1)
            picks.append(np.nonzero(rank < n_swap[:, None]))  # row-major => ascending per row
        for k in range(M):
            j = (k - 1) % M
            rows, cols = picks[k]
            src[rows, k * d_e + cols] = j * d_e + picks[j][1]
        return src, fill, n_swap

    n_swap, starts = _batch_blocks(n, M, d_e, cfg, rng)
    for k in range(M):
        off = pos - starts[:, k : k + 1]
        inside = (off >= 0) & (off < n_swap[:, None])
        block = src[:, k * d_e : (k + 1) * d_e]
        if kind == "mfs":
            j = (k - 1) % M
            block[inside] = (j * d_e + starts[:, j : j + 1] + off)[inside]
        else:
            block[inside] = -1
            if kind == "random_noise":
                fill[:, k * d_e : (k + 1) * d_e][inside] = rng.normal(int(inside.sum()))
    return src, fill, n_swap


def synthesize(
    E_cat: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    M: int,
    cfg: SwapConfig,
    rng: RandomStream,
    kind: str = "mfs",
    ratio: int = 1,
) -> OutlierBatch:
    """Build ``ratio`` outliers per row of the concatenated ID embeddings."""
    n, width = E_cat.shape
    d_e = width // M
    rows = np.tile(np.arange(n), ratio)
    src, fill, n_swap = plan_batch(kind, rows.size, M, d_e, cfg, rng)
    src = np.where(src >= 0, src + (rows * width)[:, None], -1)
    lam = n_swap / cfg.n_max
    lab = np.zeros((rows.size, num_classes + 1))
    lab[np.arange(rows.size), np.asarray(labels, dtype=np.int64)[rows]] = 1.0 - lam
    lab[:, num_classes] += lam
    out = OutlierBatch(labels=lab, src=src, fill=fill, lam=lam)
    take = src >= 0
    emb = fill.copy()
    emb[take] = E_cat.reshape(-1)[src[take]]
    out.embeddings = emb
    return out
