"""Late-fusion network with an outlier class, its losses and the training loop.

Architecture per modality k: ``E_k = relu(x_k W_k + b_k)`` followed by a
unimodal head over C classes. The fusion head reads the concatenated
embeddings and emits C + 1 logits, the last one reserved for synthesized
outliers. Gradients are derived by hand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from acr import metrics as M_
from acr.errors import DegenerateSplit, DivergedTraining, InvalidConfig, InvalidInput, ShapeMismatch
from acr.mfs import SYNTHESIZERS, OutlierBatch, SwapConfig, synthesize
from acr.numerics import AdamState, RandomStream, adam_update_, log_softmax, softmax
from acr.scores import ScorerSpec, score_logits

log = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 16
    d_e: int = 256
    C: int = 6
    M: int = 2
    lambda_acl: float = 2.0
    w_uni: float = 1.0
    outlier_ratio: int = 1  # synthesized outliers per ID sample
    synthesizer: str = "mfs"
    n_min: int = 32
    n_max: int = 256
    n_swap_per_batch: bool = False
    renormalize_over_C: bool = False
    detach_outliers: bool = False
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 16

    @property
    def swap(self) -> SwapConfig:
        return SwapConfig(self.n_min, self.n_max, self.n_swap_per_batch)

    def validate(self) -> None:
        if min(self.d_in, self.d_e, self.M) < 1 or self.C < 2:
            raise InvalidConfig("need d_in, d_e, M >= 1 and C >= 2")
        if self.lambda_acl < 0 or self.w_uni < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if self.outlier_ratio < 0:
            raise InvalidConfig("outlier_ratio must be >= 0")
        if self.synthesizer not in SYNTHESIZERS:
            raise InvalidConfig(f"unknown synthesizer {self.synthesizer!r}")
        if self.outlier_ratio > 0:
            if self.M < 2 and self.synthesizer in ("mfs", "feature_mix"):
                raise InvalidConfig("swapping synthesizers need M >= 2")
            self.swap.validate(self.d_e)
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidConfig("need epochs >= 0, batch_size >= 1, lr > 0")


def param_names(M: int) -> List[str]:
    names = []
    for k in range(M):
        names += [f"enc{k}_w", f"enc{k}_b", f"uni{k}_w", f"uni{k}_b"]
    return names + ["fus_w", "fus_b"]


def init_params(cfg: ModelConfig, rng: RandomStream) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    shapes = {}
    for k in range(cfg.M):
        shapes[f"enc{k}_w"] = (cfg.d_in, cfg.d_e)
        shapes[f"enc{k}_b"] = (cfg.d_e,)
        shapes[f"uni{k}_w"] = (cfg.d_e, cfg.C)
        shapes[f"uni{k}_b"] = (cfg.C,)
    shapes["fus_w"] = (cfg.M * cfg.d_e, cfg.C + 1)
    shapes["fus_b"] = (cfg.C + 1,)
    fan_in = {
        **{f"enc{k}": cfg.d_in for k in range(cfg.M)},
        **{f"uni{k}": cfg.d_e for k in range(cfg.M)},
        "fus": cfg.M * cfg.d_e,
    }
    params = {}
    for name in param_names(cfg.M):
        bound = 1.0 / np.sqrt(fan_in[name.rsplit("_", 1)[0]])
        params[name] = rng.fork(name).uniform(-bound, bound, shapes[name])
    return params


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# Forward pass


@dataclass
class ForwardRecord:
    pre: List[np.ndarray]
    E: List[np.ndarray]
    uni_logits: List[np.ndarray]
    uni_probs: List[np.ndarray]
    E_cat: np.ndarray
    fused_logits: np.ndarray
    fused_probs: np.ndarray  # softmax over all C + 1 outputs
    conf: np.ndarray
    conf_idx: np.ndarray
    confs: np.ndarray  # (n, M)
    confs_idx: np.ndarray
    C: int
    renormalize: bool

    @property
    def n(self) -> int:
        return self.fused_logits.shape[0]


def _num_modalities(params: Params) -> int:
    return sum(1 for k in params if k.startswith("enc") and k.endswith("_w"))


def fused_confidence(fused_logits: np.ndarray, C: int, renormalize: bool = False):
    """MSP over the first C classes; returns (conf, argmax index)."""
    q = softmax(fused_logits[:, :C]) if renormalize else softmax(fused_logits)[:, :C]
    idx = np.argmax(q, axis=1)
    return q[np.arange(q.shape[0]), idx], idx


def head_record(fused_logits, uni_logits, renormalize: bool = False, **extra) -> ForwardRecord:
    """Probabilities and confidences from raw head outputs."""
    fz = np.asarray(fused_logits, dtype=np.float64)
    ul = [np.asarray(z, dtype=np.float64) for z in uni_logits]
    C = ul[0].shape[1]
    if fz.shape[1] != C + 1:
        raise ShapeMismatch(f"fused head has {fz.shape[1]} outputs, expected {C + 1}")
    up = [softmax(z) for z in ul]
    conf, conf_idx = fused_confidence(fz, C, renormalize)
    n = fz.shape[0]
    confs_idx = np.stack([np.argmax(p, axis=1) for p in up], axis=1)
    confs = np.stack([p[np.arange(n), confs_idx[:, k]] for k, p in enumerate(up)], axis=1)
    return ForwardRecord(
        pre=extra.get("pre", []),
        E=extra.get("E", []),
        uni_logits=ul,
        uni_probs=up,
        E_cat=extra.get("E_cat"),
        fused_logits=fz,
        fused_probs=softmax(fz),
        conf=conf,
        conf_idx=conf_idx,
        confs=confs,
        confs_idx=confs_idx,
        C=C,
        renormalize=renormalize,
    )


def forward(xs: Sequence[np.ndarray], params: Params, renormalize: bool = False) -> ForwardRecord:
    M = _num_modalities(params)
    if len(xs) != M:
        raise ShapeMismatch(f"batch has {len(xs)} modalities, model has {M}")
    pre, E, ul = [], [], []
    # overflow surfaces as a typed non-finite error in head_record
    with np.errstate(over="ignore", invalid="ignore"):
        for k, x in enumerate(xs):
            x = np.asarray(x, dtype=np.float64)
            w = params[f"enc{k}_w"]
            if x.ndim != 2 or x.shape[1] != w.shape[0]:
                raise ShapeMismatch(f"modality {k}: input {x.shape} vs d_in {w.shape[0]}")
            a = x @ w + params[f"enc{k}_b"]
            e = np.maximum(a, 0.0)
            pre.append(a)
            E.append(e)
            ul.append(e @ params[f"uni{k}_w"] + params[f"uni{k}_b"])
        E_cat = np.concatenate(E, axis=1)
        fz = E_cat @ params["fus_w"] + params["fus_b"]
    return head_record(fz, ul, renormalize, pre=pre, E=E, E_cat=E_cat)


# --------------------------------------------------------------------------
# Adaptive confidence loss


def acl_loss(conf, confs) -> float:
    """Mean over modalities of max(0, conf_k - conf); batch-averaged for arrays."""
    c = np.asarray(conf, dtype=np.float64)
    u = np.asarray(confs, dtype=np.float64)
    if c.ndim == 0:
        return float(np.mean(np.maximum(0.0, u - c)))
    return float(np.mean(np.mean(np.maximum(0.0, u - c[:, None]), axis=1)))


def _max_prob_grad(probs: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """d p_idx / d z for softmax rows: p_idx * (onehot(idx) - p)."""
    n = probs.shape[0]
    p_hat = probs[np.arange(n), idx]
    g = -p_hat[:, None] * probs
    g[np.arange(n), idx] += p_hat
    return g


def acl_grad(record: ForwardRecord) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Gradient of the batch-mean ACL w.r.t. fused logits and each unimodal logit row.

    At conf_k == conf the hinge counts as inactive.
    """
    n, M, C = record.n, record.confs.shape[1], record.C
    active = (record.confs > record.conf[:, None]).astype(np.float64)
    d_conf = -active.sum(axis=1) / (n * M)
    d_confs = active / (n * M)

    dz = np.zeros_like(record.fused_logits)
    if record.renormalize:
        q = softmax(record.fused_logits[:, :C])
        dz[:, :C] = d_conf[:, None] * _max_prob_grad(q, record.conf_idx)
    else:
        dz = d_conf[:, None] * _max_prob_grad(record.fused_probs, record.conf_idx)
    dzk = [
        d_confs[:, k : k + 1] * _max_prob_grad(record.uni_probs[k], record.confs_idx[:, k])
        for k in range(M)
    ]
    return dz, dzk


# --------------------------------------------------------------------------
# Total objective


@dataclass
class LossBreakdown:
    l_cls: float
    l_outlier: float
    l_acl: float
    lambda_acl: float

    @property
    def total(self) -> float:
        return self.l_cls + self.l_outlier + self.lambda_acl * self.l_acl


def outlier_embeddings(E_cat: np.ndarray, outliers: OutlierBatch) -> np.ndarray:
    flat = E_cat.reshape(-1)
    take = outliers.src >= 0
    out = outliers.fill.copy()
    out[take] = flat[outliers.src[take]]
    return out


def total_loss(
    xs: Sequence[np.ndarray],
    y: np.ndarray,
    outliers: Optional[OutlierBatch],
    params: Params,
    lambda_acl: float = 2.0,
    w_uni: float = 1.0,
    renormalize: bool = False,
    detach_outliers: bool = False,
) -> Tuple[LossBreakdown, Params]:
    """Loss terms and exact gradients for one batch.

    ``outliers`` carries gather indices into this batch's concatenated
    embeddings; outlier rows are rebuilt from the live forward pass.
    """
    if lambda_acl < 0:
        raise InvalidInput("lambda_acl must be non-negative")
    rec = forward(xs, params, renormalize)
    n, M = rec.n, rec.confs.shape[1]
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeMismatch(f"labels {y.shape} vs batch of {n}")
    rows = np.arange(n)

    # classification: fused head over C + 1, unimodal heads over C
    fz_log = log_softmax(rec.fused_logits)
    l_cls = -np.sum(fz_log[rows, y])
    dz = rec.fused_probs.copy()
    dz[rows, y] -= 1.0
    dz /= n
    dzk = []
    for k in range(M):
        l_cls += w_uni * -np.sum(log_softmax(rec.uni_logits[k])[rows, y])
        g = rec.uni_probs[k].copy()
        g[rows, y] -= 1.0
        dzk.append(g * (w_uni / n))
    l_cls /= n

    l_acl = acl_loss(rec.conf, rec.confs)
    if lambda_acl != 0.0:
        adz, adzk = acl_grad(rec)
        dz = dz + lambda_acl * adz
        dzk = [a + lambda_acl * b for a, b in zip(dzk, adzk)]

    grads: Params = {}
    dE_cat = dz @ params["fus_w"].T
    grads["fus_w"] = rec.E_cat.T @ dz
    grads["fus_b"] = dz.sum(axis=0)

    l_out = 0.0
    if outliers is not None and outliers.size > 0:
        Eo = outlier_embeddings(rec.E_cat, outliers)
        zo = Eo @ params["fus_w"] + params["fus_b"]
        no = zo.shape[0]
        l_out = float(-np.sum(outliers.labels * log_softmax(zo)) / no)
        dzo = (softmax(zo) - outliers.labels) / no
        grads["fus_w"] = grads["fus_w"] + Eo.T @ dzo
        grads["fus_b"] = grads["fus_b"] + dzo.sum(axis=0)
        if not detach_outliers:
            dEo = dzo @ params["fus_w"].T
            take = outliers.src >= 0
            flat = dE_cat.reshape(-1).copy()
            np.add.at(flat, outliers.src[take], dEo[take])
            dE_cat = flat.reshape(dE_cat.shape)

    d_e = rec.E[0].shape[1]
    for k in range(M):
        dE = dE_cat[:, k * d_e : (k + 1) * d_e] + dzk[k] @ params[f"uni{k}_w"].T
        grads[f"uni{k}_w"] = rec.E[k].T @ dzk[k]
        grads[f"uni{k}_b"] = dzk[k].sum(axis=0)
        da = dE * (rec.pre[k] > 0)
        grads[f"enc{k}_w"] = np.asarray(xs[k], dtype=np.float64).T @ da
        grads[f"enc{k}_b"] = da.sum(axis=0)

    loss = LossBreakdown(float(l_cls), float(l_out), float(l_acl), float(lambda_acl))
    return loss, {name: grads[name] for name in param_names(M)}


def plan_outliers(
    n: int, labels: np.ndarray, cfg: ModelConfig, rng: RandomStream
) -> Optional[OutlierBatch]:
    """Gather plans for ``outlier_ratio`` outliers per ID row of a batch.

    Plans depend only on shapes, so placeholder embeddings are enough here.
    """
    if cfg.outlier_ratio == 0 or n == 0:
        return None
    ghost = np.zeros((n, cfg.M * cfg.d_e))
    return synthesize(ghost, labels, cfg.C, cfg.M, cfg.swap, rng, cfg.synthesizer, cfg.outlier_ratio)


# --------------------------------------------------------------------------
# Inference


def predict(xs, params: Params, scorer: ScorerSpec = ScorerSpec(), renormalize: bool = False):
    """Labels restricted to the first C classes (lowest index on ties) and scores."""
    rec = forward(xs, params, renormalize)
    labels = np.argmax(rec.fused_logits[:, : rec.C], axis=1)
    return labels, score_logits(rec.fused_logits, scorer, rec.C, renormalize)


@dataclass
class Evaluation:
    record: ForwardRecord
    labels: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray
    metrics: dict


def evaluate(
    xs, y, params: Params, scorer: ScorerSpec = ScorerSpec(), renormalize: bool = False
) -> Evaluation:
    rec = forward(xs, params, renormalize)
    pred = np.argmax(rec.fused_logits[:, : rec.C], axis=1)
    scores = score_logits(rec.fused_logits, scorer, rec.C, renormalize)
    m = M_.compute_metrics(
        scores, pred, y, fused_conf=rec.conf, unimodal_confs=rec.confs
    )
    return Evaluation(record=rec, labels=np.asarray(y), predictions=pred, scores=scores, metrics=m)


# --------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    params: Params
    initial: Params
    history: List[dict]
    best_epoch: Optional[int]


def _val_auroc(params: Params, val, renormalize: bool) -> Tuple[Optional[float], float]:
    rec = forward(val.xs, params, renormalize)
    pred = np.argmax(rec.fused_logits[:, : rec.C], axis=1)
    acc = float(np.mean(pred == val.y))
    try:
        return M_.auroc(rec.conf, pred == val.y), acc
    except DegenerateSplit:
        return None, acc


def train(cfg: ModelConfig, train_set, val_set, seed: int) -> TrainResult:
    """Adam on mini-batches, keeping the epoch with the best validation AUROC.

    Shuffling, initialization and outlier synthesis draw from separate forks
    of the seed, so switching components on or off never shifts another stream.
    """
    cfg.validate()
    root = RandomStream(seed).fork("train")
    initial = init_params(cfg, root.fork("init"))
    params = copy_params(initial)
    state = AdamState.for_params(params, lr=cfg.lr)
    synth_rng = root.fork("synth")
    history: List[dict] = []
    best, best_auroc, best_epoch = copy_params(params), -np.inf, None
    n = len(train_set)

    for epoch in range(cfg.epochs):
        order = root.fork("shuffle").fork(str(epoch)).permutation(n)
        sums = np.zeros(4)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xs = [x[idx] for x in train_set.xs]
            yb = train_set.y[idx]
            outliers = plan_outliers(len(idx), yb, cfg, synth_rng)
            try:
                loss, grads = total_loss(
                    xs,
                    yb,
                    outliers,
                    params,
                    lambda_acl=cfg.lambda_acl,
                    w_uni=cfg.w_uni,
                    renormalize=cfg.renormalize_over_C,
                    detach_outliers=cfg.detach_outliers,
                )
            except InvalidInput as exc:  # non-finite activations
                raise DivergedTraining(epoch, str(exc)) from exc
            if not np.isfinite(loss.total):
                raise DivergedTraining(epoch)
            adam_update_(params, grads, state)
            sums += (loss.total, loss.l_cls, loss.l_outlier, loss.l_acl)
            batches += 1
        sums /= max(batches, 1)
        val_auroc, val_acc = _val_auroc(params, val_set, cfg.renormalize_over_C)
        history.append(
            {
                "epoch": epoch,
                "loss_total": float(sums[0]),
                "loss_cls": float(sums[1]),
                "loss_outlier": float(sums[2]),
                "loss_acl": float(sums[3]),
                "val_acc": val_acc,
                "val_auroc": val_auroc,
            }
        )
        log.debug("epoch %d: %s", epoch, history[-1])
        score = -np.inf if val_auroc is None else val_auroc
        if best_epoch is None or score > best_auroc:
            best, best_auroc, best_epoch = copy_params(params), score, epoch

    return TrainResult(params=best, initial=initial, history=history, best_epoch=best_epoch)


# --------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_MAGIC = "ACR-CHECKPOINT 1"


def save_checkpoint(params: Params, path: str) -> None:
    """Text format: a magic line, then per array ``name ndim dims...`` and one
    line per row of exact float reprs."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        for name, arr in params.items():
            a = np.atleast_2d(arr) if arr.ndim == 1 else arr
            fh.write(f"{name} {arr.ndim} {' '.join(str(d) for d in arr.shape)}\n")
            for row in a:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_checkpoint(path: str) -> Params:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise InvalidInput(f"{path}: not an ACR checkpoint")
    params: Params = {}
    i = 1
    while i < len(lines):
        head = lines[i].split()
        name, ndim = head[0], int(head[1])
        shape = tuple(int(d) for d in head[2 : 2 + ndim])
        nrows = shape[0] if ndim == 2 else 1
        rows = [[float(v) for v in lines[i + 1 + r].split()] for r in range(nrows)]
        params[name] = np.array(rows, dtype=np.float64).reshape(shape)
        i += 1 + nrows
    return params
