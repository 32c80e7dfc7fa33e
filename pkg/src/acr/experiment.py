"""Experiment configuration, method arms and the train -> evaluate pipeline."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from acr.errors import InvalidConfig
from acr.metrics import METRIC_KEYS, compute_metrics, risk_coverage
from acr.mfs import SYNTHESIZERS
from acr.model import (
    ModelConfig,
    TrainResult,
    evaluate,
    fused_confidence,
    head_record,
    save_checkpoint,
    train,
)
from acr.numerics import RandomStream
from acr.scores import SCORER_NAMES, ScorerSpec, score_logits
from acr.synth import SynthConfig, apply_shift, make_dataset

BASE_METHODS = ("baseline", "acr", "acl_only", "mfs_only")
METHODS = BASE_METHODS + tuple(f"ablation:{s}" for s in SYNTHESIZERS if s != "mfs")
HISTORY_COLUMNS = ("epoch", "loss_total", "loss_cls", "loss_outlier", "loss_acl", "val_acc", "val_auroc")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    C: int = 6
    M: int = 2
    d_in: int = 16
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    sigma: float = 1.2
    rho_conflict: float = 0.25
    rho_noise: float = 0.1
    sigma_noise: float = 2.0
    seed: int = 0
    # method and training
    method: str = "acr"
    lambda_acl: float = 2.0
    n_min: int = 32
    n_max: int = 256
    w_uni: float = 1.0
    outlier_ratio: int = 1
    d_e: int = 256
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 16
    n_swap_per_batch: bool = False
    renormalize_over_C: bool = False
    detach_outliers: bool = False
    # evaluation
    scorer: str = "msp"
    energy_T: float = 1.0
    gen_gamma: float = 0.1
    gen_top_m: Optional[int] = None
    shift_sigma: float = 0.0
    shift_modality: int = 0
    hist_bins: int = 20
    seeds: List[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.scorer not in SCORER_NAMES:
            raise InvalidConfig(f"unknown scorer {self.scorer!r}")
        if self.hist_bins < 1:
            raise InvalidConfig("hist_bins must be >= 1")
        if self.shift_sigma < 0 or not 0 <= self.shift_modality < self.M:
            raise InvalidConfig("bad shift settings")
        if not self.seeds:
            raise InvalidConfig("need at least one seed")
        self.synth_config().validate()
        self.model_config().validate()

    def synth_config(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def model_config(self) -> ModelConfig:
        lam, ratio, synth = self.lambda_acl, self.outlier_ratio, "mfs"
        if self.method == "baseline":
            lam, ratio = 0.0, 0
        elif self.method == "acl_only":
            ratio = 0
        elif self.method == "mfs_only":
            lam = 0.0
        elif self.method.startswith("ablation:"):
            synth = self.method.split(":", 1)[1]
        return ModelConfig(
            d_in=self.d_in,
            d_e=self.d_e,
            C=self.C,
            M=self.M,
            lambda_acl=lam,
            w_uni=self.w_uni,
            outlier_ratio=ratio,
            synthesizer=synth,
            n_min=self.n_min,
            n_max=self.n_max,
            n_swap_per_batch=self.n_swap_per_batch,
            renormalize_over_C=self.renormalize_over_C,
            detach_outliers=self.detach_outliers,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
        )

    def scorer_spec(self) -> ScorerSpec:
        return ScorerSpec(self.scorer, self.energy_T, self.gen_gamma, self.gen_top_m)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: Optional[str], **overrides) -> ExperimentConfig:
    """Read a JSON config; unknown keys are an error. ``None`` overrides are ignored."""
    data = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidConfig("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = ExperimentConfig(**data)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: TrainResult
    metrics: dict
    clean_metrics: Optional[dict]
    evaluation: object
    test: object


def run(cfg: ExperimentConfig) -> ExperimentResult:
    """Generate data, train one arm and evaluate it on the (optionally shifted) test split."""
    cfg.validate()
    data = make_dataset(cfg.synth_config())
    result = train(cfg.model_config(), data["train"], data["val"], cfg.seed)
    spec = cfg.scorer_spec()
    test = data["test"]
    clean = None
    if cfg.shift_sigma > 0:
        clean = evaluate(test.xs, test.y, result.params, spec, cfg.renormalize_over_C).metrics
        test = apply_shift(test, cfg.shift_modality, cfg.shift_sigma, RandomStream(cfg.seed).fork("shift"))
    ev = evaluate(test.xs, test.y, result.params, spec, cfg.renormalize_over_C)
    return ExperimentResult(cfg, result, ev.metrics, clean, ev, test)


# --------------------------------------------------------------------------
# Writers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_json(obj: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_csv(path: str, header: Sequence[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def metrics_dict(m: dict) -> dict:
    return {k: m[k] for k in METRIC_KEYS}


def score_histogram(conf, correct, bins: int):
    """Fixed-width bins over [0, 1]; returns rows (left, right, n_correct, n_incorrect)."""
    if bins < 1:
        raise InvalidConfig("bins must be >= 1")
    edges = np.linspace(0.0, 1.0, bins + 1)
    c = np.asarray(correct, dtype=bool)
    conf = np.clip(np.asarray(conf, dtype=np.float64), 0.0, 1.0)
    hc, _ = np.histogram(conf[c], bins=edges)
    hi, _ = np.histogram(conf[~c], bins=edges)
    return [(edges[i], edges[i + 1], int(hc[i]), int(hi[i])) for i in range(bins)]


def write_logit_dump(path: str, ev, test, ood_flag=None) -> None:
    rec = ev.record
    C, M = rec.C, len(rec.uni_logits)
    header = ["sample_id", "label", "ood_flag"]
    header += [f"fused_logit_{j}" for j in range(C + 1)]
    for k in range(M):
        header += [f"uni{k}_logit_{j}" for j in range(C)]
    ood = np.zeros(len(test.y), dtype=bool) if ood_flag is None else np.asarray(ood_flag, bool)
    rows = []
    for i in range(len(test.y)):
        row = [int(test.sample_id[i]), int(test.y[i]), int(ood[i])]
        row += rec.fused_logits[i].tolist()
        for k in range(M):
            row += rec.uni_logits[k][i].tolist()
        rows.append(row)
    write_csv(path, header, rows)


def write_outputs(res: ExperimentResult, out_dir: str, figures: bool = True) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    cfg = res.config
    paths = {}
    paths["metrics"] = os.path.join(out_dir, "metrics.json")
    write_json(metrics_dict(res.metrics), paths["metrics"])
    if res.clean_metrics is not None:
        paths["clean"] = os.path.join(out_dir, "metrics_clean.json")
        write_json(metrics_dict(res.clean_metrics), paths["clean"])

    ev = res.evaluation
    correct = ev.predictions == ev.labels
    rc = risk_coverage(ev.scores, correct)
    paths["rc"] = os.path.join(out_dir, "rc_curve.csv")
    with open(paths["rc"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rc.to_csv())

    paths["history"] = os.path.join(out_dir, "history.csv")
    write_csv(paths["history"], HISTORY_COLUMNS, ([h[c] for c in HISTORY_COLUMNS] for h in res.train.history))

    hist = score_histogram(ev.record.conf, correct, cfg.hist_bins)
    paths["hist"] = os.path.join(out_dir, "hist_scores.csv")
    write_csv(paths["hist"], ("bin_left", "bin_right", "count_correct", "count_incorrect"), hist)

    paths["checkpoint"] = os.path.join(out_dir, "checkpoint.txt")
    save_checkpoint(res.train.params, paths["checkpoint"])
    paths["logits"] = os.path.join(out_dir, "logits.csv")
    write_logit_dump(paths["logits"], ev, res.test)

    if figures:
        from acr import plotting

        paths["rc_fig"] = plotting.plot_risk_coverage(rc, os.path.join(out_dir, "rc_curve.png"), label=cfg.method)
        paths["hist_fig"] = plotting.plot_score_histogram(hist, os.path.join(out_dir, "hist_scores.png"))
        paths["history_fig"] = plotting.plot_history(res.train.history, os.path.join(out_dir, "history.png"))
    return list(paths.values())


# --------------------------------------------------------------------------
# Logit dumps


@dataclass
class LogitDump:
    sample_id: np.ndarray
    labels: np.ndarray
    ood: np.ndarray
    fused: np.ndarray
    uni: Optional[List[np.ndarray]]

    @property
    def C(self) -> int:
        return self.fused.shape[1] - 1


def _dump_layout(header: List[str]):
    if header[:3] != ["sample_id", "label", "ood_flag"]:
        raise InvalidConfig("dump header must start with sample_id,label,ood_flag")
    fused = [h for h in header if h.startswith("fused_logit_")]
    C = len(fused) - 1
    if C < 1 or fused != [f"fused_logit_{j}" for j in range(C + 1)] or header[3 : 4 + C] != fused:
        raise InvalidConfig("dump needs contiguous fused_logit_0..fused_logit_C columns")
    rest = header[4 + C :]
    if len(rest) % C:
        raise InvalidConfig("unimodal logit columns must come in groups of C")
    M = len(rest) // C
    expected = [f"uni{k}_logit_{j}" for k in range(M) for j in range(C)]
    if rest != expected:
        raise InvalidConfig("unimodal columns must be uni{k}_logit_0..uni{k}_logit_{C-1} in order")
    return C, M


def read_logit_dump(path: str) -> LogitDump:
    """Parse a dump; ragged or malformed rows raise InvalidConfig naming the line."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise InvalidConfig(f"cannot read dump {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidConfig(f"{path}: empty dump")
        C, M = _dump_layout(header)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise InvalidConfig(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
            try:
                sid, label, ood = int(row[0]), int(row[1]), int(row[2])
                vals = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise InvalidConfig(f"{path}: line {line}: {exc}") from exc
            if ood not in (0, 1):
                raise InvalidConfig(f"{path}: line {line}: ood_flag must be 0 or 1")
            if not (0 <= label < C or (ood and label == -1)):
                raise InvalidConfig(f"{path}: line {line}: label {label} out of range")
            if not np.all(np.isfinite(vals)):
                raise InvalidConfig(f"{path}: line {line}: non-finite logit")
            rows.append((sid, label, ood, vals))
    if not rows:
        raise InvalidConfig(f"{path}: dump has no rows")
    vals = np.array([r[3] for r in rows], dtype=np.float64)
    uni = [vals[:, C + 1 + k * C : C + 1 + (k + 1) * C] for k in range(M)] if M else None
    return LogitDump(
        sample_id=np.array([r[0] for r in rows]),
        labels=np.array([r[1] for r in rows]),
        ood=np.array([bool(r[2]) for r in rows]),
        fused=vals[:, : C + 1],
        uni=uni,
    )


def evaluate_dump(dump: LogitDump, spec: ScorerSpec, renormalize: bool = False):
    """Metrics from stored logits; returns (metrics, predictions, scores, fused_conf)."""
    C = dump.C
    pred = np.argmax(dump.fused[:, :C], axis=1)
    scores = score_logits(dump.fused, spec, C, renormalize)
    if dump.uni is not None:
        rec = head_record(dump.fused, dump.uni, renormalize)
        conf, confs = rec.conf, rec.confs
    else:
        conf, confs = fused_confidence(dump.fused, C, renormalize)[0], None
    m = compute_metrics(scores, pred, dump.labels, ood_flag=dump.ood, fused_conf=conf, unimodal_confs=confs)
    return m, pred, scores, conf
