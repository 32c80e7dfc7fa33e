"""``acr`` command line: train, eval, sweep, export-hist, make-data.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from acr import experiment as X
from acr.errors import DivergedTraining, InvalidConfig
from acr.metrics import METRIC_KEYS, fold_ood, risk_coverage
from acr.model import evaluate, load_checkpoint
from acr.numerics import RandomStream
from acr.synth import SPLITS, apply_shift, make_dataset, read_batch_csv, write_batch_csv

log = logging.getLogger("acr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> List[int]:
    """``"0-9"``, ``"1,4,7"`` or a mix of both."""
    seeds: List[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _fmt_metrics(m: dict) -> str:
    return "  ".join(f"{k}={'null' if m[k] is None else format(m[k], '.4f')}" for k in METRIC_KEYS)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = X.load_config(
        args.config, method=args.method, seed=args.seed, scorer=args.scorer,
        shift_sigma=args.shift_sigma, shift_modality=args.shift_modality,
    )
    res = X.run(cfg)
    X.write_outputs(res, args.out, figures=not args.no_figures)
    print(f"{cfg.method} seed={cfg.seed} best_epoch={res.train.best_epoch}")
    print(_fmt_metrics(res.metrics))
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = X.load_config(None, scorer=args.scorer).scorer_spec()
    dump = X.read_logit_dump(args.dump)
    m, pred, scores, _ = X.evaluate_dump(dump, spec, args.renormalize)
    os.makedirs(args.out, exist_ok=True)
    X.write_json(X.metrics_dict(m), os.path.join(args.out, "metrics.json"))
    rc = risk_coverage(scores, fold_ood(pred == dump.labels, dump.ood))
    with open(os.path.join(args.out, "rc_curve.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rc.to_csv())
    if not args.no_figures:
        from acr import plotting

        plotting.plot_risk_coverage(rc, os.path.join(args.out, "rc_curve.png"), label=args.scorer)
    for key in ("auroc", "fpr95"):
        if m[key] is None:
            print(f"{key}: degenerate split (all rows correct or all incorrect); written as null")
    print(_fmt_metrics(m))
    return EXIT_OK


def _sweep_task(cfg: X.ExperimentConfig) -> dict:
    return X.run(cfg).metrics


def _summary(values) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def cmd_sweep(args) -> int:
    base = X.load_config(args.config, scorer=args.scorer, shift_sigma=args.shift_sigma)
    seeds = args.seeds if args.seeds is not None else list(base.seeds)
    arms = [a.strip() for a in args.methods.split(",") if a.strip()]
    if not arms:
        raise InvalidConfig("no arms given")
    tasks = [base.replace(method=a, seed=s, seeds=seeds) for a in arms for s in seeds]
    for t in tasks:
        t.validate()
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_sweep_task(t))
            log.info("%s seed=%d auroc=%s", t.method, t.seed, results[-1]["auroc"])

    rows, summary = [], {}
    for a in arms:
        per = [(t.seed, m) for t, m in zip(tasks, results) if t.method == a]
        per.sort(key=lambda p: p[0])
        rows += [[a, s] + [m[k] for k in METRIC_KEYS] for s, m in per]
        stats = {k: _summary([m[k] for _, m in per]) for k in METRIC_KEYS}
        rows.append([a, "mean"] + [stats[k][0] for k in METRIC_KEYS])
        rows.append([a, "std"] + [stats[k][1] for k in METRIC_KEYS])
        summary[a] = stats
    os.makedirs(args.out, exist_ok=True)
    X.write_csv(os.path.join(args.out, "sweep.csv"), ["arm", "seed", *METRIC_KEYS], rows)
    if not args.no_figures:
        from acr import plotting

        for key in ("auroc", "aurc_x1000", "fpr95"):
            plotting.plot_sweep({a: summary[a][key] for a in arms}, key, os.path.join(args.out, f"sweep_{key}.png"))
    for a in arms:
        mean_auroc = summary[a]["auroc"][0]
        print(f"{a}: mean auroc={mean_auroc if mean_auroc is None else round(mean_auroc, 4)} over {len(seeds)} seeds")
    return EXIT_OK


def _load_split(args, cfg):
    if args.data:
        batch = read_batch_csv(args.data, args.split)
    else:
        batch = make_dataset(cfg.synth_config())[args.split]
    if cfg.shift_sigma > 0:
        batch = apply_shift(batch, cfg.shift_modality, cfg.shift_sigma, RandomStream(cfg.seed).fork("shift"))
    return batch


def cmd_export_hist(args) -> int:
    if args.bins < 1:
        raise InvalidConfig("--bins must be >= 1")
    cfg = X.load_config(args.config, seed=args.seed, shift_sigma=args.shift_sigma)
    params = load_checkpoint(args.checkpoint)
    batch = _load_split(args, cfg)
    ev = evaluate(batch.xs, batch.y, params, cfg.scorer_spec(), cfg.renormalize_over_C)
    hist = X.score_histogram(ev.record.conf, ev.predictions == ev.labels, args.bins)
    os.makedirs(args.out, exist_ok=True)
    X.write_csv(
        os.path.join(args.out, "hist_scores.csv"),
        ("bin_left", "bin_right", "count_correct", "count_incorrect"),
        hist,
    )
    if not args.no_figures:
        from acr import plotting

        plotting.plot_score_histogram(hist, os.path.join(args.out, "hist_scores.png"))
    n_c = sum(r[2] for r in hist)
    print(f"{len(batch)} samples: {n_c} correct, {len(batch) - n_c} incorrect")
    return EXIT_OK


def cmd_make_data(args) -> int:
    cfg = X.load_config(args.config, seed=args.seed)
    data = make_dataset(cfg.synth_config())
    written = []
    for split in SPLITS:
        written += write_batch_csv(data[split], args.out, split)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="acr", description="Adaptive confidence regularization experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scorer=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        if scorer:
            sp.add_argument("--scorer", default=None, help="msp, maxlogit, energy, entropy, doctor_a, doctor_b, gen")

    t = sub.add_parser("train", help="synthesize data, train one arm, evaluate on test")
    common(t)
    t.add_argument("--method")
    t.add_argument("--seed", type=int)
    t.add_argument("--shift-sigma", type=float)
    t.add_argument("--shift-modality", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics from a logit dump")
    e.add_argument("--dump", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--scorer", default="msp")
    e.add_argument("--renormalize", action="store_true", help="softmax over the first C logits only")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run arms x seeds and aggregate")
    common(s)
    s.add_argument("--seeds", type=parse_seeds, help="e.g. 0-9 or 0,2,5 (default: config seeds)")
    s.add_argument("--methods", default="baseline,acr", help="comma-separated arms")
    s.add_argument("--shift-sigma", type=float)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    h = sub.add_parser("export-hist", help="confidence histogram of a checkpoint on a split")
    common(h, scorer=False)
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", help="directory written by make-data (default: regenerate from config)")
    h.add_argument("--split", choices=SPLITS, default="test")
    h.add_argument("--bins", type=int, default=20)
    h.add_argument("--seed", type=int)
    h.add_argument("--shift-sigma", type=float)
    h.set_defaults(func=cmd_export_hist)

    d = sub.add_parser("make-data", help="write the synthetic splits as CSV")
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_make_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DivergedTraining as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
