"""Synthetic multimodal benchmark with agreeing, conflicting and noisy samples."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from acr.errors import InvalidConfig, InvalidInput
from acr.numerics import RandomStream

FLAGS = ("clean", "conflict", "noisy")
CLEAN, CONFLICT, NOISY = 0, 1, 2
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SynthConfig:
    C: int = 6
    M: int = 2
    d_in: int = 16
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    sigma: float = 1.2
    rho_conflict: float = 0.25
    rho_noise: float = 0.1
    sigma_noise: float = 2.0  # scale of a pure-noise modality
    seed: int = 0

    def validate(self) -> None:
        if self.C < 2 or self.M < 1 or self.d_in < 1:
            raise InvalidConfig("need C >= 2, M >= 1, d_in >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InvalidConfig("split sizes must be >= 1")
        if not self.sigma > 0 or not self.sigma_noise > 0:
            raise InvalidConfig("noise scales must be positive")
        if not (0 <= self.rho_conflict < 1 and 0 <= self.rho_noise < 1):
            raise InvalidConfig("fractions must lie in [0, 1)")
        if self.rho_conflict + self.rho_noise >= 1:
            raise InvalidConfig("rho_conflict + rho_noise must be < 1")
        if self.rho_conflict > 0 and self.M < 2:
            raise InvalidConfig("conflict samples need a second modality")


@dataclass
class MultimodalBatch:
    xs: List[np.ndarray]  # one (n, d_in) matrix per modality
    y: np.ndarray
    flags: np.ndarray  # CLEAN / CONFLICT / NOISY codes
    corrupted: np.ndarray  # modality index of the corrupted stream, -1 if none
    sample_id: np.ndarray = None

    def __post_init__(self):
        n = self.y.shape[0]
        if self.sample_id is None:
            self.sample_id = np.arange(n)
        if any(x.shape[0] != n for x in self.xs):
            raise InvalidInput("modality row counts differ from label count")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def M(self) -> int:
        return len(self.xs)

    def take(self, idx) -> "MultimodalBatch":
        return MultimodalBatch(
            xs=[x[idx] for x in self.xs],
            y=self.y[idx],
            flags=self.flags[idx],
            corrupted=self.corrupted[idx],
            sample_id=self.sample_id[idx],
        )


def _count(rho: float, n: int) -> int:
    return int(np.floor(rho * n + 0.5))


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """Class prototypes, shape (C, M, d_in); shared by every split."""
    return RandomStream(cfg.seed).fork("prototypes").normal((cfg.C, cfg.M, cfg.d_in))


def _make_split(cfg: SynthConfig, mu: np.ndarray, n: int, rng: RandomStream) -> MultimodalBatch:
    C, M = cfg.C, cfg.M
    y = (np.arange(n) % C)[rng.permutation(n)]
    order = rng.permutation(n)
    n_conf = _count(cfg.rho_conflict, n)
    n_noise = _count(cfg.rho_noise, n)
    flags = np.full(n, CLEAN)
    flags[order[:n_conf]] = CONFLICT
    flags[order[n_conf : n_conf + n_noise]] = NOISY

    src = np.repeat(y[:, None], M, axis=1)  # prototype class per (sample, modality)
    corrupted = np.full(n, -1)
    conf_idx = np.flatnonzero(flags == CONFLICT)
    if conf_idx.size:
        shift = rng.generator.integers(1, C, size=conf_idx.size)  # y' != y
        src[conf_idx, 1] = (y[conf_idx] + shift) % C
        corrupted[conf_idx] = 1
    noise_idx = np.flatnonzero(flags == NOISY)
    if noise_idx.size:
        corrupted[noise_idx] = rng.generator.integers(0, M, size=noise_idx.size)

    xs = []
    for k in range(M):
        x = mu[src[:, k], k] + cfg.sigma * rng.normal((n, cfg.d_in))
        hit = noise_idx[corrupted[noise_idx] == k]
        x[hit] = cfg.sigma_noise * rng.normal((hit.size, cfg.d_in))
        xs.append(x)
    return MultimodalBatch(xs=xs, y=y, flags=flags, corrupted=corrupted)


def make_dataset(cfg: SynthConfig) -> Dict[str, MultimodalBatch]:
    cfg.validate()
    mu = prototypes(cfg)
    root = RandomStream(cfg.seed)
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    return {s: _make_split(cfg, mu, sizes[s], root.fork(s)) for s in SPLITS}


def apply_shift(batch: MultimodalBatch, modality: int, sigma_shift: float, rng: RandomStream) -> MultimodalBatch:
    """Add Gaussian noise of scale ``sigma_shift`` to one modality."""
    if not 0 <= modality < batch.M:
        raise InvalidInput(f"modality {modality} outside [0, {batch.M})")
    if sigma_shift < 0:
        raise InvalidInput("shift scale must be non-negative")
    xs = [x.copy() for x in batch.xs]
    if sigma_shift > 0:
        xs[modality] = xs[modality] + sigma_shift * rng.normal(xs[modality].shape)
    return MultimodalBatch(
        xs=xs,
        y=batch.y.copy(),
        flags=batch.flags.copy(),
        corrupted=batch.corrupted.copy(),
        sample_id=batch.sample_id.copy(),
    )


# --------------------------------------------------------------------------
# CSV exchange: one file per split and modality


def write_batch_csv(batch: MultimodalBatch, directory: str, split: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for k, x in enumerate(batch.xs):
        path = os.path.join(directory, f"{split}_m{k}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "label", "flag"] + [f"f{j}" for j in range(x.shape[1])])
            for i in range(len(batch)):
                w.writerow(
                    [int(batch.sample_id[i]), int(batch.y[i]), FLAGS[batch.flags[i]]]
                    + [repr(float(v)) for v in x[i]]
                )
        paths.append(path)
    return paths


def read_batch_csv(directory: str, split: str) -> MultimodalBatch:
    xs, ids, y, flags = [], None, None, None
    k = 0
    while os.path.exists(path := os.path.join(directory, f"{split}_m{k}.csv")):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:3] != ["sample_id", "label", "flag"]:
            raise InvalidInput(f"{path}: unexpected header {header[:3]}")
        sid = np.array([int(r[0]) for r in body])
        lab = np.array([int(r[1]) for r in body])
        fl = np.array([FLAGS.index(r[2]) for r in body])
        if ids is None:
            ids, y, flags = sid, lab, fl
        elif not (np.array_equal(ids, sid) and np.array_equal(y, lab)):
            raise InvalidInput(f"{path}: rows disagree with modality 0")
        xs.append(np.array([[float(v) for v in r[3:]] for r in body]))
        k += 1
    if not xs:
        raise InvalidInput(f"no {split}_m*.csv files in {directory}")
    return MultimodalBatch(xs=xs, y=y, flags=flags, corrupted=np.full(len(y), -1), sample_id=ids)
