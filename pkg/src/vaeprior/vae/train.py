"""Datasets, the training loop and test-split error reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..field import CovarianceModel, GridSpec, kle_decompose, synthesize_many
from ..seeding import make_rng
from .model import ArchitectureSpec, VAEParams, decode, encode, init_params, loss_and_grads, losses
from .optim import Adam

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class TrainConfig:
    batch_size: int = 25
    epochs: int = 100
    learning_rate: float = 1e-4
    beta: float = 0.5
    splits: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        self.splits = tuple(float(s) for s in self.splits)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if len(self.splits) != 3 or min(self.splits) <= 0 or abs(sum(self.splits) - 1) > 1e-9:
            raise ValueError("splits must be three positive fractions summing to 1")


@dataclass
class FieldDataset:
    """Gaussian fields as images ``(N, ny, nx)`` with a correlation-length label
    and a split assignment per item."""

    values: np.ndarray
    corr_len: np.ndarray
    split: np.ndarray
    files: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.corr_len = np.asarray(self.corr_len, dtype=float)
        self.split = np.asarray(self.split)
        n = self.values.shape[0]
        if self.corr_len.shape != (n,) or self.split.shape != (n,):
            raise ValueError("labels and splits must have one entry per field")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split labels {sorted(bad)}")

    def __len__(self):
        return self.values.shape[0]

    def subset(self, split: str) -> "FieldDataset":
        m = self.split == split
        files = [f for f, k in zip(self.files, m) if k] if self.files else []
        return FieldDataset(self.values[m], self.corr_len[m], self.split[m], files)

    def counts(self) -> dict[tuple[str, float], int]:
        out = {}
        for s in SPLITS:
            for ell in np.unique(self.corr_len):
                out[(s, float(ell))] = int(np.sum((self.split == s) & (self.corr_len == ell)))
        return out


def assign_splits(n: int, fractions, rng: np.random.Generator) -> np.ndarray:
    """Shuffle ``n`` items into train/val/test with the given fractions."""
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    return labels[rng.permutation(n)]


def generate_dataset(grid: GridSpec, corr_lengths, per_length: int, fractions,
                     master_seed: int, variance: float = 1.0, mean: float = 0.0) -> FieldDataset:
    """Full-expansion KLE draws, ``per_length`` fields for each correlation length.

    Splits are assigned independently within each correlation length, so every
    split holds the same number of fields per length.
    """
    vals, ells, splits = [], [], []
    for ell in corr_lengths:
        basis = kle_decompose(grid, CovarianceModel.isotropic(ell, variance, mean))
        rng = make_rng(master_seed, f"dataset:{float(ell):g}")
        theta = rng.standard_normal((per_length, basis.size))
        vals.append(synthesize_many(basis, theta).reshape(per_length, *grid.shape))
        ells.append(np.full(per_length, float(ell)))
        splits.append(assign_splits(per_length, fractions,
                                    make_rng(master_seed, f"split:{float(ell):g}")))
    return FieldDataset(np.concatenate(vals), np.concatenate(ells), np.concatenate(splits))


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint, history):
        super().__init__(msg)
        self.checkpoint = checkpoint
        self.history = history


def evaluate(params: VAEParams, x, eps, beta, batch_size=250):
    """Inference-mode losses over a whole split, averaged per field."""
    rec = reg = tot = 0.0
    n = x.shape[0]
    for s in range(0, n, batch_size):
        ls = losses(params, x[s:s + batch_size], eps[s:s + batch_size], beta, mode="infer")
        k = min(batch_size, n - s)
        rec += ls.rec * k
        reg += ls.reg * k
        tot += ls.total * k
    return rec / n, reg / n, tot / n


def train(dataset: FieldDataset, arch: ArchitectureSpec, cfg: TrainConfig,
          params: VAEParams | None = None):
    """Minibatch Adam on the beta-weighted ELBO.

    Returns the parameters with the best validation total loss and the
    per-epoch history. A non-finite loss raises :class:`TrainingDiverged`
    carrying the best checkpoint so far.
    """
    tr = dataset.subset("train")
    va = dataset.subset("val")
    if len(tr) == 0:
        raise ValueError("training split is empty")
    if tr.values.shape[1:] != arch.input_shape:
        raise ValueError(f"fields have shape {tr.values.shape[1:]}, "
                         f"architecture expects {arch.input_shape}")
    params = init_params(arch, make_rng(cfg.seed, "vae:init")) if params is None else params
    opt = Adam(cfg.learning_rate)
    shuffle_rng = make_rng(cfg.seed, "vae:shuffle")
    noise_rng = make_rng(cfg.seed, "vae:noise")
    val_eps = make_rng(cfg.seed, "vae:val-noise").standard_normal((len(va), arch.latent_dim))

    history = []
    best, best_val = params.copy(), np.inf
    n = len(tr)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            eps = noise_rng.standard_normal((idx.size, arch.latent_dim))
            try:
                ls, grads, upd = loss_and_grads(params, tr.values[idx], eps, cfg.beta)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, history) from exc
            opt.step(params.arrays, grads)
            params.arrays.update(upd)
            sums += np.array(ls) * idx.size
        row = {"epoch": epoch, "train_rec": sums[0] / n, "train_kl": sums[1] / n,
               "train_tot": sums[2] / n}
        if len(va):
            try:
                vr, vk, vt = evaluate(params, va.values, val_eps, cfg.beta)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best, history) from exc
        else:
            vr = vk = vt = float("nan")
        row.update(val_rec=vr, val_kl=vk, val_tot=vt)
        history.append(row)
        score = vt if len(va) else row["train_tot"]
        if score < best_val:
            best_val, best = score, params.copy()
        log.info("epoch %d: train %.4g (rec %.4g, kl %.4g) val %.4g", epoch,
                 row["train_tot"], row["train_rec"], row["train_kl"], vt)
    return best, history


def reconstruct(params: VAEParams, x, batch_size=250) -> np.ndarray:
    """Decode the latent mean (zero noise), inference mode."""
    out = []
    for s in range(0, x.shape[0], batch_size):
        lat = encode(params, x[s:s + batch_size], None, "infer")
        out.append(decode(params, lat.mu)[..., 0])
    return np.concatenate(out)


@dataclass
class ErrorHistogram:
    corr_len: float
    errors: np.ndarray
    mean: float
    std: float
    counts: np.ndarray
    edges: np.ndarray


def relative_errors(x, xr) -> np.ndarray:
    x = x.reshape(x.shape[0], -1)
    xr = xr.reshape(xr.shape[0], -1)
    return np.sqrt(np.sum((x - xr) ** 2, axis=1) / np.sum(x ** 2, axis=1))


def test_report(params, dataset: FieldDataset, bins: int = 30) -> dict[float, ErrorHistogram]:
    """Per-field relative reconstruction error grouped by correlation length.

    ``params`` may be a :class:`VAEParams` or any callable mapping a batch of
    fields to reconstructions.
    """
    recon = params if callable(params) else (lambda x: reconstruct(params, x))
    errs = relative_errors(dataset.values, recon(dataset.values))
    lo, hi = (float(errs.min()), float(errs.max())) if errs.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    report = {}
    for ell in np.unique(dataset.corr_len):
        e = errs[dataset.corr_len == ell]
        counts, _ = np.histogram(e, bins=edges)
        report[float(ell)] = ErrorHistogram(float(ell), e, float(e.mean()),
                                            float(e.std(ddof=1)) if e.size > 1 else 0.0,
                                            counts, edges)
    return report
