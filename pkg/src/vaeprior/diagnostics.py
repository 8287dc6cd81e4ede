"""
Convergence and posterior-quality statistics for chain ensembles.

Includes the Brooks-Gelman multivariate potential scale reduction factor,
acceptance rates, relative data/field errors and the asymptotic two-sample
Kolmogorov-Smirnov test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .field import FieldSample, GridSpec
from .mcmc import ChainTrace, relative_misfit


@dataclass
class MPSRFSeries:
    checkpoints: np.ndarray
    values: np.ndarray
    n_samples: np.ndarray
    threshold: float = 1.2
    regularized: bool = False

    @property
    def convergence_iteration(self) -> int | None:
        """First checkpoint with R-hat below the threshold, or None."""
        below = np.nonzero(self.values < self.threshold)[0]
        return int(self.checkpoints[below[0]]) if below.size else None


@dataclass
class ErrorSummary:
    values: np.ndarray
    mean: float
    std: float
    count: int

    @classmethod
    def of(cls, values) -> "ErrorSummary":
        v = np.asarray(values, dtype=float)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        return cls(v, float(v.mean()), std, int(v.size))


@dataclass
class KSResult:
    statistic: float
    pvalue: float
    n_a: int
    n_b: int


def acceptance_rate(trace: ChainTrace) -> float:
    """Accepted post-burn-in moves as a percentage."""
    if trace.n_moves <= 0:
        raise ValueError("chain has no post-burn-in moves")
    return 100.0 * trace.n_accepted / trace.n_moves


def mean_acceptance_rate(traces) -> float:
    return float(np.mean([acceptance_rate(t) for t in traces]))


def _chain_arrays(chains, burn_in):
    out = []
    for c in chains:
        if isinstance(c, ChainTrace):
            steps, x = c.steps, c.thetas
            b = c.burn_in if burn_in is None else burn_in
        else:
            x = np.asarray(c, dtype=float)
            if x.ndim == 1:
                x = x[:, None]
            steps = np.arange(1, x.shape[0] + 1)
            b = burn_in or 0
        keep = steps > b
        out.append((steps[keep], x[keep]))
    return out


def mpsrf(chains, checkpoints=None, every: int = 1000, burn_in: int | None = None,
          threshold: float = 1.2) -> MPSRFSeries:
    """Multivariate PSRF on cumulative post-burn-in samples at each checkpoint.

    ``chains`` are :class:`ChainTrace` objects or ``(T, p)`` arrays whose row
    ``t`` is iteration ``t + 1``. At a checkpoint every chain contributes the
    same number of samples (the minimum available).
    """
    data = _chain_arrays(chains, burn_in)
    m = len(data)
    if m < 2:
        raise ValueError("MPSRF needs at least two chains")
    p = data[0][1].shape[1]
    if any(x.shape[1] != p for _, x in data):
        raise ValueError("chains have different latent dimensions")
    last = min(int(s[-1]) if s.size else 0 for s, _ in data)
    first = max(int(s[0]) if s.size else 0 for s, _ in data)
    if checkpoints is None:
        start = (first - 1) // every * every + every
        checkpoints = np.arange(start, last + 1, every)
        if checkpoints.size == 0 or checkpoints[-1] != last:
            checkpoints = np.append(checkpoints, last)
    checkpoints = np.asarray(checkpoints, dtype=np.int64)

    # common shift keeps the running sums well conditioned
    shift = np.mean([x[: min(len(x), 100)].mean(axis=0) for _, x in data], axis=0)
    s1 = np.zeros((m, p))
    s2 = np.zeros((m, p, p))
    used = np.zeros(m, dtype=np.int64)
    cps, vals, ns = [], [], []
    regularized = False
    for c in checkpoints:
        n = min(int(np.searchsorted(s, c, side="right")) for s, _ in data)
        if n < 2:
            continue
        for j, (_, x) in enumerate(data):
            blk = x[used[j]:n] - shift
            s1[j] += blk.sum(axis=0)
            s2[j] += blk.T @ blk
            used[j] = n
        mu = s1 / n
        W = np.mean([(s2[j] - n * np.outer(mu[j], mu[j])) / (n - 1) for j in range(m)], axis=0)
        dev = mu - mu.mean(axis=0)
        Bn = dev.T @ dev / (m - 1)
        if not np.any(Bn):
            lam = 0.0
        else:
            try:
                sla.cholesky(W)
            except sla.LinAlgError:
                W = W + 1e-12 * max(np.trace(W) / p, 1e-300) * np.eye(p)
                regularized = True
            lam = max(float(sla.eigh(Bn, W, eigvals_only=True)[-1]), 0.0)
        cps.append(int(c))
        vals.append((n - 1) / n + (m + 1) / m * lam)
        ns.append(n)
    return MPSRFSeries(np.array(cps), np.array(vals), np.array(ns), threshold, regularized)


def data_relative_error(d_ref, d_sims) -> ErrorSummary:
    """Root of the normalized squared misfit for each posterior sample."""
    d_sims = np.atleast_2d(np.asarray(d_sims, dtype=float))
    return ErrorSummary.of(np.sqrt(relative_misfit(d_ref, d_sims)))


def field_relative_error(y_ref, fields) -> ErrorSummary:
    ref = y_ref.values if isinstance(y_ref, FieldSample) else np.asarray(y_ref, float)
    arr = _field_matrix(fields)
    if arr.shape[1] != ref.size:
        raise ValueError("posterior fields do not match the reference grid")
    return ErrorSummary.of(np.sqrt(relative_misfit(ref, arr)))


def _field_matrix(fields) -> np.ndarray:
    if isinstance(fields, FieldSample):
        return fields.values[None]
    if isinstance(fields, (list, tuple)) and fields and isinstance(fields[0], FieldSample):
        return np.stack([f.values for f in fields])
    return np.atleast_2d(np.asarray(fields, dtype=float))


def kolmogorov_sf(x: float, terms: int = 100) -> float:
    """Survival function of the Kolmogorov distribution, ``P(K > x)``."""
    if x < 0.1:
        return 1.0  # 1 - P(K <= x) differs from 1 by less than 1e-200
    k = np.arange(1, terms + 1)
    if x < 1.18:
        # Jacobi-theta form converges fast for small x
        s = np.sum(np.exp(-((2 * k - 1) ** 2) * np.pi ** 2 / (8.0 * x * x)))
        p = 1.0 - np.sqrt(2.0 * np.pi) / x * s
    else:
        p = 2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k * k * x * x))
    return float(min(max(p, 0.0), 1.0))


def ks_two_sample(a, b) -> KSResult:
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    na, nb = a.size, b.size
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / na
    fb = np.searchsorted(b, pooled, side="right") / nb
    d = float(np.max(np.abs(fa - fb)))
    ne = na * nb / (na + nb)
    return KSResult(d, kolmogorov_sf(np.sqrt(ne) * d), na, nb)


def posterior_mean_field(samples, grid: GridSpec | None = None) -> FieldSample:
    arr = _field_matrix(samples)
    if arr.shape[0] < 1:
        raise ValueError("need at least one sample")
    if grid is None:
        if isinstance(samples, FieldSample):
            grid = samples.grid
        elif isinstance(samples, (list, tuple)) and isinstance(samples[0], FieldSample):
            grid = samples[0].grid
        else:
            raise ValueError("grid is required for raw arrays")
    return FieldSample(grid, arr.mean(axis=0), "gaussian")


def pool_posterior(traces, tail: int, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Pool the last ``tail`` stored post-burn-in states of each chain and draw
    ``n_samples`` of them uniformly without replacement."""
    pooled = np.concatenate([t.post_burn_in()[-tail:] for t in traces if not t.aborted])
    if n_samples > pooled.shape[0]:
        raise ValueError(f"requested {n_samples} samples from a pool of {pooled.shape[0]}")
    idx = np.sort(rng.choice(pooled.shape[0], size=n_samples, replace=False))
    return pooled[idx]
