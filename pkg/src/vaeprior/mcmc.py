"""
Metropolis sampling of latent coordinates with pCN proposals.

The prior on the latent vector is N(0, I); the pCN proposal leaves it
invariant, so the acceptance probability only involves the likelihood ratio.
The latent vector is mapped to permeability either through a truncated KLE
or through a trained VAE decoder.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .field import FieldSample, GridSpec, KLEBasis, synthesize, to_permeability
from .flow import FlowSolverError, FlowSystem, sample_sensors
from .vae.model import VAEParams, decode

log = logging.getLogger(__name__)


class PriorParameterization(Protocol):
    dim: int

    def gaussian(self, theta) -> FieldSample: ...

    def permeability(self, theta) -> FieldSample: ...


@dataclass
class KLEPrior:
    basis: KLEBasis
    m: int
    psi: float = 9.87e-14
    rho: float = 1.0

    def __post_init__(self):
        if not 1 <= self.m <= self.basis.n_stored:
            raise ValueError(f"mode count {self.m} outside 1..{self.basis.n_stored}")

    @property
    def dim(self) -> int:
        return self.m

    @property
    def grid(self) -> GridSpec:
        return self.basis.grid

    def gaussian(self, theta) -> FieldSample:
        theta = _check_dim(theta, self.dim)
        return synthesize(self.basis, theta, self.m)

    def permeability(self, theta) -> FieldSample:
        return to_permeability(self.gaussian(theta), self.psi, self.rho)


@dataclass
class VAEPrior:
    params: VAEParams
    grid: GridSpec
    psi: float = 9.87e-14
    rho: float = 1.0

    def __post_init__(self):
        if self.params.arch.input_shape != self.grid.shape:
            raise ValueError(f"VAE field shape {self.params.arch.input_shape} does not "
                             f"match the grid {self.grid.shape}")

    @property
    def dim(self) -> int:
        return self.params.arch.latent_dim

    def gaussian(self, theta) -> FieldSample:
        theta = _check_dim(theta, self.dim)
        return FieldSample(self.grid, decode(self.params, theta)[..., 0].ravel(), "gaussian")

    def permeability(self, theta) -> FieldSample:
        return to_permeability(self.gaussian(theta), self.psi, self.rho)


def _check_dim(theta, n):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n,):
        raise ValueError(f"latent vector has shape {theta.shape}, expected ({n},)")
    return theta


def latent_to_permeability(prior: PriorParameterization, theta) -> FieldSample:
    return prior.permeability(theta)


@dataclass
class LikelihoodSpec:
    d_ref: np.ndarray
    sigma2: float = 1e-3

    def __post_init__(self):
        self.d_ref = np.asarray(self.d_ref, dtype=float)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not np.sum(self.d_ref ** 2) > 0:
            raise ValueError("reference data has zero norm")


def relative_misfit(d_ref, d_sim) -> np.ndarray:
    """Squared misfit normalized by the squared reference norm (last axis)."""
    d_ref = np.asarray(d_ref, dtype=float)
    d_sim = np.asarray(d_sim, dtype=float)
    if d_sim.shape[-1] != d_ref.shape[-1]:
        raise ValueError("simulated and reference data lengths differ")
    den = np.sum(d_ref ** 2)
    if not den > 0:
        raise ValueError("reference data has zero norm")
    return np.sum((d_ref - d_sim) ** 2, axis=-1) / den


def log_likelihood(spec: LikelihoodSpec, d_sim) -> float:
    return -float(relative_misfit(spec.d_ref, d_sim)) / spec.sigma2


@dataclass
class ForwardModel:
    """Permeability to sensor pressures."""

    flow: FlowSystem
    sensor_cells: np.ndarray

    def __call__(self, perm: FieldSample) -> np.ndarray:
        return sample_sensors(self.flow.solve(perm), self.sensor_cells)


@dataclass
class InverseProblem:
    prior: PriorParameterization
    forward: ForwardModel
    likelihood: LikelihoodSpec

    def simulate(self, theta) -> np.ndarray:
        return self.forward(self.prior.permeability(theta))

    def __call__(self, theta) -> float:
        return log_likelihood(self.likelihood, self.simulate(theta))


@dataclass
class ChainConfig:
    iterations: int = 300_000
    burn_in: int = 10_000
    gamma: float = 0.1
    thin: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("burn_in must lie in [0, iterations)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class ChainState:
    theta: np.ndarray
    loglik: float


@dataclass
class ChainTrace:
    """Stored records of one chain.

    Record ``t`` (1-based) is the state after move ``t``; ``accepted[k]`` says
    whether that move was accepted. ``initial_theta`` is the prior draw the
    chain started from. Counters cover every move, stored or thinned away.
    """

    seed: int
    n: int
    iterations: int
    burn_in: int
    thin: int
    steps: np.ndarray
    thetas: np.ndarray
    logliks: np.ndarray
    accepted: np.ndarray
    initial_theta: np.ndarray | None = None
    initial_loglik: float = float("nan")
    n_accepted: int = 0
    solver_failures: int = 0
    wall_time: float = 0.0
    error: str | None = None

    @property
    def n_moves(self) -> int:
        return self.iterations - self.burn_in

    @property
    def aborted(self) -> bool:
        return self.error is not None

    def post_burn_in(self) -> np.ndarray:
        return self.thetas[self.steps > self.burn_in]


def pcn_propose(theta, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """``sqrt(1 - gamma^2) * theta + gamma * eps`` with ``eps ~ N(0, I)``."""
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    theta = np.asarray(theta, dtype=float)
    eps = rng.standard_normal(theta.shape)
    return np.sqrt(1.0 - gamma * gamma) * theta + gamma * eps


def metropolis_step(state: ChainState, loglik_fn: Callable, gamma: float,
                    rng: np.random.Generator) -> tuple[ChainState, bool, bool]:
    """One Metropolis move; returns ``(new_state, accepted, solver_failed)``.

    The uniform variate is drawn on every step so the random stream does not
    depend on solver failures. A failed forward solve counts as a rejection.
    """
    xi = pcn_propose(state.theta, gamma, rng)
    u = rng.random()
    try:
        ll = float(loglik_fn(xi))
    except (FlowSolverError, ValueError, FloatingPointError):
        return state, False, True
    if np.log(u) < ll - state.loglik:
        return ChainState(xi, ll), True, False
    return state, False, False


def run_chain(cfg: ChainConfig, loglik_fn: Callable, dim: int, seed: int,
              trace_path: str | Path | None = None, progress_every: int = 0,
              label: str = "chain") -> ChainTrace:
    from .fileio import TraceWriter

    rng = np.random.Generator(np.random.Philox(seed))
    t0 = time.perf_counter()
    for _ in range(100):
        theta0 = rng.standard_normal(dim)
        try:
            ll0 = float(loglik_fn(theta0))
            break
        except (FlowSolverError, ValueError, FloatingPointError):
            continue
    else:
        raise FlowSolverError("no prior draw produced a solvable forward model")
    state = ChainState(theta0, ll0)

    n_store = cfg.iterations // cfg.thin
    steps = np.zeros(n_store, dtype=np.int64)
    thetas = np.zeros((n_store, dim))
    logliks = np.zeros(n_store)
    accepted = np.zeros(n_store, dtype=bool)
    n_acc = failures = k = 0
    writer = TraceWriter(trace_path, dim, cfg.iterations, cfg.thin, seed) if trace_path else None
    try:
        for t in range(1, cfg.iterations + 1):
            state, acc, failed = metropolis_step(state, loglik_fn, cfg.gamma, rng)
            failures += failed
            if acc and t > cfg.burn_in:
                n_acc += 1
            if t % cfg.thin == 0:
                steps[k], thetas[k], logliks[k], accepted[k] = t, state.theta, state.loglik, acc
                if writer:
                    writer.append(t, acc, state.loglik, state.theta)
                k += 1
            if progress_every and t % progress_every == 0:
                moves = max(t - cfg.burn_in, 0)
                ar = 100.0 * n_acc / moves if moves else float("nan")
                log.info("%s: iteration %d/%d, AR %.1f%%", label, t, cfg.iterations, ar)
        if writer:
            writer.close()
    except BaseException:
        if writer:
            writer.abort()
        raise
    return ChainTrace(seed, dim, cfg.iterations, cfg.burn_in, cfg.thin, steps, thetas, logliks,
                      accepted, theta0, ll0, n_acc, failures, time.perf_counter() - t0)


def _chain_job(args):
    i, cfg, loglik_fn, dim, seed, trace_path, progress_every = args
    try:
        return run_chain(cfg, loglik_fn, dim, seed, trace_path, progress_every, f"chain {i}")
    except Exception as exc:  # an aborted chain must not stop the ensemble
        log.error("chain %d aborted: %s", i, exc)
        empty = np.zeros((0, dim))
        return ChainTrace(seed, dim, cfg.iterations, cfg.burn_in, cfg.thin,
                          np.zeros(0, np.int64), empty, np.zeros(0), np.zeros(0, bool),
                          error=f"{type(exc).__name__}: {exc}")


def chain_seed(master_seed: int, index: int) -> int:
    from .seeding import derive_seed
    return derive_seed(master_seed, f"chain:{index}")


def run_ensemble(n_chains: int, cfg: ChainConfig, problem: Callable, dim: int,
                 master_seed: int, trace_dir: str | Path | None = None,
                 workers: int = 1, progress_every: int = 0) -> list[ChainTrace]:
    """Run independent chains; chain ``i`` uses the stream labeled ``chain:i``.

    Results are identical for any ``workers`` value.
    """
    if n_chains < 1:
        raise ValueError("need at least one chain")
    jobs = []
    for i in range(n_chains):
        path = Path(trace_dir) / f"chain_{i:02d}.trc" if trace_dir else None
        jobs.append((i, cfg, problem, dim, chain_seed(master_seed, i), path, progress_every))
    if trace_dir:
        os.makedirs(trace_dir, exist_ok=True)
    if workers <= 1 or n_chains == 1:
        return [_chain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, n_chains)) as pool:
        return list(pool.map(_chain_job, jobs))
