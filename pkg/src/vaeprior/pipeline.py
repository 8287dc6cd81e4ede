"""
Pipeline stages driven by an :class:`~vaeprior.config.ExperimentConfig`.

Every stage reads its inputs from files under ``output_dir`` and writes whole
files renamed into place, so stages can be rerun independently. Layout::

    reference/   y_ref.fld kappa_ref.fld pressure_ref.fld sensors.csv wells.csv reference.json
    dataset/     manifest.csv fields/000000.fld ...
    vae/         model.vae history.csv layers.csv test_errors.csv test_histogram.csv
    kle/         basis_<ell>.klb
    mcmc/<exp>/  chain_00.trc ... summary.csv summary.json
    diagnostics/<exp>/  mpsrf.csv ar.csv dre.csv rey.csv ks.csv summary.csv mean_field.fld
    diagnostics/table.csv
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np

from . import diagnostics as dg
from . import fileio
from .config import ConfigError, ExperimentConfig, ExperimentSection
from .field import (CovarianceModel, FieldSample, GridSpec, kle_decompose, synthesize,
                    to_permeability, truncate)
from .flow import (FlowSystem, FluidAndRock, SensorLayout, five_spot_wells, mass_balance,
                   sample_sensors)
from .mcmc import (ChainConfig, ForwardModel, InverseProblem, KLEPrior, LikelihoodSpec,
                   VAEPrior, run_ensemble)
from .seeding import make_rng
from .vae.model import ArchitectureSpec, layer_parameter_counts
from .vae.train import (FieldDataset, TrainConfig, TrainingDiverged, generate_dataset,
                        test_report, train)

log = logging.getLogger(__name__)


class MissingInput(RuntimeError):
    pass


# ---------------------------------------------------------------- shared setup

def grid_of(cfg: ExperimentConfig) -> GridSpec:
    g = cfg.grid
    return GridSpec(g.extent_x, g.extent_y, g.nx, g.ny)


def covariance_of(cfg: ExperimentConfig, corr_len: float) -> CovarianceModel:
    c = cfg.covariance
    return CovarianceModel.isotropic(corr_len, c.variance, c.mean)


def flow_of(cfg: ExperimentConfig, grid: GridSpec) -> FlowSystem:
    f = cfg.flow
    wells = five_spot_wells(grid, f.rate, f.bhp, f.well_radius)
    return FlowSystem(grid, wells, FluidAndRock(f.viscosity, f.porosity), f.thickness,
                      f.solver, f.tol)


def sensors_of(cfg: ExperimentConfig, grid: GridSpec) -> SensorLayout:
    return SensorLayout.lattice(grid, cfg.flow.sensors_per_axis)


def out_dir(cfg: ExperimentConfig, *parts) -> Path:
    return Path(cfg.output_dir).joinpath(*parts)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found at {path}")
    return path


def arch_of(cfg: ExperimentConfig, grid: GridSpec) -> ArchitectureSpec:
    v = cfg.vae
    return ArchitectureSpec(grid.shape, v.latent_dim, v.filters, v.kernel, (1, 2, 1),
                            v.dense_units, v.bn_momentum, v.bn_eps)


def model_path(cfg: ExperimentConfig, exp: ExperimentSection) -> Path:
    p = Path(exp.model)
    return p if p.is_absolute() else out_dir(cfg, p)


def check_inputs(cfg: ExperimentConfig, experiments) -> None:
    """Config-referenced files must exist before any work starts."""
    for e in experiments:
        if e.prior == "vae" and not model_path(cfg, e).exists():
            raise ConfigError(f"experiment {e.name}: VAE model {model_path(cfg, e)} not found")


def select(cfg: ExperimentConfig, names) -> list[ExperimentSection]:
    return [cfg.experiment(n) for n in names] if names else list(cfg.experiments)


# ---------------------------------------------------------------- gen-reference

def gen_reference(cfg: ExperimentConfig) -> dict:
    grid = grid_of(cfg)
    ell = cfg.covariance.reference
    basis = kle_decompose(grid, covariance_of(cfg, ell))
    theta = make_rng(cfg.seed, "reference").standard_normal(basis.size)
    y = synthesize(basis, theta)
    kappa = to_permeability(y, cfg.transform.psi, cfg.transform.rho)
    sol = flow_of(cfg, grid).solve(kappa)
    mb = mass_balance(sol)
    layout = sensors_of(cfg, grid)
    cells = layout.cells(grid)
    d_clean = sample_sensors(sol, cells)
    d = d_clean
    if cfg.likelihood.noise_std > 0:
        noise = make_rng(cfg.seed, "reference-noise").standard_normal(d.size)
        d = d_clean + cfg.likelihood.noise_std * noise

    ref = out_dir(cfg, "reference")
    fileio.write_field(ref / "y_ref.fld", y)
    fileio.write_field(ref / "kappa_ref.fld", kappa)
    fileio.write_field(ref / "pressure_ref.fld", sol.as_field())
    fileio.write_csv(ref / "sensors.csv",
                     ["sensor", "x", "y", "cell", "pressure", "pressure_clean"],
                     [(i, x, yy, c, p, p0) for i, ((x, yy), c, p, p0)
                      in enumerate(zip(layout.positions, cells, d, d_clean))])
    fileio.write_csv(ref / "wells.csv", ["name", "cell", "control", "value", "flux_m3_per_day"],
                     [(w.name, w.cell, w.control, w.value, q * 86400.0)
                      for w, q in zip(sol.wells, sol.well_fluxes)])
    meta = {"seed": cfg.seed, "corr_len": ell, "noise_std": cfg.likelihood.noise_std,
            "n_cells": grid.n_cells, "modes_for_energy": truncate(basis, 0.98),
            "injected_m3_per_day": sol.injected * 86400.0,
            "produced_m3_per_day": sol.produced * 86400.0,
            "mass_balance_rel": abs(mb.net) / mb.total_injection}
    fileio.write_json(ref / "reference.json", meta)
    log.info("reference: %d sensors, injection %.6g m3/day, production %.6g m3/day",
             len(d), meta["injected_m3_per_day"], meta["produced_m3_per_day"])
    return meta


def load_reference(cfg: ExperimentConfig, grid: GridSpec):
    ref = out_dir(cfg, "reference")
    rows = fileio.read_csv(_require(ref / "sensors.csv", "reference sensor data"))
    d_ref = np.array([float(r["pressure"]) for r in rows])
    cells = np.array([int(r["cell"]) for r in rows], dtype=np.int64)
    y_ref = fileio.read_field(_require(ref / "y_ref.fld", "reference field"), grid)
    return d_ref, cells, y_ref


# ---------------------------------------------------------------- gen-dataset

def gen_dataset(cfg: ExperimentConfig) -> FieldDataset:
    grid = grid_of(cfg)
    c = cfg.covariance
    ds = generate_dataset(grid, c.corr_lengths, cfg.dataset.per_length, cfg.dataset.splits,
                          cfg.seed, c.variance, c.mean)
    root = out_dir(cfg, "dataset")
    rows = []
    for i in range(len(ds)):
        name = f"fields/{i:06d}.fld"
        fileio.write_field(root / name, FieldSample(grid, ds.values[i].ravel(), "gaussian"))
        rows.append((i, name, float(ds.corr_len[i]), ds.split[i]))
    fileio.write_csv(root / "manifest.csv", ["id", "file", "corr_len", "split"], rows)
    for (split, ell), n in sorted(ds.counts().items()):
        log.info("dataset: %s ell=%g: %d fields", split, ell, n)
    return ds


def load_dataset(cfg: ExperimentConfig, grid: GridSpec) -> FieldDataset:
    root = out_dir(cfg, "dataset")
    rows = fileio.read_csv(_require(root / "manifest.csv", "dataset manifest"))
    values = np.empty((len(rows), *grid.shape))
    for k, r in enumerate(rows):
        values[k] = fileio.read_field(root / r["file"], grid).as_image()
    return FieldDataset(values, [float(r["corr_len"]) for r in rows],
                        [r["split"] for r in rows], [r["file"] for r in rows])


# ---------------------------------------------------------------- train-vae

def train_vae(cfg: ExperimentConfig):
    grid = grid_of(cfg)
    ds = load_dataset(cfg, grid)
    arch = arch_of(cfg, grid)
    root = out_dir(cfg, "vae")
    layers = layer_parameter_counts(arch)
    for name, n in layers:
        log.info("layer %-24s %d parameters", name, n)
    fileio.write_csv(root / "layers.csv", ["layer", "parameters"], layers)
    v = cfg.vae
    tcfg = TrainConfig(v.batch_size, v.epochs, v.learning_rate, v.beta, cfg.dataset.splits,
                       cfg.seed)
    try:
        params, history = train(ds, arch, tcfg)
    except TrainingDiverged as exc:
        _write_history(root / "history.csv", exc.history)
        fileio.write_vae(root / "checkpoint.vae", exc.checkpoint, v.dtype)
        raise
    _write_history(root / "history.csv", history)
    fileio.write_vae(root / "model.vae", params, v.dtype)

    report = test_report(params, ds.subset("test"))
    fileio.write_csv(root / "test_errors.csv", ["corr_len", "mean", "std", "count"],
                     [(h.corr_len, h.mean, h.std, h.errors.size) for h in report.values()])
    rows = []
    for h in report.values():
        for k, n in enumerate(h.counts):
            rows.append((h.corr_len, h.edges[k], h.edges[k + 1], int(n)))
    fileio.write_csv(root / "test_histogram.csv", ["corr_len", "lo", "hi", "count"], rows)
    return params, history, report


_HISTORY_COLS = ["epoch", "train_rec", "train_kl", "train_tot", "val_rec", "val_kl", "val_tot"]


def _write_history(path, history):
    fileio.write_csv(path, _HISTORY_COLS, [[row[c] for c in _HISTORY_COLS] for row in history])


# ---------------------------------------------------------------- run-mcmc

def build_prior(cfg: ExperimentConfig, exp: ExperimentSection, grid: GridSpec):
    t = cfg.transform
    if exp.prior == "vae":
        return VAEPrior(fileio.read_vae(model_path(cfg, exp)), grid, t.psi, t.rho)
    model = covariance_of(cfg, exp.corr_len)
    path = out_dir(cfg, "kle", f"basis_{exp.corr_len:g}.klb")
    basis = kle_decompose(grid, model)
    m = truncate(basis, exp.energy)
    fileio.write_basis(path, basis, m)
    return KLEPrior(basis.truncated(m), m, t.psi, t.rho)


def build_problem(cfg: ExperimentConfig, exp: ExperimentSection, grid: GridSpec, d_ref, cells):
    prior = build_prior(cfg, exp, grid)
    fwd = ForwardModel(flow_of(cfg, grid), cells)
    return InverseProblem(prior, fwd, LikelihoodSpec(d_ref, cfg.likelihood.sigma2))


def chain_config(cfg: ExperimentConfig) -> ChainConfig:
    m = cfg.mcmc
    return ChainConfig(m.iterations, m.burn_in, m.gamma, m.thin)


def run_mcmc(cfg: ExperimentConfig, names=None) -> dict:
    exps = select(cfg, names)
    check_inputs(cfg, exps)
    grid = grid_of(cfg)
    d_ref, cells, _ = load_reference(cfg, grid)
    out = {}
    for exp in exps:
        problem = build_problem(cfg, exp, grid, d_ref, cells)
        dim = problem.prior.dim
        log.info("%s: %d chains x %d iterations, latent dimension %d", exp.name,
                 cfg.mcmc.chains, cfg.mcmc.iterations, dim)
        tdir = out_dir(cfg, "mcmc", exp.name)
        t0 = time.perf_counter()
        traces = run_ensemble(cfg.mcmc.chains, chain_config(cfg), problem, dim, cfg.seed,
                              tdir, cfg.threads, cfg.mcmc.progress_every)
        rows = []
        for i, tr in enumerate(traces):
            ar = dg.acceptance_rate(tr) if not tr.aborted else float("nan")
            rows.append((i, tr.seed, dim, ar, tr.n_accepted, tr.n_moves, tr.solver_failures,
                         tr.wall_time, "aborted" if tr.aborted else "ok", tr.error or ""))
        fileio.write_csv(tdir / "summary.csv",
                         ["chain", "seed", "dim", "acceptance_rate", "n_accepted", "n_moves",
                          "solver_failures", "wall_time", "status", "error"], rows)
        fileio.write_json(tdir / "summary.json", {
            "experiment": exp.name, "dim": dim, "chains": cfg.mcmc.chains,
            "iterations": cfg.mcmc.iterations, "burn_in": cfg.mcmc.burn_in,
            "gamma": cfg.mcmc.gamma, "sigma2": cfg.likelihood.sigma2,
            "wall_time": time.perf_counter() - t0})
        aborted = [i for i, tr in enumerate(traces) if tr.aborted]
        if aborted:
            raise RuntimeError(f"{exp.name}: chains {aborted} aborted")
        out[exp.name] = traces
    return out


def load_traces(cfg: ExperimentConfig, name: str):
    tdir = out_dir(cfg, "mcmc", name)
    files = [tdir / f"chain_{i:02d}.trc" for i in range(cfg.mcmc.chains)]
    traces = [fileio.read_trace(_require(f, f"{name} trace"), cfg.mcmc.burn_in) for f in files]
    dims = {t.n for t in traces}
    if len(dims) != 1:
        raise ValueError(f"{name}: chains have different latent dimensions {sorted(dims)}")
    return traces


# ---------------------------------------------------------------- diagnose

def _ks_draw(values, size, seed, label):
    rng = make_rng(seed, label)
    size = min(size, values.size)
    return rng.choice(values, size=size, replace=False)


def _read_errors(path):
    return np.array([float(r["value"]) for r in fileio.read_csv(path)])


def diagnose(cfg: ExperimentConfig, names=None, baseline: str | None = None) -> dict:
    exps = select(cfg, names)
    check_inputs(cfg, exps)
    grid = grid_of(cfg)
    d_ref, cells, y_ref = load_reference(cfg, grid)
    D = cfg.diagnostics
    base = baseline or D.baseline
    results = {}
    for exp in exps:
        traces = load_traces(cfg, exp.name)
        problem = build_problem(cfg, exp, grid, d_ref, cells)
        prior = problem.prior
        if prior.dim != traces[0].n:
            raise ValueError(f"{exp.name}: traces have dimension {traces[0].n}, "
                             f"prior has {prior.dim}")
        series = dg.mpsrf(traces, every=D.every, threshold=D.threshold)
        ars = [dg.acceptance_rate(t) for t in traces]

        thetas = dg.pool_posterior(traces, D.tail, D.posterior_samples,
                                   make_rng(cfg.seed, f"posterior:{exp.name}"))
        post_y = np.stack([prior.gaussian(t).values for t in thetas])
        post_d = np.stack([problem.simulate(t) for t in thetas])
        prior_th = make_rng(cfg.seed, f"prior-predictive:{exp.name}").standard_normal(
            (D.posterior_samples, prior.dim))
        prior_y = np.stack([prior.gaussian(t).values for t in prior_th])
        prior_d = np.stack([problem.simulate(t) for t in prior_th])
        dre = dg.data_relative_error(d_ref, post_d)
        rey = dg.field_relative_error(y_ref, post_y)
        p_dre = dg.data_relative_error(d_ref, prior_d)
        p_rey = dg.field_relative_error(y_ref, prior_y)
        mean = dg.posterior_mean_field(post_y[: D.mean_field_samples], grid)

        root = out_dir(cfg, "diagnostics", exp.name)
        fileio.write_csv(root / "mpsrf.csv", ["checkpoint", "rhat", "n_samples"],
                         zip(series.checkpoints, series.values, series.n_samples))
        fileio.write_csv(root / "ar.csv", ["chain", "acceptance_rate"], enumerate(ars))
        fileio.write_csv(root / "dre.csv", ["sample_id", "value"], enumerate(dre.values))
        fileio.write_csv(root / "rey.csv", ["sample_id", "value"], enumerate(rey.values))
        fileio.write_field(root / "mean_field.fld", mean)
        results[exp.name] = {
            "experiment": exp.name, "dim": prior.dim,
            "acceptance_rate": float(np.mean(ars)),
            "convergence_iteration": series.convergence_iteration,
            "final_rhat": float(series.values[-1]) if series.values.size else float("nan"),
            "dre_mean": dre.mean, "dre_std": dre.std, "rey_mean": rey.mean, "rey_std": rey.std,
            "prior_dre_mean": p_dre.mean, "prior_rey_mean": p_rey.mean,
            "n_posterior": dre.count, "_dre": dre.values, "_rey": rey.values,
        }
        log.info("%s: AR %.2f%%, R-hat %.4g, DRE %.4g (prior %.4g), RE_Y %.4g (prior %.4g)",
                 exp.name, np.mean(ars), results[exp.name]["final_rhat"], dre.mean,
                 p_dre.mean, rey.mean, p_rey.mean)

    # KS against the baseline experiment, from this run or an earlier diagnose
    if base in results:
        base_vals = {"dre": results[base]["_dre"], "rey": results[base]["_rey"]}
    else:
        bdir = out_dir(cfg, "diagnostics", base)
        if (bdir / "dre.csv").exists() and (bdir / "rey.csv").exists():
            base_vals = {"dre": _read_errors(bdir / "dre.csv"),
                         "rey": _read_errors(bdir / "rey.csv")}
        elif baseline:
            raise MissingInput(f"baseline {base!r}: no diagnostics found in {bdir}")
        else:
            log.warning("baseline %s not diagnosed; skipping KS tests", base)
            base_vals = None
    for name, r in results.items():
        rows = []
        for q in ("dre", "rey"):
            if base_vals is None:
                r[f"ks_{q}_p"] = float("nan")
                continue
            a = _ks_draw(base_vals[q], D.ks_size, cfg.seed, f"ks:{q}")
            b = _ks_draw(r[f"_{q}"], D.ks_size, cfg.seed, f"ks:{q}")
            ks = dg.ks_two_sample(a, b)
            rows.append((base, name, q, ks.statistic, ks.pvalue))
            r[f"ks_{q}_p"] = ks.pvalue
        fileio.write_csv(out_dir(cfg, "diagnostics", name, "ks.csv"),
                         ["experiment_a", "experiment_b", "quantity", "D", "p"], rows)

    cols = ["experiment", "dim", "acceptance_rate", "convergence_iteration", "final_rhat",
            "dre_mean", "dre_std", "ks_dre_p", "rey_mean", "rey_std", "ks_rey_p",
            "prior_dre_mean", "prior_rey_mean", "n_posterior"]
    table = [[("" if r[c] is None else r[c]) for c in cols] for r in results.values()]
    for name, row in zip(results, table):
        fileio.write_csv(out_dir(cfg, "diagnostics", name, "summary.csv"), cols, [row])
    fileio.write_csv(out_dir(cfg, "diagnostics", "table.csv"), cols, table)
    return {k: {c: v for c, v in r.items() if not c.startswith("_")} for k, r in results.items()}


# ---------------------------------------------------------------- export

def export(cfg: ExperimentConfig, path, dest=None) -> list[Path]:
    """Convert one binary artifact to CSV (and JSON for model descriptors)."""
    path = Path(path)
    dest = Path(dest) if dest else path.parent
    stem = dest / path.stem
    magic = _require(path, "artifact").open("rb").read(4)
    written = []
    if magic == b"FLD1":
        nx, ny, kind, values = fileio.read_field_raw(path)
        g = grid_of(cfg)
        if (nx, ny) != (g.nx, g.ny):
            g = GridSpec(float(nx), float(ny), nx, ny)  # unit cells when the grid differs
        xy = g.cell_centers()
        out = stem.with_suffix(".csv")
        fileio.write_csv(out, ["cell", "i", "j", "x", "y", kind],
                         [(c, c % nx, c // nx, xy[c, 0], xy[c, 1], values[c])
                          for c in range(nx * ny)])
        written.append(out)
    elif magic == b"TRC1":
        hdr, recs = fileio.read_trace_records(path)
        out = stem.with_suffix(".csv")
        cols = ["iteration", "accept", "loglik"] + [f"theta_{k}" for k in range(hdr["n"])]
        fileio.write_csv(out, cols, ([int(r["iteration"]), int(r["accept"]), r["loglik"],
                                      *r["theta"]] for r in recs))
        written.append(out)
    elif magic == b"KLB1":
        basis = fileio.read_basis(path, grid_of(cfg), covariance_of(cfg, 1.0))
        a = Path(f"{stem}_eigenvalues.csv")
        fileio.write_csv(a, ["mode", "eigenvalue", "energy"],
                         zip(range(basis.size), basis.eigenvalues, basis.energy))
        b = Path(f"{stem}_eigenvectors.csv")
        fileio.write_csv(b, ["cell"] + [f"mode_{k}" for k in range(basis.n_stored)],
                         ([c, *basis.eigenvectors[c]] for c in range(basis.size)))
        written += [a, b]
    elif magic == b"VAE1":
        params = fileio.read_vae(path)
        a = stem.with_suffix(".json")
        fileio.write_json(a, {"architecture": params.arch.to_dict(),
                              "layers": layer_parameter_counts(params.arch),
                              "arrays": {k: list(v.shape) for k, v in params.arrays.items()}})
        b = Path(f"{stem}_arrays.csv")
        fileio.write_csv(b, ["array", "index", "value"],
                         ((k, i, x) for k, v in params.arrays.items()
                          for i, x in enumerate(v.ravel())))
        written += [a, b]
    else:
        raise fileio.FormatError(f"{path}: unknown artifact type {magic!r}")
    return written
