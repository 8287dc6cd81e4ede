"""
YAML experiment configuration.

A config file holds one section per pipeline stage. Values missing from the
file come from a built-in profile (``desk`` or ``paper``). Every value is
checked at parse time; errors carry the file name and line of the offending
key.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _frac(x):
    return 0 < x < 1


def _check(pred, msg):
    return {"check": pred, "msg": msg}


@dataclass
class GridSection:
    extent_x: float = field(default=100.0, metadata=_check(_pos, "must be > 0"))
    extent_y: float = field(default=100.0, metadata=_check(_pos, "must be > 0"))
    nx: int = field(default=20, metadata=_check(_pos, "must be >= 1"))
    ny: int = field(default=20, metadata=_check(_pos, "must be >= 1"))


@dataclass
class CovarianceSection:
    variance: float = field(default=1.0, metadata=_check(_pos, "must be > 0"))
    mean: float = 0.0
    reference: float = field(default=20.0, metadata=_check(_pos, "must be > 0"))
    corr_lengths: list = field(default_factory=lambda: [10.0, 20.0, 30.0],
                               metadata=_check(lambda v: len(v) > 0 and min(v) > 0,
                                               "must be a non-empty list of positive lengths"))


@dataclass
class TransformSection:
    psi: float = field(default=9.87e-14, metadata=_check(_pos, "must be > 0"))
    rho: float = field(default=1.0, metadata=_check(_pos, "must be > 0"))


@dataclass
class FlowSection:
    rate: float = field(default=100.0, metadata=_check(_pos, "must be > 0"))
    bhp: float = field(default=1.01325e5, metadata=_check(_nonneg, "must be >= 0"))
    viscosity: float = field(default=1e-3, metadata=_check(_pos, "must be > 0"))
    porosity: float = field(default=0.2, metadata=_check(_frac, "must lie in (0, 1)"))
    well_radius: float = field(default=0.1, metadata=_check(_pos, "must be > 0"))
    thickness: float = field(default=1.0, metadata=_check(_pos, "must be > 0"))
    sensors_per_axis: int = field(default=5, metadata=_check(_pos, "must be >= 1"))
    solver: str = field(default="direct", metadata=_check(lambda s: s in ("direct", "cg"),
                                                          "must be 'direct' or 'cg'"))
    tol: float = field(default=1e-10, metadata=_check(_pos, "must be > 0"))


@dataclass
class ExperimentSection:
    name: str = "KLE-20"
    prior: str = field(default="kle", metadata=_check(lambda s: s in ("kle", "vae"),
                                                      "must be 'kle' or 'vae'"))
    corr_len: float = field(default=20.0, metadata=_check(_pos, "must be > 0"))
    energy: float = field(default=0.98, metadata=_check(lambda x: 0 < x <= 1,
                                                        "must lie in (0, 1]"))
    model: str = ""


@dataclass
class LikelihoodSection:
    sigma2: float = field(default=1e-3, metadata=_check(_pos, "must be > 0"))
    # additive Gaussian noise (Pa) on the reference sensor data; 0 gives noiseless data
    noise_std: float = field(default=0.0, metadata=_check(_nonneg, "must be >= 0"))


@dataclass
class McmcSection:
    chains: int = field(default=4, metadata=_check(_pos, "must be >= 1"))
    iterations: int = field(default=20000, metadata=_check(_pos, "must be >= 1"))
    burn_in: int = field(default=667, metadata=_check(_nonneg, "must be >= 0"))
    gamma: float = field(default=0.1, metadata=_check(lambda g: 0 < g <= 1,
                                                      "must lie in (0, 1]"))
    thin: int = field(default=1, metadata=_check(_pos, "must be >= 1"))
    progress_every: int = field(default=0, metadata=_check(_nonneg, "must be >= 0"))


@dataclass
class DatasetSection:
    per_length: int = field(default=2000, metadata=_check(_pos, "must be >= 1"))
    splits: list = field(default_factory=lambda: [0.6, 0.2, 0.2],
                         metadata=_check(lambda v: len(v) == 3 and min(v) > 0
                                         and abs(sum(v) - 1) < 1e-9,
                                         "must be three positive fractions summing to 1"))


@dataclass
class VaeSection:
    latent_dim: int = field(default=64, metadata=_check(_pos, "must be >= 1"))
    filters: int = field(default=4, metadata=_check(_pos, "must be >= 1"))
    kernel: int = field(default=5, metadata=_check(lambda k: k > 0 and k % 2 == 1,
                                                   "must be a positive odd integer"))
    dense_units: int = field(default=1024, metadata=_check(_pos, "must be >= 1"))
    batch_size: int = field(default=25, metadata=_check(_pos, "must be >= 1"))
    epochs: int = field(default=100, metadata=_check(_pos, "must be >= 1"))
    learning_rate: float = field(default=1e-4, metadata=_check(_pos, "must be > 0"))
    beta: float = field(default=0.5, metadata=_check(_nonneg, "must be >= 0"))
    bn_momentum: float = field(default=0.9, metadata=_check(_frac, "must lie in (0, 1)"))
    bn_eps: float = field(default=1e-5, metadata=_check(_pos, "must be > 0"))
    dtype: str = field(default="f8", metadata=_check(lambda s: s in ("f8", "f4"),
                                                     "must be 'f8' or 'f4'"))


@dataclass
class DiagnosticsSection:
    threshold: float = field(default=1.2, metadata=_check(lambda x: x > 1, "must be > 1"))
    every: int = field(default=250, metadata=_check(_pos, "must be >= 1"))
    tail: int = field(default=3333, metadata=_check(_pos, "must be >= 1"))
    posterior_samples: int = field(default=500, metadata=_check(_pos, "must be >= 1"))
    mean_field_samples: int = field(default=250, metadata=_check(_pos, "must be >= 1"))
    ks_size: int = field(default=100, metadata=_check(_pos, "must be >= 1"))
    baseline: str = "KLE-20"


@dataclass
class ExperimentConfig:
    profile: str = "desk"
    seed: int = field(default=0, metadata=_check(_nonneg, "must be >= 0"))
    output_dir: str = "runs/desk"
    threads: int = field(default=1, metadata=_check(_pos, "must be >= 1"))
    grid: GridSection = field(default_factory=GridSection)
    covariance: CovarianceSection = field(default_factory=CovarianceSection)
    transform: TransformSection = field(default_factory=TransformSection)
    flow: FlowSection = field(default_factory=FlowSection)
    experiments: list = field(default_factory=lambda: [ExperimentSection()])
    likelihood: LikelihoodSection = field(default_factory=LikelihoodSection)
    mcmc: McmcSection = field(default_factory=McmcSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    vae: VaeSection = field(default_factory=VaeSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def experiment(self, name: str) -> ExperimentSection:
        for e in self.experiments:
            if e.name == name:
                return e
        raise ConfigError(f"no experiment named {name!r}")


PROFILES = {
    # sigma2 tuned on the desk problem for a 10-16% acceptance rate at gamma = 0.1
    "desk": {"likelihood": {"sigma2": 1.2e-4}},
    "paper": {
        "output_dir": "runs/paper",
        "threads": 16,
        "grid": {"nx": 50, "ny": 50},
        "experiments": [
            {"name": "KLE-10", "prior": "kle", "corr_len": 10.0},
            {"name": "KLE-20", "prior": "kle", "corr_len": 20.0},
            {"name": "KLE-30", "prior": "kle", "corr_len": 30.0},
            {"name": "VAE-10-30", "prior": "vae", "model": "vae/model.vae"},
        ],
        "likelihood": {"sigma2": 3e-4},
        "mcmc": {"chains": 16, "iterations": 300000, "burn_in": 10000, "thin": 1,
                 "progress_every": 10000},
        "dataset": {"per_length": 20000},
        "vae": {"epochs": 100},
        "diagnostics": {"every": 1000, "tail": 50000, "posterior_samples": 10000,
                        "mean_field_samples": 5000},
    },
}


# ---------------------------------------------------------------- parsing

class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-3``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


class _Marks:
    """Line numbers of every key in a composed YAML document."""

    def __init__(self, node, source):
        self.source = source
        self.lines = {}
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, path):
        self.lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self.lines[path + (k.value,)] = k.start_mark.line + 1
                self._walk_child(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk_child(v, path + (i,))

    def _walk_child(self, node, path):
        line = self.lines.get(path)
        self._walk(node, path)
        if line is not None:
            self.lines[path] = line

    def where(self, path) -> str:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        line = self.lines.get(path)
        return f"{self.source}:{line}" if line else str(self.source)


def _fail(marks, path, msg):
    key = ".".join(str(p) for p in path) or "<root>"
    raise ConfigError(f"{marks.where(path)}: {key}: {msg}")


def _coerce(value, typ, marks, path):
    if typ in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(marks, path, f"expected a number, got {value!r}")
        return float(value)
    if typ in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            _fail(marks, path, f"expected an integer, got {value!r}")
        return value
    if typ in ("str", str):
        if not isinstance(value, str):
            _fail(marks, path, f"expected a string, got {value!r}")
        return value
    if typ in ("list", list):
        if not isinstance(value, list):
            _fail(marks, path, f"expected a list, got {value!r}")
        return [_coerce(v, "float", marks, path + (i,)) for i, v in enumerate(value)]
    raise TypeError(typ)


def _build(cls, data, marks, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        _fail(marks, path, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for k in data:
        if k not in known:
            _fail(marks, path + (k,), f"unknown key (allowed: {', '.join(known)})")
    kw = {}
    for name, f in known.items():
        if name not in data:
            continue
        p = path + (name,)
        val = data[name]
        sub = _SECTION_TYPES.get(f.type)
        if sub is not None:
            kw[name] = _build(sub, val, marks, p)
        elif f.type == "list" and name == "experiments":
            if not isinstance(val, list) or not val:
                _fail(marks, p, "expected a non-empty list of experiments")
            kw[name] = [_build(ExperimentSection, v, marks, p + (i,)) for i, v in enumerate(val)]
        else:
            kw[name] = _coerce(val, f.type, marks, p)
            chk = f.metadata.get("check")
            if chk is not None and not chk(kw[name]):
                _fail(marks, p, f"{f.metadata['msg']} (got {kw[name]!r})")
    return cls(**kw)


_SECTION_TYPES = {
    "GridSection": GridSection, "CovarianceSection": CovarianceSection,
    "TransformSection": TransformSection, "FlowSection": FlowSection,
    "LikelihoodSection": LikelihoodSection, "McmcSection": McmcSection,
    "DatasetSection": DatasetSection, "VaeSection": VaeSection,
    "DiagnosticsSection": DiagnosticsSection,
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _cross_checks(cfg: ExperimentConfig, marks):
    if cfg.mcmc.burn_in >= cfg.mcmc.iterations:
        _fail(marks, ("mcmc", "burn_in"), "must be smaller than mcmc.iterations")
    names = [e.name for e in cfg.experiments]
    if len(set(names)) != len(names):
        _fail(marks, ("experiments",), "experiment names must be unique")
    for i, e in enumerate(cfg.experiments):
        if e.prior == "vae" and not e.model:
            _fail(marks, ("experiments", i, "model"), "a VAE experiment needs a model path")
    if cfg.grid.nx * cfg.grid.ny > 10000:
        _fail(marks, ("grid",), "dense KLE limited to 10000 cells")


def parse(text: str, source="<string>", profile: str | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=_Loader)
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    marks = _Marks(node, source)
    data = {} if data is None else data
    if not isinstance(data, dict):
        _fail(marks, (), "top level must be a mapping")
    name = profile or data.get("profile", "desk")
    if name not in PROFILES:
        _fail(marks, ("profile",), f"unknown profile {name!r} (allowed: {', '.join(PROFILES)})")
    merged = _merge(PROFILES[name], data)
    merged["profile"] = name
    cfg = _build(ExperimentConfig, merged, marks, ())
    _cross_checks(cfg, marks)
    return cfg


def load(path, profile: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    return parse(text, str(path), profile)


def override(cfg: ExperimentConfig, seed=None, output_dir=None, threads=None) -> ExperimentConfig:
    changes = {k: v for k, v in (("seed", seed), ("output_dir", output_dir),
                                 ("threads", threads)) if v is not None}
    if not changes:
        return cfg
    # re-parse so overrides go through the same validation
    return parse(yaml.safe_dump(_merge(cfg.to_dict(), changes), sort_keys=False),
                 "<command line>", cfg.profile)
