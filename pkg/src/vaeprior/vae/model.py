"""Convolutional VAE: architecture, parameters, forward pass and gradients."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import NamedTuple

import numpy as np

from . import layers as L


@dataclass(frozen=True)
class ArchitectureSpec:
    """Encoder: ``len(strides)`` conv+BN+ReLU blocks, a ReLU dense layer and two
    latent heads. The decoder mirrors it, ending in a linear single-filter conv.
    """

    input_shape: tuple = (50, 50)
    latent_dim: int = 64
    filters: int = 4
    kernel: int = 5
    strides: tuple = (1, 2, 1)
    dense_units: int = 1024
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "strides", tuple(int(v) for v in self.strides))
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError("input_shape must be (ny, nx) with positive sizes")
        if self.latent_dim < 1 or self.filters < 1 or self.dense_units < 1:
            raise ValueError("latent_dim, filters and dense_units must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd integer")
        if not self.strides or min(self.strides) < 1:
            raise ValueError("strides must be a non-empty list of positive integers")

    @property
    def pad(self) -> int:
        return self.kernel // 2

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Spatial size at the input of each conv block, plus the final size."""
        h, w = self.input_shape
        sizes = [(h, w)]
        for s in self.strides:
            h = L.conv_out_size(h, self.kernel, s, self.pad)
            w = L.conv_out_size(w, self.kernel, s, self.pad)
            sizes.append((h, w))
        return sizes

    @property
    def flat_size(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return h * w * self.filters

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["strides"] = list(self.strides)
        return d


def _bn_names(name):
    return [f"{name}/gamma", f"{name}/beta", f"{name}/moving_mean", f"{name}/moving_variance"]


def _suffix(base, i):
    return base if i == 0 else f"{base}_{i}"


def encoder_ops(arch: ArchitectureSpec) -> list[tuple]:
    ops = []
    for i, s in enumerate(arch.strides):
        ops += [("conv", _suffix("conv2d", i), s), ("bn", _suffix("batch_norm", i)), ("relu",)]
    ops += [("flatten",), ("dense", "dense"), ("relu",)]
    return ops


def decoder_ops(arch: ArchitectureSpec) -> list[tuple]:
    sizes = arch.spatial_sizes()
    h, w = sizes[-1]
    ops = [("dense", "dec_dense"), ("relu",), ("dense", "dec_dense_1"), ("relu",),
           ("reshape", (h, w, arch.filters))]
    n = len(arch.strides)
    conv_i = tconv_i = bn_i = 0
    for j in range(n - 1, -1, -1):
        s = arch.strides[j]
        last = j == 0
        if s == 1:
            name = _suffix("dec_conv2d", conv_i)
            conv_i += 1
            ops.append(("conv", name, 1))
        else:
            name = _suffix("dec_conv2d_transpose", tconv_i)
            tconv_i += 1
            ops.append(("tconv", name, s, sizes[j]))
        if not last:
            ops += [("bn", _suffix("dec_batch_norm", bn_i)), ("relu",)]
            bn_i += 1
    return ops


def parameter_shapes(arch: ArchitectureSpec) -> dict[str, tuple]:
    """Ordered ``name -> shape`` for every array, encoder first."""
    k, F = arch.kernel, arch.filters
    shapes: dict[str, tuple] = {}
    cin = 1
    for op in encoder_ops(arch):
        if op[0] == "conv":
            shapes[op[1]] = (k, k, cin, F)
            cin = F
        elif op[0] == "bn":
            for nm in _bn_names(op[1]):
                shapes[nm] = (F,)
        elif op[0] == "dense":
            shapes[op[1]] = (arch.flat_size, arch.dense_units)
    for head in ("z_mean", "z_log_var"):
        shapes[f"{head}/kernel"] = (arch.dense_units, arch.latent_dim)
        shapes[f"{head}/bias"] = (arch.latent_dim,)
    dec = decoder_ops(arch)
    shapes["dec_dense"] = (arch.latent_dim, arch.dense_units)
    shapes["dec_dense_1"] = (arch.dense_units, arch.flat_size)
    last_conv = [op[1] for op in dec if op[0] in ("conv", "tconv")][-1]
    for op in dec:
        if op[0] in ("conv", "tconv"):
            cout = 1 if op[1] == last_conv else F
            # transposed kernels are stored (k, k, C_out, C_in)
            shapes[op[1]] = (k, k, F, cout) if op[0] == "conv" else (k, k, cout, F)
        elif op[0] == "bn":
            for nm in _bn_names(op[1]):
                shapes[nm] = (F,)
    return shapes


def layer_parameter_counts(arch: ArchitectureSpec) -> list[tuple[str, int]]:
    """Per-layer parameter counts in declaration order (batchnorm counts include
    the moving statistics)."""
    counts: dict[str, int] = {}
    for name, shape in parameter_shapes(arch).items():
        layer = name.split("/")[0]
        counts[layer] = counts.get(layer, 0) + int(np.prod(shape))
    return list(counts.items())


def is_trainable(name: str) -> bool:
    return not name.endswith(("/moving_mean", "/moving_variance"))


@dataclass
class VAEParams:
    arch: ArchitectureSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = parameter_shapes(self.arch)
        if list(self.arrays) != list(expected):
            missing = set(expected) ^ set(self.arrays)
            if missing:
                raise ValueError(f"parameter names do not match architecture: {sorted(missing)}")
            self.arrays = {k: self.arrays[k] for k in expected}
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def trainable(self) -> list[str]:
        return [k for k in self.arrays if is_trainable(k)]

    def copy(self) -> "VAEParams":
        return VAEParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def as_float32(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float32) for k, v in self.arrays.items()}


def init_params(arch: ArchitectureSpec, rng: np.random.Generator) -> VAEParams:
    """He-uniform for ReLU layers, Glorot-uniform for latent heads and output."""
    shapes = parameter_shapes(arch)
    dec_convs = [op[1] for op in decoder_ops(arch) if op[0] in ("conv", "tconv")]
    glorot = {"z_mean/kernel", "z_log_var/kernel", dec_convs[-1]}
    arrays = {}
    for name, shape in shapes.items():
        if name.endswith(("/gamma", "/moving_variance")):
            arrays[name] = np.ones(shape)
        elif name.endswith(("/beta", "/moving_mean", "/bias")):
            arrays[name] = np.zeros(shape)
        else:
            if len(shape) == 4:
                rf = shape[0] * shape[1]
                tconv = "transpose" in name
                fan_in = rf * (shape[3] if tconv else shape[2])
                fan_out = rf * (shape[2] if tconv else shape[3])
            else:
                fan_in, fan_out = shape
            if name in glorot:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                limit = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return VAEParams(arch, arrays)


class LatentSample(NamedTuple):
    mu: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    z: np.ndarray


class Losses(NamedTuple):
    rec: float    # batch mean of per-field squared error
    reg: float    # batch mean of per-field KL divergence
    total: float


def _run(ops, p: VAEParams, x, train):
    arch = p.arch
    tape = []
    updates = {}
    for op in ops:
        kind = op[0]
        if kind == "conv":
            x, cache = L.conv_forward(x, p[op[1]], op[2], arch.pad)
        elif kind == "tconv":
            x, cache = L.conv_transpose_forward(x, p[op[1]], op[3], op[2], arch.pad)
        elif kind == "bn":
            g, b, rm, rv = (p[n] for n in _bn_names(op[1]))
            x, cache, (nm, nv) = L.batchnorm_forward(x, g, b, rm, rv, train,
                                                     arch.bn_momentum, arch.bn_eps)
            if train:
                updates[f"{op[1]}/moving_mean"] = nm
                updates[f"{op[1]}/moving_variance"] = nv
        elif kind == "relu":
            x, cache = L.relu_forward(x)
        elif kind == "dense":
            x, cache = L.dense_forward(x, p[op[1]])
        elif kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif kind == "reshape":
            cache = x.shape
            x = x.reshape((x.shape[0],) + tuple(op[1]))
        else:  # pragma: no cover
            raise ValueError(kind)
        tape.append(cache)
    return x, tape, updates


def _run_backward(ops, tape, dy, grads):
    for op, cache in zip(reversed(ops), reversed(tape)):
        kind = op[0]
        if kind == "conv":
            dy, grads[op[1]] = L.conv_backward(dy, cache)
        elif kind == "tconv":
            dy, grads[op[1]] = L.conv_transpose_backward(dy, cache)
        elif kind == "bn":
            dy, grads[f"{op[1]}/gamma"], grads[f"{op[1]}/beta"] = L.batchnorm_backward(dy, cache)
        elif kind == "relu":
            dy = L.relu_backward(dy, cache)
        elif kind == "dense":
            dy, grads[op[1]], _ = L.dense_backward(dy, cache)
        elif kind in ("flatten", "reshape"):
            dy = dy.reshape(cache)
    return dy


def _as_batch(x, arch: ArchitectureSpec):
    x = np.asarray(x, dtype=float)
    h, w = arch.input_shape
    if x.shape[-2:] == (h, w):
        x = x[..., None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (h, w, 1):
        raise ValueError(f"expected fields of shape ({h}, {w}, 1), got {x.shape}")
    return x


def _heads(p, h):
    mu, c_mu = L.dense_forward(h, p["z_mean/kernel"], p["z_mean/bias"])
    lv, c_lv = L.dense_forward(h, p["z_log_var/kernel"], p["z_log_var/bias"])
    return mu, lv, c_mu, c_lv


def encode(params: VAEParams, x, eps=None, mode: str = "infer") -> LatentSample:
    """Latent distribution and reparameterized sample for a batch of fields.

    ``eps`` defaults to zeros, giving ``z == mu``. In ``infer`` mode batchnorm
    uses the moving statistics; in ``train`` mode it uses batch statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    xb = _as_batch(x, params.arch)
    h, _, _ = _run(encoder_ops(params.arch), params, xb, mode == "train")
    mu, lv, _, _ = _heads(params, h)
    eps = np.zeros_like(mu) if eps is None else np.broadcast_to(eps, mu.shape).astype(float)
    z = mu + np.exp(0.5 * lv) * eps
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
        raise FloatingPointError("non-finite encoder activations")
    return LatentSample(mu, lv, eps, z)


def decode(params: VAEParams, z, mode: str = "infer") -> np.ndarray:
    """Reconstruct fields, shape ``(B, ny, nx, 1)`` (or ``(ny, nx, 1)`` for one ``z``)."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    if zb.shape[1] != params.arch.latent_dim:
        raise ValueError(f"latent vector has length {zb.shape[1]}, "
                         f"expected {params.arch.latent_dim}")
    out, _, _ = _run(decoder_ops(params.arch), params, zb, mode == "train")
    return out[0] if single else out


def kl_divergence(mu, log_var) -> np.ndarray:
    """KL(N(mu, exp(log_var)) || N(0, I)) per item, summed over latent dims."""
    mu = np.atleast_2d(mu)
    log_var = np.atleast_2d(log_var)
    return 0.5 * np.sum(np.exp(log_var) + mu ** 2 - 1.0 - log_var, axis=1)


def losses(params: VAEParams, x, eps, beta: float, mode: str = "train") -> Losses:
    lat = encode(params, x, eps, mode)
    xr = decode(params, lat.z, mode)
    xb = _as_batch(x, params.arch)
    rec = np.sum((xb - xr) ** 2, axis=(1, 2, 3))
    reg = kl_divergence(lat.mu, lat.log_var)
    tot = float(np.mean(rec + beta * reg))
    if not np.isfinite(tot):
        raise FloatingPointError("non-finite loss")
    return Losses(float(rec.mean()), float(reg.mean()), tot)


def loss_and_grads(params: VAEParams, x, eps, beta: float):
    """Train-mode losses, gradients of the batch-mean total loss for every
    trainable array, and the updated batchnorm moving statistics."""
    arch = params.arch
    xb = _as_batch(x, arch)
    B = xb.shape[0]
    eops, dops = encoder_ops(arch), decoder_ops(arch)

    h, etape, upd = _run(eops, params, xb, True)
    mu, lv, c_mu, c_lv = _heads(params, h)
    eps = np.broadcast_to(eps, mu.shape).astype(float)
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * eps
    xr, dtape, dupd = _run(dops, params, z, True)
    upd.update(dupd)

    diff = xr - xb
    rec = np.sum(diff ** 2, axis=(1, 2, 3))
    reg = kl_divergence(mu, lv)
    tot = float(np.mean(rec + beta * reg))
    if not np.isfinite(tot):
        raise FloatingPointError("non-finite loss")

    grads: dict[str, np.ndarray] = {}
    dz = _run_backward(dops, dtape, 2.0 * diff / B, grads)
    dmu = dz + beta / B * mu
    dlv = dz * 0.5 * sigma * eps + beta / B * 0.5 * (np.exp(lv) - 1.0)
    dh_mu, grads["z_mean/kernel"], grads["z_mean/bias"] = L.dense_backward(dmu, c_mu)
    dh_lv, grads["z_log_var/kernel"], grads["z_log_var/bias"] = L.dense_backward(dlv, c_lv)
    _run_backward(eops, etape, dh_mu + dh_lv, grads)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    grads = {k: grads[k] for k in params.trainable}
    return Losses(float(rec.mean()), float(reg.mean()), tot), grads, upd
