"""
Binary artifact formats and CSV helpers.

All binary formats are little-endian.

FLD1  field:    "FLD1", u32 nx, u32 ny, u32 kind, 8 reserved bytes (24-byte
                header), then nx*ny f64 values, x varying fastest.
KLB1  basis:    "KLB1", u64 N, u64 m_stored, N f64 eigenvalues, then m_stored
                eigenvectors of N f64 each.
VAE1  model:    "VAE1", u32 descriptor length, UTF-8 JSON descriptor
                (architecture and the ordered array list with shapes), then
                every array as f64 (or f32 if the descriptor says so).
TRC1  trace:    "TRC1", u32 n, u64 iterations, u32 thin, u64 seed, then packed
                records (u64 iteration, u8 accept, f64 loglik, n f64 theta).

Every writer goes through a temporary file renamed into place on success.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .field import CovarianceModel, FieldSample, GridSpec, KLEBasis

FIELD_KINDS = {"gaussian": 0, "permeability": 1, "pressure": 2}
_KIND_NAMES = {v: k for k, v in FIELD_KINDS.items()}


class FormatError(ValueError):
    pass


@contextmanager
def atomic_open(path, mode="wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    kw = {"newline": ""} if "b" not in mode else {}
    with open(tmp, mode, **kw) as fh:
        yield fh
    os.replace(tmp, path)


def _check_magic(buf: bytes, magic: bytes, path):
    if buf[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")


# ---------------------------------------------------------------- FLD1

def write_field(path, sample: FieldSample):
    g = sample.grid
    with atomic_open(path) as fh:
        fh.write(b"FLD1" + struct.pack("<III", g.nx, g.ny, FIELD_KINDS[sample.kind]) + bytes(8))
        fh.write(np.ascontiguousarray(sample.values, dtype="<f8").tobytes())


def read_field_raw(path) -> tuple[int, int, str, np.ndarray]:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"FLD1", path)
    if len(buf) < 24:
        raise FormatError(f"{path}: truncated header")
    nx, ny, kind = struct.unpack_from("<III", buf, 4)
    if kind not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown field kind {kind}")
    if len(buf) != 24 + 8 * nx * ny:
        raise FormatError(f"{path}: expected {nx * ny} values, found {(len(buf) - 24) / 8:g}")
    values = np.frombuffer(buf, dtype="<f8", offset=24).astype(float)
    return nx, ny, _KIND_NAMES[kind], values


def read_field(path, grid: GridSpec) -> FieldSample:
    nx, ny, kind, values = read_field_raw(path)
    if (nx, ny) != (grid.nx, grid.ny):
        raise FormatError(f"{path}: field is {nx}x{ny}, grid is {grid.nx}x{grid.ny}")
    return FieldSample(grid, values, kind)


# ---------------------------------------------------------------- KLB1

def write_basis(path, basis: KLEBasis, m_stored: int | None = None):
    m = basis.n_stored if m_stored is None else min(m_stored, basis.n_stored)
    with atomic_open(path) as fh:
        fh.write(b"KLB1" + struct.pack("<QQ", basis.size, m))
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.eigenvectors[:, :m].T, dtype="<f8").tobytes())


def read_basis(path, grid: GridSpec, model: CovarianceModel) -> KLEBasis:
    buf = Path(path).read_bytes()
    _check_magic(buf, b"KLB1", path)
    n, m = struct.unpack_from("<QQ", buf, 4)
    if n != grid.n_cells:
        raise FormatError(f"{path}: basis has {n} cells, grid has {grid.n_cells}")
    if len(buf) != 20 + 8 * (n + n * m):
        raise FormatError(f"{path}: truncated basis file")
    data = np.frombuffer(buf, dtype="<f8", offset=20)
    lam = data[:n].astype(float)
    vec = np.ascontiguousarray(data[n:].reshape(m, n).T.astype(float))
    return KLEBasis(grid, model, lam, vec)


# ---------------------------------------------------------------- VAE1

def write_vae(path, params, dtype: str = "f8"):
    from .vae.model import layer_parameter_counts

    if dtype not in ("f8", "f4"):
        raise ValueError("dtype must be 'f8' or 'f4'")
    desc = {
        "architecture": params.arch.to_dict(),
        "dtype": dtype,
        "arrays": [[name, list(a.shape)] for name, a in params.arrays.items()],
        "layers": layer_parameter_counts(params.arch),
    }
    blob = json.dumps(desc).encode()
    with atomic_open(path) as fh:
        fh.write(b"VAE1" + struct.pack("<I", len(blob)) + blob)
        for a in params.arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<" + dtype).tobytes())


def read_vae(path):
    from .vae.model import ArchitectureSpec, VAEParams

    buf = Path(path).read_bytes()
    _check_magic(buf, b"VAE1", path)
    (nd,) = struct.unpack_from("<I", buf, 4)
    desc = json.loads(buf[8:8 + nd].decode())
    arch = ArchitectureSpec(**desc["architecture"])
    dt = np.dtype("<" + desc.get("dtype", "f8"))
    off = 8 + nd
    arrays = {}
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape))
        if off + count * dt.itemsize > len(buf):
            raise FormatError(f"{path}: truncated at array {name}")
        arrays[name] = np.frombuffer(buf, dt, count, off).astype(float).reshape(shape)
        off += count * dt.itemsize
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return VAEParams(arch, arrays)


# ---------------------------------------------------------------- TRC1

_TRC_HEADER = struct.Struct("<4sIQIQ")


def trace_dtype(n: int) -> np.dtype:
    return np.dtype([("iteration", "<u8"), ("accept", "u1"), ("loglik", "<f8"),
                     ("theta", "<f8", (n,))])


class TraceWriter:
    """Append-only TRC1 writer, buffered; renamed into place by :meth:`close`."""

    def __init__(self, path, n, iterations, thin, seed, buffer=1000):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = self.path.with_name(self.path.name + ".part")
        self.fh = open(self.tmp, "wb")
        self.fh.write(_TRC_HEADER.pack(b"TRC1", n, iterations, thin, seed))
        self.buf = np.zeros(buffer, dtype=trace_dtype(n))
        self.k = 0

    def append(self, iteration, accept, loglik, theta):
        rec = self.buf[self.k]
        rec["iteration"] = iteration
        rec["accept"] = accept
        rec["loglik"] = loglik
        rec["theta"] = theta
        self.k += 1
        if self.k == self.buf.size:
            self.flush()

    def flush(self):
        self.fh.write(self.buf[: self.k].tobytes())
        self.fh.flush()
        self.k = 0

    def close(self):
        self.flush()
        self.fh.close()
        os.replace(self.tmp, self.path)

    def abort(self):
        # keep the .part file for inspection
        self.flush()
        self.fh.close()


def read_trace_records(path):
    """Return ``(header_dict, records)`` where ``records`` is a structured array."""
    buf = Path(path).read_bytes()
    _check_magic(buf, b"TRC1", path)
    _, n, iterations, thin, seed = _TRC_HEADER.unpack_from(buf)
    dt = trace_dtype(n)
    body = len(buf) - _TRC_HEADER.size
    if body % dt.itemsize:
        raise FormatError(f"{path}: truncated record")
    recs = np.frombuffer(buf, dt, offset=_TRC_HEADER.size)
    return {"n": n, "iterations": iterations, "thin": thin, "seed": seed}, recs


def read_trace(path, burn_in: int):
    """Rebuild a :class:`~vaeprior.mcmc.ChainTrace` from a TRC1 file.

    Accepted-move counts are recomputed from the stored flags, which is exact
    when the chain was stored without thinning.
    """
    from .mcmc import ChainTrace

    hdr, recs = read_trace_records(path)
    steps = recs["iteration"].astype(np.int64)
    acc = recs["accept"].astype(bool)
    return ChainTrace(hdr["seed"], hdr["n"], hdr["iterations"], burn_in, hdr["thin"], steps,
                      recs["theta"].astype(float), recs["loglik"].astype(float), acc,
                      n_accepted=int(acc[steps > burn_in].sum()))


# ---------------------------------------------------------------- CSV

def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    with atomic_open(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj):
    with atomic_open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
