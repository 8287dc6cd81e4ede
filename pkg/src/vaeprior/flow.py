"""
Steady single-phase incompressible Darcy flow on a regular grid.

Two-point flux approximation with harmonic face transmissibilities, no-flow
outer boundaries and Peaceman wells. A :class:`FlowSystem` precomputes the
grid connectivity and well geometry once so repeated solves (one per MCMC
proposal) only refill matrix values.

Sign convention: a positive well flux is fluid entering the reservoir.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .field import FieldSample, GridSpec

SECONDS_PER_DAY = 86_400.0
ATMOSPHERIC_PA = 1.01325e5


class FlowSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class FluidAndRock:
    viscosity: float = 1e-3
    porosity: float = 0.2  # unused by the incompressible solver

    def __post_init__(self):
        if not self.viscosity > 0:
            raise ValueError("viscosity must be positive")
        if not 0 < self.porosity < 1:
            raise ValueError("porosity must lie in (0, 1)")


@dataclass(frozen=True)
class WellSpec:
    """A vertical well completed in one cell.

    ``control`` is ``"rate"`` (``value`` in m^3/day, injection positive) or
    ``"bhp"`` (``value`` is the bottom-hole pressure in Pa).
    """

    cell: int
    control: str
    value: float
    radius: float = 0.1
    name: str = ""

    def __post_init__(self):
        if self.control not in ("rate", "bhp"):
            raise ValueError(f"unknown well control {self.control!r}")
        if not np.isfinite(self.value):
            raise ValueError("well control value must be finite")
        if not self.radius > 0:
            raise ValueError("well radius must be positive")

    @property
    def rate_si(self) -> float:
        """Rate in m^3/s."""
        return self.value / SECONDS_PER_DAY


def five_spot_wells(grid: GridSpec, rate: float = 100.0, bhp: float = ATMOSPHERIC_PA,
                    radius: float = 0.1) -> list[WellSpec]:
    """Rate-controlled injector in the central cell, BHP producers in the corners."""
    nx, ny = grid.nx, grid.ny
    center = grid.cell_index(grid.extent_x / 2, grid.extent_y / 2)
    corners = [0, nx - 1, (ny - 1) * nx, ny * nx - 1]
    wells = [WellSpec(center, "rate", rate, radius, "inj")]
    for k, c in enumerate(corners):
        wells.append(WellSpec(c, "bhp", bhp, radius, f"prod{k + 1}"))
    return wells


@dataclass(frozen=True)
class SensorLayout:
    positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.shape[0] < 1 or pos.shape[1] != 2:
            raise ValueError("sensor positions must be an (Nd, 2) array with Nd >= 1")
        object.__setattr__(self, "positions", pos)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def cells(self, grid: GridSpec) -> np.ndarray:
        return np.array([grid.cell_index(x, y) for x, y in self.positions], dtype=np.int64)

    @classmethod
    def lattice(cls, grid: GridSpec, per_axis: int = 5) -> "SensorLayout":
        """Uniform interior lattice; 10, 30, ..., 90 m on a 100 m domain."""
        fx = (np.arange(per_axis) + 0.5) * grid.extent_x / per_axis
        fy = (np.arange(per_axis) + 0.5) * grid.extent_y / per_axis
        X, Y = np.meshgrid(fx, fy, indexing="xy")
        return cls(np.column_stack([X.ravel(), Y.ravel()]))


@dataclass
class PressureSolution:
    grid: GridSpec
    pressure: np.ndarray
    well_fluxes: np.ndarray
    wells: tuple
    trans_x: np.ndarray
    trans_y: np.ndarray
    well_index: np.ndarray
    iterations: int = 0

    @property
    def injected(self) -> float:
        return float(self.well_fluxes[self.well_fluxes > 0].sum())

    @property
    def produced(self) -> float:
        return float(-self.well_fluxes[self.well_fluxes < 0].sum())

    def as_field(self) -> FieldSample:
        return FieldSample(self.grid, self.pressure, "pressure")


class MassBalance(NamedTuple):
    net: float            # sum of all well fluxes, m^3/s
    max_divergence: float  # max over cells of |net outflow - source|
    total_injection: float
    max_face_flux: float


class FlowSystem:
    """Reusable TPFA discretization for a fixed grid, fluid and well set."""

    def __init__(self, grid: GridSpec, wells: Sequence[WellSpec],
                 fluid: FluidAndRock | None = None, thickness: float = 1.0,
                 solver: str = "direct", tol: float = 1e-10):
        if solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {solver!r}")
        wells = tuple(wells)
        if not any(w.control == "bhp" for w in wells):
            raise FlowSolverError("at least one BHP-controlled well is required")
        for w in wells:
            if not 0 <= w.cell < grid.n_cells:
                raise ValueError(f"well cell {w.cell} outside the grid")
        self.grid = grid
        self.wells = wells
        self.fluid = fluid or FluidAndRock()
        self.thickness = thickness
        self.solver = solver
        self.tol = tol

        nx, ny = grid.nx, grid.ny
        idx = np.arange(grid.n_cells).reshape(ny, nx)
        self._xl, self._xr = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        self._yl, self._yr = idx[:-1, :].ravel(), idx[1:, :].ravel()
        self._fi = np.concatenate([self._xl, self._yl])
        self._fj = np.concatenate([self._xr, self._yr])
        n = grid.n_cells
        diag = np.arange(n)
        rows = np.concatenate([self._fi, self._fj, diag])
        cols = np.concatenate([self._fj, self._fi, diag])
        # fixed sparsity: map the (faces, faces, diagonal) data layout onto CSC order once
        pattern = sp.csc_matrix((np.arange(1, rows.size + 1, dtype=float), (rows, cols)),
                                shape=(n, n))
        pattern.sort_indices()
        self._csc_order = pattern.data.astype(np.int64) - 1
        self._csc_indices = pattern.indices
        self._csc_indptr = pattern.indptr

        # half-transmissibility geometry per unit permeability: area / half-distance
        self._gx = grid.dy * thickness / (grid.dx / 2.0)
        self._gy = grid.dx * thickness / (grid.dy / 2.0)

        dx, dy = grid.dx, grid.dy
        r_eq = 0.2 * dx if np.isclose(dx, dy) else 0.14 * np.hypot(dx, dy)
        self._well_cells = np.array([w.cell for w in wells], dtype=np.int64)
        self._wi_geom = np.array([2.0 * np.pi * thickness / np.log(r_eq / w.radius)
                                  for w in wells])
        if np.any(self._wi_geom <= 0):
            raise ValueError("well radius must be smaller than the Peaceman radius")
        self._is_bhp = np.array([w.control == "bhp" for w in wells])
        self._rate = np.array([w.rate_si if w.control == "rate" else 0.0 for w in wells])
        self._bhp = np.array([w.value if w.control == "bhp" else 0.0 for w in wells])

    def transmissibilities(self, kappa: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Face transmissibilities (including 1/viscosity) for x- and y-faces."""
        mu = self.fluid.viscosity
        tx = 1.0 / (1.0 / (self._gx * kappa[self._xl]) + 1.0 / (self._gx * kappa[self._xr]))
        ty = 1.0 / (1.0 / (self._gy * kappa[self._yl]) + 1.0 / (self._gy * kappa[self._yr]))
        return tx / mu, ty / mu

    def assemble(self, kappa: np.ndarray):
        n = self.grid.n_cells
        tx, ty = self.transmissibilities(kappa)
        t = np.concatenate([tx, ty])
        wi = self._wi_geom * kappa[self._well_cells] / self.fluid.viscosity

        wi_bhp = np.where(self._is_bhp, wi, 0.0)
        d = (np.bincount(self._fi, t, n) + np.bincount(self._fj, t, n)
             + np.bincount(self._well_cells, wi_bhp, n))
        data = np.concatenate([-t, -t, d])[self._csc_order]
        A = sp.csc_matrix((data, self._csc_indices, self._csc_indptr), shape=(n, n))
        b = np.bincount(self._well_cells, self._rate + wi_bhp * self._bhp, n)
        return A, b, d, tx, ty, wi

    def _banded(self, d, tx, ty):
        # upper banded storage with bandwidth nx: row nx is the diagonal
        nx = self.grid.nx
        ab = np.zeros((nx + 1, self.grid.n_cells))
        ab[nx] = d
        ab[nx - 1, self._xr] = -tx
        ab[0, self._yr] = -ty
        return ab

    def solve(self, perm: FieldSample | np.ndarray) -> PressureSolution:
        kappa = perm.values if isinstance(perm, FieldSample) else np.asarray(perm, float)
        if kappa.shape != (self.grid.n_cells,):
            raise ValueError("permeability does not match the grid")
        if not np.all(kappa > 0) or not np.all(np.isfinite(kappa)):
            raise FlowSolverError("permeability must be positive and finite")
        A, b, d, tx, ty, wi = self.assemble(kappa)
        iterations = 0
        if self.solver == "direct":
            # banded Cholesky: the TPFA matrix is SPD with bandwidth nx
            try:
                p = sla.solveh_banded(self._banded(d, tx, ty), b, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise FlowSolverError(f"Cholesky factorization failed: {exc}") from exc
        else:
            p, iterations = _pcg(A, b, self.tol, maxiter=10 * self.grid.n_cells)
        res = np.linalg.norm(A @ p - b)
        if not np.all(np.isfinite(p)) or res > self.tol * np.linalg.norm(b) * 1e2:
            raise FlowSolverError(f"linear solve did not converge (residual {res:.3e})")
        fluxes = np.where(self._is_bhp, wi * (self._bhp - p[self._well_cells]), self._rate)
        return PressureSolution(self.grid, p, fluxes, self.wells, tx, ty, wi, iterations)


def _pcg(A, b, tol, maxiter):
    """Conjugate gradients with a diagonal (Jacobi) preconditioner."""
    dinv = 1.0 / A.diagonal()
    x = np.zeros_like(b)
    r = b.copy()
    z = dinv * r
    d = z.copy()
    rz = r @ z
    bnorm = np.linalg.norm(b)
    for it in range(1, maxiter + 1):
        Ad = A @ d
        alpha = rz / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it
        z = dinv * r
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise FlowSolverError(f"CG did not reach tol {tol:g} in {maxiter} iterations")


def assemble_and_solve(grid: GridSpec, perm: FieldSample, fluid: FluidAndRock,
                       wells: Sequence[WellSpec], solver: str = "direct") -> PressureSolution:
    return FlowSystem(grid, wells, fluid, solver=solver).solve(perm)


def sample_sensors(sol: PressureSolution, layout: SensorLayout | np.ndarray) -> np.ndarray:
    """Pressure of the cell containing each sensor, in layout order."""
    cells = layout.cells(sol.grid) if isinstance(layout, SensorLayout) else layout
    return sol.pressure[cells]


def mass_balance(sol: PressureSolution) -> MassBalance:
    """Recompute well and face fluxes from the pressure and check conservation.

    Fluxes are derived from ``sol.pressure`` only, so a pressure vector that
    does not solve the system shows up as a large residual.
    """
    grid = sol.grid
    p = sol.pressure
    nx, ny = grid.nx, grid.ny
    cells = np.array([w.cell for w in sol.wells])
    q = np.empty(len(sol.wells))
    for k, w in enumerate(sol.wells):
        if w.control == "bhp":
            q[k] = sol.well_index[k] * (w.value - p[w.cell])
        else:
            q[k] = w.rate_si
    P = p.reshape(ny, nx)
    fx = sol.trans_x.reshape(ny, nx - 1) * (P[:, :-1] - P[:, 1:])
    fy = sol.trans_y.reshape(ny - 1, nx) * (P[:-1, :] - P[1:, :])
    out = np.zeros((ny, nx))
    out[:, :-1] += fx
    out[:, 1:] -= fx
    out[:-1, :] += fy
    out[1:, :] -= fy
    source = np.zeros(grid.n_cells)
    np.add.at(source, cells, q)
    div = np.abs(out.ravel() - source)
    max_face = max(np.abs(fx).max(initial=0.0), np.abs(fy).max(initial=0.0))
    return MassBalance(float(q.sum()), float(div.max()), float(q[q > 0].sum()),
                       float(max_face))
