"""
Gaussian random fields on a regular grid.

Squared-exponential covariance, Karhunen-Loeve decomposition by Nystrom
collocation at cell centers, energy-based truncation, field synthesis from
latent coordinates and the log-normal permeability transform.

Cell ordering is row-major with x varying fastest: cell ``(i, j)`` (column
``i``, row ``j``) has flat index ``j * nx + i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_DENSE_CELLS = 10_000
EIG_CLAMP_REL = 1e-12
MAX_EXPONENT = 300.0


@dataclass(frozen=True)
class GridSpec:
    """Uniform rectangular grid over ``[0, extent_x] x [0, extent_y]``."""

    extent_x: float = 100.0
    extent_y: float = 100.0
    nx: int = 50
    ny: int = 50

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"cell counts must be >= 1, got nx={self.nx}, ny={self.ny}")
        if not (self.extent_x > 0 and self.extent_y > 0):
            raise ValueError("grid extents must be positive")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.extent_x / self.nx

    @property
    def dy(self) -> float:
        return self.extent_y / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(ny, nx)`` of a field reshaped as an image."""
        return (self.ny, self.nx)

    def cell_centers(self) -> np.ndarray:
        """Return the ``(N, 2)`` array of cell-center coordinates."""
        xc = (np.arange(self.nx) + 0.5) * self.dx
        yc = (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(xc, yc, indexing="xy")
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_index(self, x: float, y: float) -> int:
        """Flat index of the cell containing point ``(x, y)``.

        Points on an interior cell boundary belong to the cell on the
        upper side; points on the far domain edge belong to the last cell.
        """
        if not (0.0 <= x <= self.extent_x and 0.0 <= y <= self.extent_y):
            raise ValueError(f"point ({x}, {y}) lies outside the domain")
        i = min(int(np.floor(x / self.dx)), self.nx - 1)
        j = min(int(np.floor(y / self.dy)), self.ny - 1)
        return j * self.nx + i


@dataclass(frozen=True)
class CovarianceModel:
    variance: float = 1.0
    corr_len_x: float = 20.0
    corr_len_y: float = 20.0
    mean: float = 0.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        if not (self.corr_len_x > 0 and self.corr_len_y > 0):
            raise ValueError("correlation lengths must be positive")

    @classmethod
    def isotropic(cls, corr_len: float, variance: float = 1.0, mean: float = 0.0):
        return cls(variance=variance, corr_len_x=corr_len, corr_len_y=corr_len, mean=mean)


@dataclass
class FieldSample:
    """One scalar value per cell; ``kind`` is gaussian, permeability or pressure."""

    grid: GridSpec
    values: np.ndarray
    kind: str = "gaussian"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_cells,):
            raise ValueError(
                f"expected {self.grid.n_cells} values, got shape {self.values.shape}")
        if self.kind not in ("gaussian", "permeability", "pressure"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.kind == "permeability" and not np.all(self.values > 0):
            raise ValueError("permeability values must be strictly positive")

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass
class KLEBasis:
    """Discrete Karhunen-Loeve eigenpairs.

    ``eigenvectors[:, i]`` is mode ``i`` sampled at cell centers and
    normalized so that ``cell_area * sum(phi_i * phi_j) == delta_ij``.
    Only the leading ``eigenvectors.shape[1]`` modes need to be stored; the
    full eigenvalue spectrum is always kept for the energy table.
    """

    grid: GridSpec
    model: CovarianceModel
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    energy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        self.eigenvalues = lam
        self.energy = _cumulative_energy(lam)

    @property
    def size(self) -> int:
        return self.eigenvalues.size

    @property
    def n_stored(self) -> int:
        return self.eigenvectors.shape[1]

    def truncated(self, m: int) -> "KLEBasis":
        """Copy keeping only the first ``m`` eigenvectors."""
        if not 1 <= m <= self.n_stored:
            raise ValueError(f"cannot keep {m} of {self.n_stored} stored modes")
        return KLEBasis(self.grid, self.model, self.eigenvalues.copy(),
                        np.ascontiguousarray(self.eigenvectors[:, :m]))


def _cumulative_energy(lam: np.ndarray) -> np.ndarray:
    total = lam.sum()
    if total <= 0:
        raise ValueError("eigenvalue spectrum has no positive energy")
    # clip rounding overshoot so the table stays nondecreasing and ends at 1
    energy = np.minimum(np.cumsum(lam) / total, 1.0)
    energy[-1] = 1.0
    return energy


def covariance_eval(model: CovarianceModel, p, q) -> float:
    d1 = p[0] - q[0]
    d2 = p[1] - q[1]
    return model.variance * np.exp(-d1 * d1 / (2.0 * model.corr_len_x ** 2)
                                   - d2 * d2 / (2.0 * model.corr_len_y ** 2))


def covariance_matrix(grid: GridSpec, model: CovarianceModel) -> np.ndarray:
    """Covariance between all pairs of cell centers, shape ``(N, N)``."""
    c = grid.cell_centers()
    # separable kernel: build per-axis factors and combine by broadcasting
    ex = np.exp(-(c[:, 0, None] - c[None, :, 0]) ** 2 / (2.0 * model.corr_len_x ** 2))
    ey = np.exp(-(c[:, 1, None] - c[None, :, 1]) ** 2 / (2.0 * model.corr_len_y ** 2))
    return model.variance * ex * ey


def kle_decompose(grid: GridSpec, model: CovarianceModel) -> KLEBasis:
    """Solve the discretized Fredholm eigenproblem for the covariance kernel.

    Nystrom collocation with one quadrature point per cell: the operator
    matrix is the covariance matrix times the cell area. Eigenpairs are sorted
    by decreasing eigenvalue, tiny negative eigenvalues are clamped to zero and
    each eigenvector is sign-fixed so its largest-magnitude entry is positive.
    """
    n = grid.n_cells
    if n > MAX_DENSE_CELLS:
        raise ValueError(f"grid has {n} cells; dense eigensolve is limited to "
                         f"{MAX_DENSE_CELLS}")
    area = grid.cell_area
    op = covariance_matrix(grid, model) * area
    try:
        lam, vec = np.linalg.eigh(op)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigensolver failed: {exc}") from exc
    lam = lam[::-1].copy()
    vec = vec[:, ::-1]

    if lam[-1] < -1e-6 * lam[0]:
        raise RuntimeError(f"covariance operator is not positive semidefinite "
                           f"(min eigenvalue {lam[-1]:.3e})")
    # rounding noise of a positive-definite kernel
    lam[lam < EIG_CLAMP_REL * lam[0]] = 0.0

    idx = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[idx, np.arange(n)])
    signs[signs == 0] = 1.0
    phi = np.ascontiguousarray(vec * signs / np.sqrt(area))
    return KLEBasis(grid, model, lam, phi)


def truncate(basis: KLEBasis, energy_target: float) -> int:
    """Smallest number of modes whose partial energy reaches the target."""
    if not 0 < energy_target <= 1:
        raise ValueError("energy target must lie in (0, 1]")
    return int(np.searchsorted(basis.energy, energy_target, side="left")) + 1


def synthesize(basis: KLEBasis, theta, m: int | None = None) -> FieldSample:
    """Gaussian field from the first ``m`` latent coordinates."""
    theta = np.asarray(theta, dtype=float)
    if m is None:
        m = theta.shape[-1]
    if m > basis.n_stored:
        raise ValueError(f"requested {m} modes but basis stores {basis.n_stored}")
    if theta.shape[-1] < m:
        raise ValueError(f"theta has {theta.shape[-1]} entries, need at least {m}")
    values = basis.model.mean + basis.eigenvectors[:, :m] @ (np.sqrt(basis.eigenvalues[:m])
                                                            * theta[:m])
    return FieldSample(basis.grid, values, "gaussian")


def synthesize_many(basis: KLEBasis, thetas, m: int | None = None) -> np.ndarray:
    """Batch version of :func:`synthesize`; rows of ``thetas`` give rows of the result."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if m is None:
        m = thetas.shape[1]
    if m > basis.n_stored or thetas.shape[1] < m:
        raise ValueError("latent dimension does not match the basis")
    scaled = thetas[:, :m] * np.sqrt(basis.eigenvalues[:m])
    return basis.model.mean + scaled @ basis.eigenvectors[:, :m].T


def to_permeability(y: FieldSample, psi: float, rho: float) -> FieldSample:
    """Log-normal map ``kappa = psi * exp(rho * Y)``."""
    if not psi > 0:
        raise ValueError("psi must be positive")
    expo = rho * y.values
    if np.any(np.abs(expo) > MAX_EXPONENT) or not np.all(np.isfinite(expo)):
        raise ValueError("degenerate Gaussian field: |rho * Y| exceeds 300")
    return FieldSample(y.grid, psi * np.exp(expo), "permeability")
