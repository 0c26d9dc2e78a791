import math
import struct
import logging
from pathlib import Path
from functools import lru_cache
from dataclasses import dataclass
from typing import Union, Callable, Optional, Sequence

import numpy as np
import sympy as sp
import pandas as pd

from mc_kinetic_lab.vfield_algebra import MultiIndex, FieldExpression, expression_of

LOGGER = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET_MB = 4096.0
BOUNDARY_MASS_TOLERANCE = 1e-10
SNAPSHOT_MAGIC = b"KLSNAP01"
SNAPSHOT_HEADER = struct.Struct("<8sIIQQQQddd")
SNAPSHOT_KINDS = {"density": 1, "field": 2, "particles": 3}

PhaseProfile = Callable[[Sequence[np.ndarray], Sequence[np.ndarray]], np.ndarray]


class ResourceBudgetError(RuntimeError):
    """
    Raised before allocating a grid that would not fit the configured memory budget.
    """


def cell_centers(extent: float, count: int) -> np.ndarray:
    spacing = 2.0 * extent / count
    return -extent + (np.arange(count) + 0.5) * spacing


@dataclass(frozen=True)
class SpatialGrid:
    """
    Uniform cell-centred grid on [-x_extent, x_extent]^n.
    """

    n: int
    x_extent: float
    nx: int

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError(f"Grids are supported for n in {{2, 3}}, got {self.n}")
        if self.x_extent <= 0:
            raise ValueError(f"Extent must be positive: {self.x_extent}")
        if self.nx < 8 or self.nx % 2:
            raise ValueError(f"Points per axis must be even and >= 8: {self.nx}")

    @property
    def dx(self) -> float:
        return 2.0 * self.x_extent / self.nx

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.n

    def centers(self) -> np.ndarray:
        return cell_centers(self.x_extent, self.nx)

    def mesh(self, sparse: bool = True) -> list[np.ndarray]:
        axis = self.centers()
        return np.meshgrid(*([axis] * self.n), indexing="ij", sparse=sparse)

    def radius(self) -> np.ndarray:
        return np.sqrt(sum(x**2 for x in self.mesh()))


@dataclass(frozen=True)
class GridSpec:
    """
    Tensor grid on [-x_extent, x_extent]^n x [-v_extent, v_extent]^n. Array axes are
    x1..xn followed by v1..vn.
    """

    n: int
    x_extent: float
    v_extent: float
    nx: int
    nv: int
    memory_budget_mb: float = DEFAULT_MEMORY_BUDGET_MB

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ValueError(f"Phase grids are supported for n in {{2, 3}}, got {self.n}")
        if self.x_extent <= 0 or self.v_extent <= 0:
            raise ValueError(
                f"Extents must be positive: x={self.x_extent}, v={self.v_extent}"
            )
        for name, count in (("nx", self.nx), ("nv", self.nv)):
            if count < 8 or count % 2:
                raise ValueError(f"{name} must be even and >= 8: {count}")
        if self.storage_mb > self.memory_budget_mb:
            raise ResourceBudgetError(
                f"Phase grid needs {self.storage_mb:.1f} MB per copy, budget is {self.memory_budget_mb:.1f} MB"
            )

    @property
    def dx(self) -> float:
        return 2.0 * self.x_extent / self.nx

    @property
    def dv(self) -> float:
        return 2.0 * self.v_extent / self.nv

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nx,) * self.n + (self.nv,) * self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.n * self.dv**self.n

    @property
    def storage_mb(self) -> float:
        return 8.0 * float(self.nx) ** self.n * float(self.nv) ** self.n / 2**20

    @property
    def spatial(self) -> SpatialGrid:
        return SpatialGrid(self.n, self.x_extent, self.nx)

    @property
    def max_speed(self) -> float:
        return self.v_extent - 0.5 * self.dv

    def x_centers(self) -> np.ndarray:
        return cell_centers(self.x_extent, self.nx)

    def v_centers(self) -> np.ndarray:
        return cell_centers(self.v_extent, self.nv)

    def mesh(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """
        Sparse broadcastable coordinate arrays (x1..xn, v1..vn).
        """
        axes = [self.x_centers()] * self.n + [self.v_centers()] * self.n
        grids = np.meshgrid(*axes, indexing="ij", sparse=True)
        return grids[: self.n], grids[self.n :]

    def spacing(self, axis: int) -> float:
        return self.dx if axis < self.n else self.dv


def _check_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class PhaseDensity:
    """
    Immutable snapshot of f(t, x, v) on a GridSpec.
    """

    spec: GridSpec
    values: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.spec.shape:
            raise ValueError(f"Values have shape {values.shape}, expected {self.spec.shape}")
        _check_finite(values, "Phase density")
        if self.time_tag < 0:
            raise ValueError(f"Time tag must be non-negative: {self.time_tag}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def boundary_mass_fraction(self, cells: int = 1) -> float:
        """
        Share of the total |f| mass held within `cells` cells of any face.
        """
        magnitude = np.abs(self.values)
        total = float(magnitude.sum())
        if total == 0.0:
            return 0.0
        interior = magnitude[(slice(cells, -cells),) * magnitude.ndim]
        return max(total - float(interior.sum()), 0.0) / total

    @property
    def contaminated(self) -> bool:
        return self.boundary_mass_fraction(1) > BOUNDARY_MASS_TOLERANCE

    def within_margin(self, cells: int = 3) -> bool:
        return self.boundary_mass_fraction(cells) <= BOUNDARY_MASS_TOLERANCE

    @property
    def negative_mass(self) -> float:
        return -float(np.minimum(self.values, 0.0).sum()) * self.spec.cell_volume

    def with_values(self, values: np.ndarray, time_tag: Optional[float] = None) -> "PhaseDensity":
        return PhaseDensity(self.spec, values, self.time_tag if time_tag is None else time_tag)

    def __repr__(self):
        return f"{PhaseDensity.__name__}(n={self.spec.n}, shape={self.spec.shape}, t={self.time_tag})"


@dataclass(frozen=True, eq=False)
class SpatialField:
    """
    Scalar (one component) or vector (n components) field on a SpatialGrid.
    Values have shape (components,) + grid.shape.
    """

    grid: SpatialGrid
    values: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape == self.grid.shape:
            values = values[np.newaxis]
        if values.shape[1:] != self.grid.shape:
            raise ValueError(f"Values have shape {values.shape}, grid is {self.grid.shape}")
        if values.shape[0] not in (1, self.grid.n):
            raise ValueError(f"Component count must be 1 or {self.grid.n}: {values.shape[0]}")
        _check_finite(values, "Spatial field")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def components(self) -> int:
        return self.values.shape[0]

    @property
    def scalar(self) -> np.ndarray:
        if self.components != 1:
            raise ValueError("Field is not scalar")
        return self.values[0]

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=0))

    def sup(self) -> float:
        return float(np.max(self.magnitude()))

    def integral(self) -> float:
        return float(self.values.sum(axis=tuple(range(1, self.values.ndim))).sum()) * self.grid.cell_volume

    @classmethod
    def zeros(cls, grid: SpatialGrid, components: int = 1, time_tag: float = 0.0) -> "SpatialField":
        return cls(grid, np.zeros((components,) + grid.shape), time_tag)


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """
    Weighted particles (x_p, v_p, w_p) discretizing f.
    """

    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray
    time_tag: float = 0.0

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        velocities = np.asarray(self.velocities, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if positions.ndim != 2 or positions.shape != velocities.shape:
            raise ValueError(
                f"Positions {positions.shape} and velocities {velocities.shape} must be (P, n)"
            )
        if weights.shape != (positions.shape[0],):
            raise ValueError(f"Weights must have shape ({positions.shape[0]},)")
        if np.any(weights <= 0):
            raise ValueError("Particle weights must be positive")
        _check_finite(positions, "Particle positions")
        _check_finite(velocities, "Particle velocities")
        for array in (positions, velocities, weights):
            array.flags.writeable = False
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "velocities", velocities)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.weights.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[1]

    @property
    def total_weight(self) -> float:
        return math.fsum(self.weights)

    def __repr__(self):
        return f"{ParticleEnsemble.__name__}(count={self.count}, t={self.time_tag})"


def gaussian_profile(
    eps: float,
    width: float = 1.0,
    center: Optional[Sequence[float]] = None,
    velocity_center: Optional[Sequence[float]] = None,
) -> PhaseProfile:
    """
    eps * exp(-(|x - c|^2 + |v - u|^2) / width^2).
    """

    def profile(x, v):
        cx = center if center is not None else [0.0] * len(x)
        cv = velocity_center if velocity_center is not None else [0.0] * len(v)
        exponent = sum((xi - ci) ** 2 for xi, ci in zip(x, cx))
        exponent = exponent + sum((vi - ui) ** 2 for vi, ui in zip(v, cv))
        return eps * np.exp(-exponent / width**2)

    return profile


def gaussian_mass(eps: float, n: int, width: float = 1.0) -> float:
    return eps * math.pi**n * width ** (2 * n)


def bump_profile(
    eps: float, radius: float = 2.0, center: Optional[Sequence[float]] = None
) -> PhaseProfile:
    """
    Smooth compactly supported eps * exp(1 - 1/(1 - s^2)) with s the scaled
    phase-space distance to (center, 0).
    """

    def profile(x, v):
        cx = center if center is not None else [0.0] * len(x)
        s2 = sum((xi - ci) ** 2 for xi, ci in zip(x, cx)) + sum(vi**2 for vi in v)
        s2 = s2 / radius**2
        inside = s2 < 1.0
        safe = np.where(inside, 1.0 - s2, 1.0)
        return np.where(inside, eps * np.exp(1.0 - 1.0 / safe), 0.0)

    return profile


def sample_function(spec: GridSpec, g: PhaseProfile) -> PhaseDensity:
    """
    Sample a vectorized profile g(x, v) at the cell centres.
    """
    x, v = spec.mesh()
    with np.errstate(all="ignore"):
        values = np.broadcast_to(np.asarray(g(x, v), dtype=float), spec.shape).copy()
    if not np.all(np.isfinite(values)):
        raise ValueError("Initial profile produced non-finite samples")
    return PhaseDensity(spec, values, 0.0)


def velocity_average(f: PhaseDensity, absolute: bool = False) -> SpatialField:
    """
    rho(f) = int f dv (or rho(|f|)) by the midpoint rule.
    """
    n = f.spec.n
    values = np.abs(f.values) if absolute else f.values
    rho = values.sum(axis=tuple(range(n, 2 * n))) * f.spec.dv**n
    return SpatialField(f.spec.spatial, rho, f.time_tag)


def _slab_fsum(values: np.ndarray) -> float:
    """
    Sum over leading-axis slabs, combining slab sums with exact rounding.
    """
    if values.ndim == 0:
        return float(values)
    return math.fsum(values.reshape(values.shape[0], -1).sum(axis=1))


def l1_norm(f: Union[PhaseDensity, np.ndarray], spec: Optional[GridSpec] = None) -> float:
    if isinstance(f, PhaseDensity):
        spec, values = f.spec, f.values
    else:
        values = f
        if spec is None:
            raise ValueError("A GridSpec is required for raw arrays")
    return _slab_fsum(np.abs(values)) * spec.cell_volume


def central_derivative(values: np.ndarray, axis: int, spacing: float) -> np.ndarray:
    """
    Fourth-order first derivative along one axis; the two cells next to each face
    use one-sided stencils of the same order.
    """
    moved = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    size = moved.shape[0]
    if size < 5:
        raise ValueError(f"Need at least 5 points along axis {axis}, got {size}")
    out = np.empty_like(moved)
    out[2:-2] = (moved[:-4] - 8.0 * moved[1:-3] + 8.0 * moved[3:-1] - moved[4:]) / 12.0
    out[0] = (-25.0 * moved[0] + 48.0 * moved[1] - 36.0 * moved[2] + 16.0 * moved[3] - 3.0 * moved[4]) / 12.0
    out[1] = (-3.0 * moved[0] - 10.0 * moved[1] + 18.0 * moved[2] - 6.0 * moved[3] + moved[4]) / 12.0
    out[-1] = (25.0 * moved[-1] - 48.0 * moved[-2] + 36.0 * moved[-3] - 16.0 * moved[-4] + 3.0 * moved[-5]) / 12.0
    out[-2] = (3.0 * moved[-1] + 10.0 * moved[-2] - 18.0 * moved[-3] + 6.0 * moved[-4] - moved[-5]) / 12.0
    return np.moveaxis(out / spacing, 0, axis)


def gradient(field: SpatialField) -> SpatialField:
    """
    Fourth-order gradient of a scalar field.
    """
    scalar = field.scalar
    components = [
        central_derivative(scalar, axis, field.grid.dx) for axis in range(field.grid.n)
    ]
    return SpatialField(field.grid, np.stack(components), field.time_tag)


def laplacian4(values: np.ndarray, spacing: float) -> np.ndarray:
    """
    Fourth-order Laplacian; only the cells at least two away from every face are
    meaningful, the rest are set to zero.
    """
    out = np.zeros_like(values, dtype=float)
    inner = (slice(2, -2),) * values.ndim
    for axis in range(values.ndim):
        def shifted(offset):
            index = [slice(2, -2)] * values.ndim
            index[axis] = slice(2 + offset, values.shape[axis] - 2 + offset)
            return values[tuple(index)]

        out[inner] += (
            -shifted(-2) + 16.0 * shifted(-1) - 30.0 * shifted(0) + 16.0 * shifted(1) - shifted(2)
        ) / (12.0 * spacing**2)
    return out


@lru_cache(maxsize=None)
def _compiled(poly: sp.Poly) -> Callable:
    return sp.lambdify(poly.gens, poly.as_expr(), "numpy")


def evaluate_coefficient(poly: sp.Poly, t: float, x: Sequence[np.ndarray], v: Sequence[np.ndarray]):
    """
    Evaluate a polynomial coefficient in (t, x, v) on broadcastable coordinates.
    """
    if poly.is_ground:
        return float(poly.as_expr())
    return _compiled(poly)(t, *x, *v)


def _check_applicable(expression: FieldExpression, n: int):
    if expression.dimension != n:
        raise ValueError(f"Expression dimension {expression.dimension} does not match grid n={n}")
    if expression.has_time_derivative():
        raise ValueError("Expressions with a d_t slot cannot be applied to a snapshot")


def apply_vfield_values(spec: GridSpec, values: np.ndarray, expression: FieldExpression, t: float) -> np.ndarray:
    """
    Array-level application of a first-order operator on the phase grid.
    """
    _check_applicable(expression, spec.n)
    x, v = spec.mesh()
    result = np.zeros(spec.shape)
    if not expression.zeroth.is_zero:
        result += evaluate_coefficient(expression.zeroth, t, x, v) * values
    for slot, coefficient in expression.terms:
        axis = int(slot[1:]) - 1 + (spec.n if slot[0] == "v" else 0)
        derivative = central_derivative(values, axis, spec.spacing(axis))
        result += evaluate_coefficient(coefficient, t, x, v) * derivative
    return result


def apply_vfield(f: PhaseDensity, expression: FieldExpression, t: Optional[float] = None) -> PhaseDensity:
    """
    Apply a polynomial-coefficient first-order operator with coefficients evaluated
    at (t, cell centre). `t` defaults to the snapshot's time tag.
    """
    t = f.time_tag if t is None else t
    return f.with_values(apply_vfield_values(f.spec, f.values, expression, t))


def apply_vfield_spatial(field: SpatialField, expression: FieldExpression, t: Optional[float] = None) -> SpatialField:
    """
    Apply the macroscopic counterpart of an operator to a scalar field of (t, x).
    """
    t = field.time_tag if t is None else t
    macro = expression.macroscopic()
    _check_applicable(macro, field.grid.n)
    n = field.grid.n
    x = field.grid.mesh()
    zeros = [0.0] * n
    scalar = field.scalar
    result = np.zeros(field.grid.shape)
    if not macro.zeroth.is_zero:
        result += evaluate_coefficient(macro.zeroth, t, x, zeros) * scalar
    for slot, coefficient in macro.terms:
        axis = int(slot[1:]) - 1
        result += evaluate_coefficient(coefficient, t, x, zeros) * central_derivative(
            scalar, axis, field.grid.dx
        )
    return SpatialField(field.grid, result, field.time_tag)


def apply_multi_index(f: PhaseDensity, alpha: MultiIndex, t: Optional[float] = None) -> PhaseDensity:
    """
    Z^alpha f = Z^{alpha^1}(... Z^{alpha^k} f); the last entry acts first.
    """
    if alpha.dimension != f.spec.n:
        raise ValueError(f"Multi-index dimension {alpha.dimension} does not match grid n={f.spec.n}")
    t = f.time_tag if t is None else t
    values = f.values
    for symbol in reversed(alpha.symbols()):
        values = apply_vfield_values(f.spec, values, expression_of(symbol), t)
    return f.with_values(values)


def _cic_stencil(positions: np.ndarray, grid: SpatialGrid):
    """
    Lower corner indices, fractional offsets and the in-domain mask (every
    coordinate in [-x_extent, x_extent]). Stencils of particles in the outer
    half-cell are clamped onto the face cell.
    """
    s = (positions + grid.x_extent) / grid.dx - 0.5
    lower = np.clip(np.floor(s), 0, grid.nx - 2).astype(np.int64)
    frac = np.clip(s - lower, 0.0, 1.0)
    inside = np.all(np.abs(positions) <= grid.x_extent, axis=1)
    return lower, frac, inside


def off_domain_fraction(p: ParticleEnsemble, grid: SpatialGrid) -> float:
    _, _, inside = _cic_stencil(p.positions, grid)
    total = p.total_weight
    if total == 0.0:
        return 0.0
    return math.fsum(p.weights[~inside]) / total


def deposit(p: ParticleEnsemble, grid: SpatialGrid) -> SpatialField:
    """
    Cloud-in-cell deposition normalised by the cell volume. Particles outside
    [-x_extent, x_extent]^n are skipped and reported.
    """
    if p.n != grid.n:
        raise ValueError(f"Particles are {p.n}-dimensional, grid is {grid.n}-dimensional")
    lower, frac, inside = _cic_stencil(p.positions, grid)
    skipped = int(np.count_nonzero(~inside))
    if skipped:
        LOGGER.warning(f"Deposit skipped {skipped} of {p.count} particles outside the grid")
    lower, frac, weights = lower[inside], frac[inside], p.weights[inside]

    counts = np.zeros(grid.nx**grid.n)
    for corner in np.ndindex(*([2] * grid.n)):
        shape = np.ones(len(weights))
        for axis, offset in enumerate(corner):
            shape = shape * (frac[:, axis] if offset else 1.0 - frac[:, axis])
        index = np.ravel_multi_index(tuple(lower[:, axis] + corner[axis] for axis in range(grid.n)), grid.shape)
        counts += np.bincount(index, weights=weights * shape, minlength=counts.size)
    return SpatialField(grid, counts.reshape(grid.shape) / grid.cell_volume, p.time_tag)


def gather(field: SpatialField, positions: np.ndarray) -> np.ndarray:
    """
    Multilinear interpolation of every field component at the given positions;
    positions outside the grid receive zero.
    """
    grid = field.grid
    lower, frac, inside = _cic_stencil(positions, grid)
    result = np.zeros((positions.shape[0], field.components))
    lower, frac = lower[inside], frac[inside]
    flat = field.values.reshape(field.components, -1)
    values = np.zeros((lower.shape[0], field.components))
    for corner in np.ndindex(*([2] * grid.n)):
        shape = np.ones(lower.shape[0])
        for axis, offset in enumerate(corner):
            shape = shape * (frac[:, axis] if offset else 1.0 - frac[:, axis])
        index = np.ravel_multi_index(tuple(lower[:, axis] + corner[axis] for axis in range(grid.n)), grid.shape)
        values += shape[:, np.newaxis] * flat[:, index].T
    result[inside] = values
    return result


def sample_particles(
    count: int,
    eps: float,
    seed: int,
    n: int = 3,
    width: float = 1.0,
    center: Optional[Sequence[float]] = None,
) -> ParticleEnsemble:
    """
    Draw particles from eps * exp(-(|x - c|^2 + |v|^2) / width^2) with equal weights
    summing to its mass.
    """
    if count < 1:
        raise ValueError(f"Particle count must be positive: {count}")
    rng = np.random.default_rng(seed)
    sigma = width / math.sqrt(2.0)
    offset = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    positions = rng.normal(0.0, sigma, size=(count, n)) + offset
    velocities = rng.normal(0.0, sigma, size=(count, n))
    weights = np.full(count, gaussian_mass(eps, n, width) / count)
    return ParticleEnsemble(positions, velocities, weights, 0.0)


def write_snapshot(path: Union[str, Path], item: Union[PhaseDensity, SpatialField, ParticleEnsemble], x_extent: float = 0.0) -> Path:
    """
    Write a density, field or particle ensemble in the little-endian snapshot layout
    documented in FORMATS.md.
    """
    path = Path(path)
    if isinstance(item, PhaseDensity):
        spec = item.spec
        header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_KINDS["density"], spec.n, spec.nx, spec.nv, 1, 0, spec.x_extent, spec.v_extent, item.time_tag)
        payload = [item.values]
    elif isinstance(item, SpatialField):
        grid = item.grid
        header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_KINDS["field"], grid.n, grid.nx, 0, item.components, 0, grid.x_extent, 0.0, item.time_tag)
        payload = [item.values]
    elif isinstance(item, ParticleEnsemble):
        header = SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_KINDS["particles"], item.n, 0, 0, 0, item.count, x_extent, 0.0, item.time_tag)
        payload = [item.positions, item.velocities, item.weights]
    else:
        raise ValueError(f"Cannot snapshot objects of type {type(item)}")
    with open(path, "wb") as handle:
        handle.write(header)
        for array in payload:
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return path


def read_snapshot(
    path: Union[str, Path], memory_budget_mb: float = DEFAULT_MEMORY_BUDGET_MB
) -> Union[PhaseDensity, SpatialField, ParticleEnsemble]:
    data = Path(path).read_bytes()
    magic, kind, n, nx, nv, components, count, x_extent, v_extent, time_tag = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path} is not a snapshot file")
    body = np.frombuffer(data, dtype="<f8", offset=SNAPSHOT_HEADER.size).astype(float)
    if kind == SNAPSHOT_KINDS["density"]:
        spec = GridSpec(n, x_extent, v_extent, nx, nv, memory_budget_mb)
        return PhaseDensity(spec, body.reshape(spec.shape), time_tag)
    if kind == SNAPSHOT_KINDS["field"]:
        grid = SpatialGrid(n, x_extent, nx)
        return SpatialField(grid, body.reshape((components,) + grid.shape), time_tag)
    if kind == SNAPSHOT_KINDS["particles"]:
        size = count * n
        return ParticleEnsemble(
            body[:size].reshape(count, n),
            body[size : 2 * size].reshape(count, n),
            body[2 * size :],
            time_tag,
        )
    raise ValueError(f"Unknown snapshot kind {kind} in {path}")


def density_slice(f: PhaseDensity, axes: tuple[str, str] = ("x1", "v1")) -> pd.DataFrame:
    """
    Long-form 2D slice through the grid centre along two named axes.
    """
    n = f.spec.n
    names = [f"x{i}" for i in range(1, n + 1)] + [f"v{i}" for i in range(1, n + 1)]
    for axis in axes:
        if axis not in names:
            raise ValueError(f"Unknown axis {axis}; expected one of {names}")
    first, second = names.index(axes[0]), names.index(axes[1])
    index = [f.spec.nx // 2] * n + [f.spec.nv // 2] * n
    index[first] = slice(None)
    index[second] = slice(None)
    plane = f.values[tuple(index)]
    centers = [f.spec.x_centers() if k < n else f.spec.v_centers() for k in (first, second)]
    a, b = np.meshgrid(centers[0], centers[1], indexing="ij")
    return pd.DataFrame({axes[0]: a.ravel(), axes[1]: b.ravel(), "value": plane.ravel()})


def field_slice(field: SpatialField, component: int = 0) -> pd.DataFrame:
    grid = field.grid
    index = [component] + [slice(None), slice(None)] + [grid.nx // 2] * (grid.n - 2)
    plane = field.values[tuple(index)]
    a, b = np.meshgrid(grid.centers(), grid.centers(), indexing="ij")
    return pd.DataFrame({"x1": a.ravel(), "x2": b.ravel(), "value": plane.ravel()})


def write_slice_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


