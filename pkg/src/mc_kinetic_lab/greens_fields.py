import math
import logging
from functools import lru_cache
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.fft as sfft
from scipy import special, integrate

from mc_kinetic_lab.vfield_algebra import MultiIndex, commuted_field_source
from mc_kinetic_lab.phase_grid import (
    SpatialGrid,
    PhaseDensity,
    SpatialField,
    gradient,
    laplacian4,
    velocity_average,
    apply_multi_index,
    BOUNDARY_MASS_TOLERANCE,
)

LOGGER = logging.getLogger(__name__)

# Mean of 1/|y| over the centred unit cube and of ln|y| over the centred unit square.
CUBE_MEAN_INVERSE_RADIUS = 3.0 * math.log(2.0 + math.sqrt(3.0)) - math.pi / 2.0
SQUARE_MEAN_LOG_RADIUS = 0.5 * (-math.log(2.0) - 3.0 + math.pi / 2.0)

DEFAULT_RESIDUAL_THRESHOLD = 5e-2
BESSEL_TOLERANCE = 1e-10


class QuadratureError(RuntimeError):
    """
    Adaptive quadrature did not reach the requested tolerance.
    """

    def __init__(self, message: str, achieved_error: float):
        super().__init__(f"{message} (achieved relative error {achieved_error:.3e})")
        self.achieved_error = achieved_error


@dataclass(frozen=True)
class KernelSpec:
    """
    Green's function of Delta (poisson, mass 0) or Delta - 1 (yukawa, mass 1).
    """

    kind: Literal["poisson", "yukawa"]
    n: int
    mass: int = -1

    def __post_init__(self):
        if self.kind == "poisson":
            if self.n < 3:
                raise ValueError(f"The Poisson kernel needs n >= 3, got {self.n}")
            if self.mass not in (-1, 0):
                raise ValueError(f"The Poisson kernel has mass 0, got {self.mass}")
            object.__setattr__(self, "mass", 0)
        elif self.kind == "yukawa":
            if self.n < 2:
                raise ValueError(f"The Yukawa kernel needs n >= 2, got {self.n}")
            if self.mass not in (-1, 1):
                raise ValueError(f"Only mass m = 1 is supported, got {self.mass}")
            object.__setattr__(self, "mass", 1)
        else:
            raise ValueError(f"Unknown kernel kind: {self.kind}")

    @property
    def mass_squared(self) -> int:
        return self.mass**2


@dataclass(frozen=True, eq=False)
class FieldSolution:
    phi: SpatialField
    grad_phi: SpatialField
    residual_norm: float
    method: Literal["fast", "direct"]
    status: Literal["ok", "warning", "invalid"] = "ok"

    @property
    def valid(self) -> bool:
        return self.status != "invalid"


def _check_radius(r):
    if np.any(np.asarray(r) <= 0):
        raise ValueError("Radius must be strictly positive")


def _log_bessel_integrand(lam, nu: float, r: float):
    # log(exp(-r (cosh - 1)) cosh(nu lam)) with the cosh kept in log form.
    log_cosh = nu * lam + np.log1p(np.exp(-2.0 * nu * lam)) - math.log(2.0)
    return -r * (np.cosh(lam) - 1.0) + log_cosh


def bessel_k(nu: float, r: float) -> float:
    """
    K_nu(r) from the integral representation int_0^inf exp(-r cosh l) cosh(nu l) dl,
    evaluated by adaptive quadrature of exp(-r (cosh l - 1)) cosh(nu l) times e^{-r}.
    """
    if nu < 0:
        raise ValueError(f"Order must be non-negative: {nu}")
    if r <= 0:
        raise ValueError(f"Argument must be strictly positive: {r}")
    nu, r = float(nu), float(r)

    # Peak of the integrand and a cutoff where it has fallen by e^-60.
    peak = math.asinh(nu / r) if nu > 0 else 0.0
    log_peak = _log_bessel_integrand(peak, nu, r)
    upper = max(2.0 * peak, 1.0)
    while _log_bessel_integrand(upper, nu, r) > log_peak - 60.0:
        upper *= 1.5

    def integrand(lam):
        return math.exp(_log_bessel_integrand(lam, nu, r) - log_peak)

    points = [peak] if 0.0 < peak < upper else None
    value, error = integrate.quad(
        integrand, 0.0, upper, points=points, epsabs=0.0, epsrel=1e-13, limit=400
    )
    if value <= 0 or error > BESSEL_TOLERANCE * value:
        raise QuadratureError(f"K_{nu}({r}) quadrature did not converge", error / max(value, 1e-300))
    return value * math.exp(log_peak - r)


def bessel_k_bound(nu: float, r: float) -> float:
    """
    (e^{-r} / sqrt(r)) (1 + r^{-(nu - 1/2)}).
    """
    if nu < 0.5:
        raise ValueError(f"The envelope needs nu >= 1/2, got {nu}")
    if r <= 0:
        raise ValueError(f"Argument must be strictly positive: {r}")
    return math.exp(-r) / math.sqrt(r) * (1.0 + r ** (-(nu - 0.5)))


def poisson_constant(n: int) -> float:
    return math.gamma(n / 2.0) / (2.0 * math.pi ** (n / 2.0) * (n - 2))


def kernel_value(spec: KernelSpec, r):
    """
    Fundamental solution with Delta G = delta (poisson) or (Delta - 1) G = delta
    (yukawa); negative everywhere.
    """
    _check_radius(r)
    r = np.asarray(r, dtype=float)
    n = spec.n
    if spec.kind == "poisson":
        value = -poisson_constant(n) * r ** (2.0 - n)
    elif n == 3:
        value = -np.exp(-r) / (4.0 * math.pi * r)
    else:
        order = n / 2.0 - 1.0
        value = -((2.0 * math.pi) ** (-n / 2.0)) * r ** (-order) * special.kv(order, r)
    return float(value) if value.ndim == 0 else value


def kernel_gradient_magnitude(spec: KernelSpec, r):
    _check_radius(r)
    r = np.asarray(r, dtype=float)
    n = spec.n
    if spec.kind == "poisson":
        value = poisson_constant(n) * (n - 2) * r ** (1.0 - n)
    else:
        order = n / 2.0 - 1.0
        value = (2.0 * math.pi) ** (-n / 2.0) * r ** (-order) * special.kv(order + 1.0, r)
    return float(value) if value.ndim == 0 else value


def sphere_area(n: int) -> float:
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def kernel_l1_norms(spec: KernelSpec) -> tuple[float, float]:
    """
    ||G||_{L^1} and ||grad G||_{L^1} by radial quadrature. Only the screened kernel
    is integrable.
    """
    if spec.kind == "poisson":
        raise ValueError("The Poisson kernel is not integrable over R^n")
    area = sphere_area(spec.n)
    norms = []
    for profile in (kernel_value, kernel_gradient_magnitude):
        def radial(r, profile=profile):
            return r ** (spec.n - 1) * abs(profile(spec, r))

        near, near_error = integrate.quad(radial, 0.0, 1.0, limit=200)
        far, far_error = integrate.quad(radial, 1.0, np.inf, limit=200)
        if near_error + far_error > 1e-8 * (near + far):
            raise QuadratureError("Kernel L1 quadrature did not converge", (near_error + far_error) / (near + far))
        norms.append(area * (near + far))
    return norms[0], norms[1]


@lru_cache(maxsize=None)
def origin_cell_average(spec: KernelSpec, spacing: float) -> float:
    """
    Exact average of the kernel over the grid cell centred at the origin: analytic
    for the 1/r and ln r singular parts, quadrature for the bounded remainder.
    """
    h = spacing
    n = spec.n
    if n == 3 and spec.kind == "poisson":
        return -CUBE_MEAN_INVERSE_RADIUS / (4.0 * math.pi * h)
    if n == 3:
        def remainder(z, y, x):
            r = math.sqrt(x * x + y * y + z * z)
            return -math.expm1(-r) / (4.0 * math.pi * r) if r > 0 else 1.0 / (4.0 * math.pi)

        half = h / 2.0
        value, _ = integrate.nquad(remainder, [[0.0, half]] * 3, opts={"epsrel": 1e-12, "epsabs": 0.0})
        return -CUBE_MEAN_INVERSE_RADIUS / (4.0 * math.pi * h) + 8.0 * value / h**3
    if n == 2:
        def remainder(y, x):
            r = math.hypot(x, y)
            if r == 0:
                return math.log(2.0) - np.euler_gamma
            return special.k0(r) + math.log(r)

        half = h / 2.0
        value, _ = integrate.nquad(remainder, [[0.0, half]] * 2, opts={"epsrel": 1e-12, "epsabs": 0.0})
        mean_regular = 4.0 * value / h**2
        mean_log = math.log(h) + SQUARE_MEAN_LOG_RADIUS
        return -(mean_regular - mean_log) / (2.0 * math.pi)
    raise ValueError(f"Grid kernels are supported for n in {{2, 3}}, got {n}")


def _kernel_on_displacements(spec: KernelSpec, grid: SpatialGrid, offsets: np.ndarray) -> np.ndarray:
    """
    Kernel sampled on the tensor product of integer displacements `offsets` along
    every axis, with the origin cell replaced by its cell average.
    """
    squares = np.meshgrid(*([offsets.astype(float) ** 2] * grid.n), indexing="ij", sparse=True)
    r = grid.dx * np.sqrt(sum(squares))
    table = np.empty(r.shape)
    positive = r > 0
    table[positive] = kernel_value(spec, r[positive])
    table[~positive] = origin_cell_average(spec, grid.dx)
    return table


def _check_spec(spec: KernelSpec, grid: SpatialGrid):
    if spec.n != grid.n:
        raise ValueError(f"Kernel dimension {spec.n} does not match grid dimension {grid.n}")


@lru_cache(maxsize=8)
def _padded_kernel_spectrum(spec: KernelSpec, grid: SpatialGrid) -> np.ndarray:
    _check_spec(spec, grid)
    padded = 2 * grid.nx
    offsets = np.fft.fftfreq(padded, d=1.0 / padded).astype(np.int64)
    table = _kernel_on_displacements(spec, grid, offsets)
    return sfft.rfftn(table)


def convolve(spec: KernelSpec, values: np.ndarray, grid: SpatialGrid, workers: int = 1) -> np.ndarray:
    """
    Linear convolution G * values on the grid by zero padding to twice the extent.
    """
    padded_shape = (2 * grid.nx,) * grid.n
    spectrum = _padded_kernel_spectrum(spec, grid)
    transformed = sfft.rfftn(values, s=padded_shape, workers=workers)
    full = sfft.irfftn(transformed * spectrum, s=padded_shape, workers=workers)
    return full[(slice(0, grid.nx),) * grid.n] * grid.cell_volume


def convolve_direct(spec: KernelSpec, values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """
    O(M^2) direct sum with the same kernel table.
    """
    _check_spec(spec, grid)
    nx = grid.nx
    offsets = np.arange(-(nx - 1), nx)
    table = _kernel_on_displacements(spec, grid, offsets)
    result = np.zeros(grid.shape)
    for source in zip(*np.nonzero(values)):
        window = tuple(slice(nx - 1 - j, 2 * nx - 1 - j) for j in source)
        result += values[source] * table[window]
    return result * grid.cell_volume


def residual(spec: KernelSpec, phi: SpatialField, rho: SpatialField) -> float:
    """
    ||Delta_h phi - m^2 phi - rho||_2 over the cells two away from every face,
    relative to ||rho||_2. A zero source returns the absolute norm.
    """
    if phi.grid != rho.grid:
        raise ValueError("phi and rho must live on the same grid")
    h = phi.grid.dx
    inner = (slice(2, -2),) * phi.grid.n
    lap = laplacian4(phi.scalar, h)
    defect = (lap - spec.mass_squared * phi.scalar - rho.scalar)[inner]
    numerator = math.sqrt(float(np.sum(defect**2)))
    denominator = math.sqrt(float(np.sum(rho.scalar**2)))
    if denominator == 0.0:
        return numerator
    return numerator / denominator


def _boundary_fraction(values: np.ndarray) -> float:
    magnitude = np.abs(values)
    total = float(magnitude.sum())
    if total == 0.0:
        return 0.0
    interior = magnitude[(slice(1, -1),) * magnitude.ndim]
    return max(total - float(interior.sum()), 0.0) / total


def _finish(
    spec: KernelSpec,
    rho: SpatialField,
    phi_values: np.ndarray,
    method: Literal["fast", "direct"],
    residual_threshold: float,
) -> FieldSolution:
    phi = SpatialField(rho.grid, phi_values, rho.time_tag)
    grad_phi = gradient(phi)
    norm = residual(spec, phi, rho)
    status = "ok"
    if _boundary_fraction(rho.scalar) > BOUNDARY_MASS_TOLERANCE:
        status = "invalid"
        LOGGER.warning(f"Source touches the grid boundary at t={rho.time_tag}; field marked invalid")
    elif norm > residual_threshold:
        status = "warning"
        LOGGER.warning(f"Field residual {norm:.3e} above {residual_threshold:.1e} at t={rho.time_tag}")
    return FieldSolution(phi, grad_phi, norm, method, status)


def solve_field(
    spec: KernelSpec,
    rho: SpatialField,
    workers: int = 1,
    residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
) -> FieldSolution:
    """
    phi = G * rho by zero-padded spectral convolution, grad phi by fourth-order
    differences.
    """
    _check_spec(spec, rho.grid)
    return _finish(spec, rho, convolve(spec, rho.scalar, rho.grid, workers), "fast", residual_threshold)


def solve_field_direct(
    spec: KernelSpec,
    rho: SpatialField,
    residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
) -> FieldSolution:
    _check_spec(spec, rho.grid)
    if rho.grid.nx**rho.grid.n > 64**2:
        LOGGER.warning(f"Direct field sum on {rho.grid.nx}^{rho.grid.n} cells will be slow")
    return _finish(spec, rho, convolve_direct(spec, rho.scalar, rho.grid), "direct", residual_threshold)


def iterated_yukawa_convolution(rho: SpatialField, k: int, workers: int = 1) -> SpatialField:
    """
    G_1 convolved k times with rho; k = 0 returns rho unchanged.
    """
    if k < 0:
        raise ValueError(f"Convolution count must be non-negative: {k}")
    if k == 0:
        return rho
    spec = KernelSpec("yukawa", rho.grid.n)
    values = rho.scalar
    for _ in range(k):
        values = convolve(spec, values, rho.grid, workers)
    return SpatialField(rho.grid, values, rho.time_tag)


def solve_commuted_field(
    spec: KernelSpec,
    f: PhaseDensity,
    alpha: MultiIndex,
    t: Optional[float] = None,
    workers: int = 1,
    cache: Optional[dict] = None,
) -> FieldSolution:
    """
    Z^alpha phi from the commuted field equation: G convolved with the combination
    of rho(Z^beta f) and lower-order Z^beta phi given by commuted_field_source.
    """
    t = f.time_tag if t is None else t
    cache = {} if cache is None else cache
    if alpha.entries in cache:
        return cache[alpha.entries]
    grid = f.spec.spatial
    source = commuted_field_source(alpha, spec.mass_squared)
    total = np.zeros(grid.shape)
    for beta, coefficient in source.rho_terms.items():
        commuted = apply_multi_index(f, MultiIndex(alpha.dimension, beta), t)
        total += float(coefficient) * velocity_average(commuted).scalar
    rho_part = SpatialField(grid, total.copy(), f.time_tag)
    for beta, coefficient in source.phi_terms.items():
        lower = solve_commuted_field(spec, f, MultiIndex(alpha.dimension, beta), t, workers, cache)
        total += float(coefficient) * lower.phi.scalar
    phi = SpatialField(grid, convolve(spec, total, grid, workers), f.time_tag)
    # The residual is measured against the full right-hand side of the commuted equation.
    full_source = SpatialField(grid, total, f.time_tag)
    solution = FieldSolution(
        phi, gradient(phi), residual(spec, phi, full_source), "fast",
        "invalid" if _boundary_fraction(rho_part.scalar) > BOUNDARY_MASS_TOLERANCE else "ok",
    )
    cache[alpha.entries] = solution
    return solution


@dataclass(frozen=True)
class KernelIntegral:
    """
    int dy / (|y|^{n-1} (1 + |x + y|)^n) split at |y| = (2/3)|x| and |y| = 2|x|.
    """

    n: int
    distance: float
    inner: float
    middle: float
    outer: float
    error: float

    @property
    def total(self) -> float:
        return self.inner + self.middle + self.outer


def _angular_average(n: int, r: float, a: float) -> float:
    # Integral over the unit sphere of (1 + |x + r w|)^{-n} with |x| = a.
    if a == 0.0 or r == 0.0:
        return sphere_area(n) / (1.0 + max(r, a)) ** n
    if n == 2:
        value, _ = integrate.quad(
            lambda theta: (1.0 + math.sqrt(max(r * r + a * a + 2.0 * r * a * math.cos(theta), 0.0))) ** -2,
            0.0, math.pi, epsabs=0.0, epsrel=1e-12, limit=200,
        )
        return 2.0 * value
    if n == 3:
        value, _ = integrate.quad(
            lambda u: (1.0 + math.sqrt(max(r * r + a * a + 2.0 * r * a * u, 0.0))) ** -3,
            -1.0, 1.0, epsabs=0.0, epsrel=1e-12, limit=200,
        )
        return 2.0 * math.pi * value
    raise ValueError(f"Kernel integral is implemented for n in {{2, 3}}, got {n}")


def kernel_decay_integral(n: int, distance: float) -> KernelIntegral:
    """
    Radial reduction: the |y|^{n-1} weight cancels the Jacobian, leaving
    int_0^inf dr of the angular integral.
    """
    if distance < 0:
        raise ValueError(f"Distance must be non-negative: {distance}")
    a = float(distance)

    def radial(r):
        return _angular_average(n, r, a)

    options = dict(epsabs=0.0, epsrel=1e-11, limit=400)
    if a == 0.0:
        value, error = integrate.quad(radial, 0.0, np.inf, **options)
        return KernelIntegral(n, a, 0.0, 0.0, value, error)
    inner, inner_error = integrate.quad(radial, 0.0, 2.0 * a / 3.0, **options)
    middle, middle_error = integrate.quad(radial, 2.0 * a / 3.0, 2.0 * a, points=[a], **options)
    outer, outer_error = integrate.quad(radial, 2.0 * a, np.inf, **options)
    return KernelIntegral(n, a, inner, middle, outer, inner_error + middle_error + outer_error)


def kernel_table(spec: KernelSpec, radii: Sequence[float]) -> pd.DataFrame:
    radii = np.asarray(radii, dtype=float)
    return pd.DataFrame({"r": radii, "value": kernel_value(spec, radii)})


def bessel_table(orders: Sequence[float], radii: Sequence[float]) -> pd.DataFrame:
    """
    K_nu(r) by quadrature next to scipy's kv and the envelope, one row per (nu, r).
    """
    rows = []
    for nu in orders:
        for r in radii:
            value = bessel_k(nu, r)
            bound = bessel_k_bound(nu, r) if nu >= 0.5 else float("nan")
            rows.append(
                {
                    "nu": float(nu),
                    "r": float(r),
                    "k_quadrature": value,
                    "k_reference": float(special.kv(nu, r)),
                    "bound": bound,
                    "ratio": value / bound if nu >= 0.5 else float("nan"),
                }
            )
    return pd.DataFrame(rows)


def field_spec_for(system: str, n: int) -> KernelSpec:
    """
    Kernel for a system tag: vp uses the Poisson kernel, vy the screened one.
    """
    kinds: dict[str, Literal["poisson", "yukawa"]] = {"vp": "poisson", "vy": "yukawa"}
    if system not in kinds:
        raise ValueError(f"Unknown system: {system}")
    return KernelSpec(kinds[system], n)


def point_mass_field(grid: SpatialGrid, index: Optional[Sequence[int]] = None) -> SpatialField:
    """
    Unit mass in one cell: value 1 / cell volume at `index` (grid centre by default).
    """
    index = tuple(index) if index is not None else (grid.nx // 2,) * grid.n
    values = np.zeros(grid.shape)
    values[index] = 1.0 / grid.cell_volume
    return SpatialField(grid, values)
