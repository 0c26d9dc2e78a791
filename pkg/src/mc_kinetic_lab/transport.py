import math
import hashlib
import logging
from dataclasses import field, dataclass
from typing import Union, Literal, Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from mc_kinetic_lab.greens_fields import KernelSpec, FieldSolution, solve_field
from mc_kinetic_lab.phase_grid import (
    GridSpec,
    SpatialGrid,
    PhaseDensity,
    PhaseProfile,
    SpatialField,
    ParticleEnsemble,
    ResourceBudgetError,
    gather,
    deposit,
    l1_norm,
    velocity_average,
    off_domain_fraction,
)

LOGGER = logging.getLogger(__name__)

OFF_DOMAIN_TOLERANCE = 1e-6
MAX_CFL_SAFETY = 0.9


class CFLViolationError(ValueError):
    """
    The requested time step moves mass by more than the safety fraction of a cell.
    """

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(f"{message}; suggested dt={suggested_dt:.6g}")
        self.suggested_dt = suggested_dt


class RunAbortedError(RuntimeError):
    """
    A run stopped early; `record` holds everything observed before the failure.
    """

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class SolverConfig:
    """
    Time-integration settings shared by the grid and particle solvers.
    """

    mu: int
    kernel: KernelSpec
    t_end: float
    cfl_safety: float = 0.5
    interpolation: Literal["cubic"] = "cubic"
    observer_cadence: float = 1.0
    force_enabled: bool = True
    dt: Optional[float] = None
    snapshot_times: tuple[float, ...] = ()
    mass_budget: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.mu not in (1, -1):
            raise ValueError(f"mu must be +1 or -1, got {self.mu}")
        if not 0 < self.cfl_safety <= MAX_CFL_SAFETY:
            raise ValueError(f"CFL safety must lie in (0, {MAX_CFL_SAFETY}], got {self.cfl_safety}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be non-negative, got {self.t_end}")
        if self.observer_cadence <= 0:
            raise ValueError(f"Observer cadence must be positive, got {self.observer_cadence}")
        if self.interpolation != "cubic":
            raise ValueError(f"Only cubic interpolation is available, got {self.interpolation}")
        if self.dt is not None and self.dt <= 0:
            raise ValueError(f"Fixed dt must be positive, got {self.dt}")

    @property
    def effective_mu(self) -> float:
        return float(self.mu) if self.force_enabled else 0.0

    def digest(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()


def free_transport_exact(f0: PhaseProfile, t: float, x: Sequence[np.ndarray], v: Sequence[np.ndarray]):
    """
    The free flow: f(t, x, v) = f0(x - v t, v).
    """
    return f0([xi - vi * t for xi, vi in zip(x, v)], v)


def gaussian_free_density(eps: float, t: float, x: Sequence[np.ndarray], width: float = 1.0):
    """
    rho(t, x) for f0 = eps exp(-(|x|^2 + |v|^2) / width^2) under free transport.
    """
    n = len(x)
    spread = width**2 * (1.0 + t**2)
    radius2 = sum(xi**2 for xi in x)
    return eps * (math.pi * width**2) ** (n / 2.0) * (1.0 + t**2) ** (-n / 2.0) * np.exp(-radius2 / spread)


def _cubic_weights(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (
        -theta * (theta - 1.0) * (theta - 2.0) / 6.0,
        (theta + 1.0) * (theta - 1.0) * (theta - 2.0) / 2.0,
        -(theta + 1.0) * theta * (theta - 2.0) / 2.0,
        (theta + 1.0) * theta * (theta - 1.0) / 6.0,
    )


def _cubic_shift(chunk: np.ndarray, axis: int, shift: np.ndarray) -> np.ndarray:
    """
    out[j] = chunk(j - shift) along `axis` by 4-point Lagrange interpolation, zero
    outside the grid. `shift` is in cells and constant along `axis`.
    """
    size = chunk.shape[axis]
    shift = np.asarray(shift, dtype=float)
    lower = np.floor(-shift)
    theta = -shift - lower
    positions = np.arange(size).reshape([-1 if a == axis else 1 for a in range(chunk.ndim)])
    base = positions + lower.astype(np.int64)
    out = np.zeros(chunk.shape)
    for offset, weight in zip((-1, 0, 1, 2), _cubic_weights(theta)):
        index = np.broadcast_to(base + offset, chunk.shape)
        valid = (index >= 0) & (index < size)
        gathered = np.take_along_axis(chunk, np.clip(index, 0, size - 1), axis=axis)
        out += weight * np.where(valid, gathered, 0.0)
    return out


def _chunked_shift(values: np.ndarray, axis: int, shift: np.ndarray, chunk_axis: int) -> np.ndarray:
    """
    Apply _cubic_shift one slab of `chunk_axis` at a time to bound index-array memory.
    """
    shift = np.asarray(shift, dtype=float)
    out = np.empty(values.shape)
    for i in range(values.shape[chunk_axis]):
        slab = [slice(None)] * values.ndim
        slab[chunk_axis] = slice(i, i + 1)
        slab = tuple(slab)
        local_shift = shift[slab] if shift.shape[chunk_axis] > 1 else shift
        out[slab] = _cubic_shift(values[slab], axis, local_shift)
    return out


def advect_x(values: np.ndarray, spec: GridSpec, dt: float) -> np.ndarray:
    """
    Exact free streaming x -> x + v dt along every spatial axis, by cubic
    interpolation of the backward trace.
    """
    n = spec.n
    v = spec.v_centers()
    for k in range(n):
        shape = [1] * (2 * n)
        shape[n + k] = spec.nv
        shift = (v * dt / spec.dx).reshape(shape)
        values = _chunked_shift(values, k, shift, n + k)
    return values


def advect_v(values: np.ndarray, spec: GridSpec, grad_phi: np.ndarray, mu: float, dt: float) -> np.ndarray:
    """
    Velocity kick v -> v + mu grad(phi)(x) dt; grad_phi has shape (n,) + x shape.
    """
    if mu == 0.0 or dt == 0.0:
        return values
    n = spec.n
    for k in range(n):
        shift = (mu * grad_phi[k] * dt / spec.dv).reshape(grad_phi[k].shape + (1,) * n)
        values = _chunked_shift(values, n + k, shift, 0)
    return values


def advect_phase(values: np.ndarray, spec: GridSpec, grad_phi: np.ndarray, mu: float, dt: float) -> np.ndarray:
    """
    Strang composition half x / full v / half x with a frozen field.
    """
    values = advect_x(values, spec, dt / 2.0)
    values = advect_v(values, spec, grad_phi, mu, dt)
    return advect_x(values, spec, dt / 2.0)


def stable_dt(spec: GridSpec, config: SolverConfig, max_grad_phi: float) -> float:
    limits = [spec.dx / spec.max_speed]
    if config.force_enabled and max_grad_phi > 0:
        limits.append(spec.dv / max_grad_phi)
    return config.cfl_safety * min(limits)


@dataclass(frozen=True, eq=False)
class StepResult:
    """
    Outcome of one Strang step: the new density, the field solved at the half step
    and the density it was solved from.
    """

    density: PhaseDensity
    field: FieldSolution
    midpoint_density: PhaseDensity
    dt: float

    @property
    def valid(self) -> bool:
        return self.field.valid and not self.density.contaminated


def strang_step(f: PhaseDensity, config: SolverConfig, dt: float) -> StepResult:
    spec = f.spec
    if spec.n != config.kernel.n:
        raise ValueError(f"Grid dimension {spec.n} does not match kernel dimension {config.kernel.n}")
    if dt < 0:
        raise ValueError(f"dt must be non-negative on the grid, got {dt}")
    transport_limit = config.cfl_safety * spec.dx / spec.max_speed
    if dt > transport_limit * (1.0 + 1e-12):
        raise CFLViolationError(f"dt={dt:.6g} exceeds the streaming limit", transport_limit)

    t_mid = f.time_tag + dt / 2.0
    half = f.with_values(advect_x(f.values, spec, dt / 2.0), t_mid)
    field_solution = solve_field(config.kernel, velocity_average(half), config.workers)
    max_grad = field_solution.grad_phi.sup()
    limit = stable_dt(spec, config, max_grad)
    if dt > limit * (1.0 + 1e-12):
        raise CFLViolationError(f"dt={dt:.6g} exceeds the force limit", limit)

    kicked = advect_v(half.values, spec, field_solution.grad_phi.values, config.effective_mu, dt)
    final = advect_x(kicked, spec, dt / 2.0)
    density = f.with_values(final, f.time_tag + dt)
    if density.contaminated:
        LOGGER.warning(f"Boundary contamination at t={density.time_tag:.4g}")
    return StepResult(density, field_solution, half, dt)


def step_semilagrangian(f: PhaseDensity, config: SolverConfig, dt: float) -> PhaseDensity:
    """
    One Strang-split step of the Vlasov equation on an n = 2 phase grid.
    """
    if f.spec.n != 2:
        raise ValueError(f"The semi-Lagrangian solver runs in n = 2, got {f.spec.n}")
    return strang_step(f, config, dt).density


def particle_field(p: ParticleEnsemble, grid: SpatialGrid, config: SolverConfig) -> FieldSolution:
    return solve_field(config.kernel, deposit(p, grid), config.workers)


@dataclass(frozen=True, eq=False)
class ParticleStepResult:
    ensemble: ParticleEnsemble
    field: FieldSolution
    off_domain_fraction: float
    dt: float

    @property
    def valid(self) -> bool:
        return self.off_domain_fraction <= OFF_DOMAIN_TOLERANCE and self.field.valid


def kick_drift_kick(
    p: ParticleEnsemble,
    config: SolverConfig,
    dt: float,
    grid: SpatialGrid,
    field_solution: Optional[FieldSolution] = None,
) -> ParticleStepResult:
    """
    Leapfrog step; the field at the start positions can be passed in from the
    previous step. dt may be negative.
    """
    if field_solution is None:
        field_solution = particle_field(p, grid, config)
    mu = config.effective_mu
    velocities = p.velocities + 0.5 * dt * mu * gather(field_solution.grad_phi, p.positions)
    positions = p.positions + dt * velocities
    moved = ParticleEnsemble(positions, velocities, p.weights, p.time_tag + dt)
    new_field = particle_field(moved, grid, config)
    velocities = velocities + 0.5 * dt * mu * gather(new_field.grad_phi, positions)
    ensemble = ParticleEnsemble(positions, velocities, p.weights, moved.time_tag)
    fraction = off_domain_fraction(ensemble, grid)
    if fraction > OFF_DOMAIN_TOLERANCE:
        LOGGER.warning(f"{fraction:.3e} of the particle mass left the grid at t={ensemble.time_tag:.4g}")
    return ParticleStepResult(ensemble, new_field, fraction, dt)


def step_particles(p: ParticleEnsemble, config: SolverConfig, dt: float, grid: SpatialGrid) -> ParticleEnsemble:
    """
    One kick-drift-kick step of the n = 3 particle solver.
    """
    if p.n != 3:
        raise ValueError(f"The particle solver runs in n = 3, got {p.n}")
    return kick_drift_kick(p, config, dt, grid).ensemble


@dataclass(frozen=True, eq=False)
class FieldSnapshot:
    time: float
    field: FieldSolution

    @property
    def residual_norm(self) -> float:
        return self.field.residual_norm


@dataclass(frozen=True, eq=False)
class StateSnapshot:
    time: float
    state: Union[PhaseDensity, ParticleEnsemble]
    field: FieldSolution

    @property
    def residual_norm(self) -> float:
        return self.field.residual_norm


@dataclass(eq=False)
class RunRecord:
    """
    Observable time series plus field and state snapshots of one run.
    """

    config_hash: str
    rows: list[dict] = field(default_factory=list)
    field_snapshots: list[FieldSnapshot] = field(default_factory=list)
    state_snapshots: list[StateSnapshot] = field(default_factory=list)
    extra: dict[str, object] = field(default_factory=dict)
    aborted: bool = False
    error: Optional[str] = None

    def append(self, row: dict):
        if self.rows and row["time"] <= self.rows[-1]["time"]:
            raise ValueError(f"Time stamps must increase: {row['time']} after {self.rows[-1]['time']}")
        self.rows.append(row)

    @property
    def times(self) -> list[float]:
        return [row["time"] for row in self.rows]

    def series(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def column(self, name: str) -> pd.Series:
        frame = self.series()
        if name not in frame.columns:
            raise KeyError(f"Observable {name} not recorded; available: {sorted(frame.columns)}")
        return frame.set_index("time")[name]

    def field_at(self, time: float) -> FieldSolution:
        for snapshot in self.field_snapshots:
            if math.isclose(snapshot.time, time, rel_tol=1e-9, abs_tol=1e-12):
                return snapshot.field
        available = ", ".join(f"{s.time:.6g}" for s in self.field_snapshots)
        raise KeyError(f"No field snapshot at t={time}; available times: {available}")


@dataclass(frozen=True, eq=False)
class RunState:
    """
    What observers and companions see after each step.
    """

    time: float
    step: int
    config: SolverConfig
    field: FieldSolution
    density: Optional[PhaseDensity] = None
    particles: Optional[ParticleEnsemble] = None
    step_result: Optional[StepResult] = None


Observer = Callable[[RunState], dict[str, float]]


class RunCompanion(Protocol):
    """
    State evolved in lock-step with a grid run, e.g. modified-field coefficients.
    """

    def start(self, state: RunState) -> None: ...

    def advance(self, state: RunState) -> None: ...


def _observation_times(t_end: float, cadence: float) -> list[float]:
    count = int(math.floor(t_end / cadence + 1e-9))
    times = [k * cadence for k in range(1, count + 1)]
    if not times or t_end - times[-1] > 1e-9 * max(t_end, 1.0):
        times.append(t_end)
    return [t for t in times if t > 0]


def _base_observables(state: RunState, grid: SpatialGrid) -> dict[str, float]:
    row = {
        "time": state.time,
        "sup_grad_phi": state.field.grad_phi.sup(),
        "field_residual": state.field.residual_norm,
        "field_valid": float(state.field.valid),
    }
    if state.density is not None:
        rho = velocity_average(state.density)
        row["mass"] = l1_norm(state.density)
        row["total_density"] = rho.integral()
        row["sup_rho"] = float(np.max(np.abs(rho.scalar)))
        row["boundary_flag"] = float(state.density.contaminated)
        row["negative_mass"] = state.density.negative_mass
    else:
        particles = state.particles
        rho = deposit(particles, grid)
        row["mass"] = particles.total_weight
        row["sup_rho"] = float(np.max(rho.scalar))
        row["off_domain_fraction"] = off_domain_fraction(particles, grid)
        row["boundary_flag"] = float(row["off_domain_fraction"] > OFF_DOMAIN_TOLERANCE)
    return row


def run(
    config: SolverConfig,
    initial: Union[PhaseDensity, ParticleEnsemble],
    observers: Iterable[Observer] = (),
    companions: Iterable[RunCompanion] = (),
    grid: Optional[SpatialGrid] = None,
    config_hash: Optional[str] = None,
) -> RunRecord:
    """
    Advance `initial` to config.t_end, recording observables at the configured
    cadence and snapshots at config.snapshot_times. Particle runs need the spatial
    grid used for deposition.
    """
    observers = list(observers)
    companions = list(companions)
    record = RunRecord(config_hash or config.digest())
    is_grid = isinstance(initial, PhaseDensity)
    if is_grid:
        grid = initial.spec.spatial
        mass = l1_norm(initial)
    else:
        if grid is None:
            raise ValueError("Particle runs need a deposition grid")
        mass = initial.total_weight
    if config.mass_budget is not None and mass > config.mass_budget:
        raise ValueError(f"Initial mass {mass:.4g} exceeds the budget {config.mass_budget:.4g}")

    def observe(state: RunState):
        row = _base_observables(state, grid)
        for observer in observers:
            row.update(observer(state))
        record.append(row)
        record.field_snapshots.append(FieldSnapshot(state.time, state.field))

    def maybe_snapshot(state: RunState, pending: list[float]):
        while pending and pending[0] <= state.time + 1e-9:
            pending.pop(0)
            current = state.density if state.density is not None else state.particles
            record.state_snapshots.append(StateSnapshot(state.time, current, state.field))

    if is_grid:
        field_solution = solve_field(config.kernel, velocity_average(initial), config.workers)
        state = RunState(0.0, 0, config, field_solution, density=initial)
    else:
        field_solution = particle_field(initial, grid, config)
        state = RunState(0.0, 0, config, field_solution, particles=initial)
    pending_snapshots = sorted(config.snapshot_times)
    LOGGER.info(f"Starting run {record.config_hash[:12]} to t={config.t_end} ({'grid' if is_grid else 'particles'})")

    try:
        for companion in companions:
            companion.start(state)
        observe(state)
        maybe_snapshot(state, pending_snapshots)
        t = 0.0
        step = 0
        for target in _observation_times(config.t_end, config.observer_cadence):
            while t < target - 1e-12:
                if is_grid:
                    dt = config.dt or stable_dt(state.density.spec, config, state.field.grad_phi.sup())
                    dt = min(dt, target - t)
                    result = strang_step(state.density, config, dt)
                    t = target if math.isclose(t + dt, target, rel_tol=1e-12, abs_tol=1e-12) else t + dt
                    step += 1
                    state = RunState(t, step, config, result.field, density=result.density, step_result=result)
                    for companion in companions:
                        companion.advance(state)
                else:
                    speed = float(np.max(np.abs(state.particles.velocities))) or 1.0
                    dt = config.dt or config.cfl_safety * grid.dx / speed
                    dt = min(dt, target - t)
                    result = kick_drift_kick(state.particles, config, dt, grid, state.field)
                    t = target if math.isclose(t + dt, target, rel_tol=1e-12, abs_tol=1e-12) else t + dt
                    step += 1
                    state = RunState(t, step, config, result.field, particles=result.ensemble)
            observe(state)
            maybe_snapshot(state, pending_snapshots)
    except ResourceBudgetError:
        raise
    except (ValueError, ArithmeticError, RuntimeError) as error:
        record.aborted = True
        record.error = f"{type(error).__name__}: {error}"
        LOGGER.warning(f"Run {record.config_hash[:12]} aborted at t={state.time:.4g}: {error}")
        raise RunAbortedError(record.error, record) from error
    LOGGER.info(f"Finished run {record.config_hash[:12]} after {len(record.rows)} observations")
    return record


def mass_error(record: RunRecord) -> float:
    """
    max_t | ||f(t)||_1 - ||f0||_1 | / ||f0||_1.
    """
    if not record.rows:
        raise ValueError("Record is empty")
    masses = np.asarray([row["mass"] for row in record.rows], dtype=float)
    if masses[0] == 0.0:
        return 0.0
    return float(np.max(np.abs(masses - masses[0])) / abs(masses[0]))


def dt_refinement_study(
    config: SolverConfig, initial: PhaseDensity, dts: Sequence[float]
) -> pd.DataFrame:
    """
    Final sup rho for each fixed dt; successive differences shrink by ~4 for a
    second-order splitting.
    """
    rows = []
    for dt in dts:
        fixed = SolverConfig(
            mu=config.mu,
            kernel=config.kernel,
            t_end=config.t_end,
            cfl_safety=config.cfl_safety,
            observer_cadence=config.t_end,
            force_enabled=config.force_enabled,
            dt=dt,
            workers=config.workers,
        )
        record = run(fixed, initial)
        rows.append({"dt": dt, "sup_rho": record.rows[-1]["sup_rho"]})
    return pd.DataFrame(rows)


def spatial_variance(f: PhaseDensity) -> float:
    """
    int |x|^2 rho dx / int rho dx.
    """
    rho = velocity_average(f)
    weight = rho.scalar
    total = float(weight.sum())
    if total == 0.0:
        return 0.0
    radius2 = sum(x**2 for x in rho.grid.mesh())
    return float(np.sum(radius2 * weight)) / total
