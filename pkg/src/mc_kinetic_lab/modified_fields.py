import math
import logging
from dataclasses import field, dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from mc_kinetic_lab.greens_fields import KernelSpec, solve_commuted_field
from mc_kinetic_lab.transport import RunState, RunRecord, advect_v, advect_x, advect_phase
from mc_kinetic_lab.diagnostics import EXCURSION_FACTOR, energy_N, ks_ratio, excursion, commuted_field_column
from mc_kinetic_lab.phase_grid import (
    GridSpec,
    PhaseDensity,
    ResourceBudgetError,
    l1_norm,
    central_derivative,
    apply_vfield_values,
)
from mc_kinetic_lab.vfield_algebra import (
    MultiIndex,
    make_gamma,
    expression_of,
    commute_with_Tphi_order1,
)

LOGGER = logging.getLogger(__name__)

MAX_MODIFIED_ORDER = 1


def modified_entries(n: int) -> tuple[int, ...]:
    """
    Family positions whose coefficients are evolved; translations need none.
    """
    return tuple(
        entry
        for entry, symbol in enumerate(make_gamma(n))
        if commute_with_Tphi_order1(symbol).requires_modification
    )


@dataclass(eq=False)
class CoefficientField:
    """
    varphi[(i, k)](t, x, v) for family position i and spatial direction k (1-based).
    Positions without an entry carry identically zero coefficients.
    """

    spec: GridSpec
    time_tag: float = 0.0
    values: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, spec: GridSpec, entries: Optional[Sequence[int]] = None, time_tag: float = 0.0) -> "CoefficientField":
        entries = modified_entries(spec.n) if entries is None else entries
        return cls(
            spec,
            time_tag,
            {(i, k): np.zeros(spec.shape) for i in entries for k in range(1, spec.n + 1)},
        )

    def component(self, i: int, k: int) -> Optional[np.ndarray]:
        return self.values.get((i, k))

    def apply_values(self, spec: GridSpec, values: np.ndarray, entry: int, t: float) -> np.ndarray:
        """
        Y^i g = Z^i g - sum_k varphi[(i, k)] d_{x^k} g.
        """
        result = apply_vfield_values(spec, values, expression_of(make_gamma(spec.n)[entry]), t)
        for k in range(1, spec.n + 1):
            coefficient = self.values.get((entry, k))
            if coefficient is None or not np.any(coefficient):
                continue
            result = result - coefficient * central_derivative(values, k - 1, spec.dx)
        return result

    def sup(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.values.values()), default=0.0)

    def copy(self) -> "CoefficientField":
        return CoefficientField(self.spec, self.time_tag, {key: v.copy() for key, v in self.values.items()})


def apply_modified_field(f: PhaseDensity, i: int, coeffs: CoefficientField, t: Optional[float] = None) -> np.ndarray:
    t = f.time_tag if t is None else t
    if not math.isclose(coeffs.time_tag, t, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(f"Coefficients at t={coeffs.time_tag} are not synchronized with t={t}")
    return coeffs.apply_values(f.spec, f.values, i, t)


def coefficient_sources(
    midpoint: PhaseDensity, kernel: KernelSpec, mu: float, t_mid: float, entries: Sequence[int], workers: int = 1
) -> dict[tuple[int, int], np.ndarray]:
    """
    mu * t * d_{x^k}(Z^i phi + c_i phi) on the x grid, Z^i phi from the commuted
    field equation.
    """
    n = midpoint.spec.n
    family = make_gamma(n)
    cache: dict = {}
    phi = solve_commuted_field(kernel, midpoint, MultiIndex(n), t_mid, workers, cache).phi.scalar
    sources = {}
    for i in entries:
        commuted = solve_commuted_field(kernel, midpoint, MultiIndex(n, (i,)), t_mid, workers, cache).phi.scalar
        constant = float(commute_with_Tphi_order1(family[i]).constant)
        potential = commuted + constant * phi
        for k in range(1, n + 1):
            sources[(i, k)] = mu * t_mid * central_derivative(potential, k - 1, midpoint.spec.dx)
    return sources


def evolve_coefficients(
    coeffs: CoefficientField,
    state: RunState,
    kernel: Optional[KernelSpec] = None,
    workers: int = 1,
) -> CoefficientField:
    """
    Advance every varphi[(i, k)] through the same Strang step as f, adding the
    source at the midpoint after the velocity kick.
    """
    result = state.step_result
    if result is None:
        raise ValueError("The run state carries no step result")
    dt = result.dt
    if not math.isclose(coeffs.time_tag + dt, state.time, rel_tol=1e-12, abs_tol=1e-12):
        raise ValueError(
            f"Coefficients at t={coeffs.time_tag} cannot take a step of {dt} to t={state.time}"
        )
    spec = coeffs.spec
    if spec != result.density.spec:
        raise ValueError("Coefficients and density live on different grids")
    config = state.config
    kernel = kernel or config.kernel
    mu = config.effective_mu
    t_mid = coeffs.time_tag + dt / 2.0
    entries = sorted({i for i, _ in coeffs.values})
    sources = {}
    if mu != 0.0 and entries:
        sources = coefficient_sources(result.midpoint_density, kernel, mu, t_mid, entries, workers)
    grad_phi = result.field.grad_phi.values
    evolved = {}
    for key, values in coeffs.values.items():
        source = sources.get(key)
        if source is None and not np.any(values):
            evolved[key] = values
            continue
        half = advect_x(values, spec, dt / 2.0)
        kicked = advect_v(half, spec, grad_phi, mu, dt)
        if source is not None:
            kicked = kicked + dt * source.reshape(source.shape + (1,) * spec.n)
        evolved[key] = advect_x(kicked, spec, dt / 2.0)
    return CoefficientField(spec, state.time, evolved)


@dataclass(frozen=True)
class CommutationDefect:
    """
    L^1 norms of the one-step discrete [T_phi, Z^i] f and [T_phi, Y^i] f.
    """

    entry: int
    plain: float
    modified: float

    @property
    def ratio(self) -> float:
        return self.modified / self.plain if self.plain > 0 else 0.0


def commutation_defect(
    before: PhaseDensity,
    after: PhaseDensity,
    coeffs_before: CoefficientField,
    coeffs_after: CoefficientField,
    entry: int,
    grad_phi: np.ndarray,
    mu: float,
) -> CommutationDefect:
    """
    (W(t + dt) f(t + dt) - S_dt W(t) f(t)) / dt for W = Z^i and W = Y^i, with S_dt
    the Strang transport in the step's frozen field. T_phi f = 0 makes this the
    discrete commutator.
    """
    spec = before.spec
    dt = after.time_tag - before.time_tag
    if dt <= 0:
        raise ValueError(f"Snapshots must be ordered in time: {before.time_tag} -> {after.time_tag}")
    expression = expression_of(make_gamma(spec.n)[entry])
    plain_before = apply_vfield_values(spec, before.values, expression, before.time_tag)
    plain_after = apply_vfield_values(spec, after.values, expression, after.time_tag)
    plain = (plain_after - advect_phase(plain_before, spec, grad_phi, mu, dt)) / dt
    modified_before = coeffs_before.apply_values(spec, before.values, entry, before.time_tag)
    modified_after = coeffs_after.apply_values(spec, after.values, entry, after.time_tag)
    modified = (modified_after - advect_phase(modified_before, spec, grad_phi, mu, dt)) / dt
    return CommutationDefect(entry, l1_norm(plain, spec), l1_norm(modified, spec))


class CoefficientTracker:
    """
    Run companion evolving the modified-field coefficients alongside an n = 2 grid
    run, and an observer reporting the bootstrap quantities at each observation.
    """

    def __init__(
        self,
        eps: float,
        energy_order: int = 2,
        defect_entries: Sequence[int] = (),
        kernel: Optional[KernelSpec] = None,
        workers: int = 1,
    ):
        if energy_order > 2:
            raise ValueError(f"Modified energies are computed for N <= 2, got {energy_order}")
        if eps <= 0:
            raise ValueError(f"eps must be positive: {eps}")
        self.eps = eps
        self.energy_order = energy_order
        self.defect_entries = tuple(defect_entries)
        self.kernel = kernel
        self.workers = workers
        self.coefficients: Optional[CoefficientField] = None
        self.snapshots: list[CoefficientField] = []
        self.defects: dict[int, CommutationDefect] = {}
        self._previous: Optional[PhaseDensity] = None

    def start(self, state: RunState) -> None:
        f = state.density
        if f is None or f.spec.n != 2:
            raise ValueError("Modified fields are tracked on n = 2 grid runs")
        spec = f.spec
        entries = modified_entries(spec.n)
        copies = len(entries) * spec.n + 4
        if copies * spec.storage_mb > spec.memory_budget_mb:
            raise ResourceBudgetError(
                f"Coefficient tracking needs {copies * spec.storage_mb:.1f} MB, budget is {spec.memory_budget_mb:.1f} MB"
            )
        self.coefficients = CoefficientField.zeros(spec, entries, state.time)
        self._previous = f
        self._maybe_snapshot(state)
        LOGGER.info(f"Tracking {len(entries) * spec.n} coefficient components")

    def advance(self, state: RunState) -> None:
        if self.coefficients is None:
            raise ValueError("Tracker advanced before start")
        previous = self.coefficients
        self.coefficients = evolve_coefficients(previous, state, self.kernel, self.workers)
        grad_phi = state.step_result.field.grad_phi.values
        for entry in self.defect_entries:
            self.defects[entry] = commutation_defect(
                self._previous, state.density, previous, self.coefficients, entry, grad_phi, state.config.effective_mu
            )
        self._previous = state.density
        self._maybe_snapshot(state)

    def _maybe_snapshot(self, state: RunState):
        if any(math.isclose(state.time, t, abs_tol=1e-9) for t in state.config.snapshot_times):
            self.snapshots.append(self.coefficients.copy())

    def observables(self, state: RunState) -> dict[str, float]:
        """
        sup |Y^alpha varphi| and sup |Y^alpha grad_x varphi| for |alpha| <= 1, the
        modified energies and the modified K-S ratio.
        """
        coeffs = self.coefficients
        f = state.density
        spec = f.spec
        family = make_gamma(spec.n)
        sup_y = [0.0] * (MAX_MODIFIED_ORDER + 1)
        sup_y_grad = [0.0] * (MAX_MODIFIED_ORDER + 1)
        for values in coeffs.values.values():
            if not np.any(values):
                continue
            gradients = [central_derivative(values, k, spec.dx) for k in range(spec.n)]
            for target, arrays in ((sup_y, [values]), (sup_y_grad, gradients)):
                for array in arrays:
                    target[0] = max(target[0], float(np.max(np.abs(array))))
                    for entry in range(len(family)):
                        applied = coeffs.apply_values(spec, array, entry, state.time)
                        target[1] = max(target[1], float(np.max(np.abs(applied))))
        row = {}
        for order in range(MAX_MODIFIED_ORDER + 1):
            row[f"sup_Y_varphi[{order}]"] = sup_y[order]
            row[f"sup_Y_grad_varphi[{order}]"] = sup_y_grad[order]
        energies = energy_N(f, self.energy_order, state.time, mode="modified", coefficients=coeffs)
        for k, value in energies.by_order().items():
            row[f"E_mod_{k}"] = value
        if self.energy_order >= spec.n:
            row["modified_ks_ratio"] = ks_ratio(f, state.time, energy=energies.energy(spec.n))
        for entry, defect in self.defects.items():
            row[f"commutation_defect[{family[entry].label}]"] = defect.ratio
        return row


def modified_ks_ratio(f: PhaseDensity, coeffs: CoefficientField, t: Optional[float] = None) -> float:
    """
    sup_x (1 + t + |x|)^n rho(|f|)(x) / sum_{|alpha| <= n} ||Y^alpha f||_{L^1}.
    """
    t = f.time_tag if t is None else t
    if not np.any(f.values):
        return 0.0
    energy = energy_N(f, f.spec.n, t, mode="modified", coefficients=coeffs).total
    return ks_ratio(f, t, energy=energy)


@dataclass(frozen=True, eq=False)
class ModifiedEnergyReport:
    """
    Normalised bootstrap ratio series, their max/median excursions over the window
    and the modified energies.
    """

    ratios: pd.DataFrame
    excursions: dict[str, float]
    window: tuple[float, float]
    energies: pd.DataFrame

    @property
    def flagged(self) -> list[str]:
        return [name for name, value in self.excursions.items() if value > EXCURSION_FACTOR]

    @property
    def passed(self) -> bool:
        return not self.flagged


def _require_columns(record: RunRecord, columns: Sequence[str]):
    if not record.rows:
        raise ValueError("Record is empty")
    missing = [column for column in columns if column not in record.rows[-1]]
    if missing:
        raise KeyError(f"Record has no coefficient history for {', '.join(missing)}")


COMMUTED_FIELD_PREFIX = "sup_grad_phi["


def bootstrap_check(
    record: RunRecord,
    eps: float,
    window: Optional[tuple[float, float]] = None,
    fields: Sequence[MultiIndex] = (),
) -> ModifiedEnergyReport:
    """
    Every recorded sup_grad_phi[<alpha>] column is held to the same
    (1 + t)^-2 sqrt(eps) envelope as the plain field; the first-order entries of
    `fields` must be present.
    """
    columns = [f"sup_Y_varphi[{k}]" for k in range(MAX_MODIFIED_ORDER + 1)]
    columns += [f"sup_Y_grad_varphi[{k}]" for k in range(MAX_MODIFIED_ORDER + 1)]
    columns += [commuted_field_column(alpha) for alpha in fields if len(alpha) == 1]
    _require_columns(record, columns)
    frame = record.series()
    t = frame["time"]
    root = math.sqrt(eps)
    ratios = pd.DataFrame({"time": t})
    for k in range(MAX_MODIFIED_ORDER + 1):
        ratios[f"varphi[{k}]"] = frame[f"sup_Y_varphi[{k}]"] / (root * (1.0 + np.log1p(t)))
        ratios[f"grad_varphi[{k}]"] = frame[f"sup_Y_grad_varphi[{k}]"] / root
    ratios["grad_phi"] = frame["sup_grad_phi"] * (1.0 + t) ** 2 / root
    for column in frame.columns:
        if column.startswith(COMMUTED_FIELD_PREFIX):
            ratios[column[len("sup_"):]] = frame[column] * (1.0 + t) ** 2 / root
    t_end = float(t.max())
    window = window or (t_end / 10.0, t_end)
    indexed = ratios.set_index("time")
    excursions = {name: excursion(indexed[name], window) for name in indexed.columns}
    energy_columns = [c for c in frame.columns if c.startswith("E_mod_")]
    report = ModifiedEnergyReport(ratios, excursions, window, frame[["time"] + energy_columns])
    if report.flagged:
        LOGGER.warning(f"Bootstrap ratios with a {EXCURSION_FACTOR}x excursion: {', '.join(report.flagged)}")
    return report


def modified_energy(record: RunRecord, tracker: CoefficientTracker, N: int) -> pd.DataFrame:
    """
    Modified E_N over time against 2 E_N[f0]; at t = 0 the modified and plain
    energies agree because varphi vanishes.
    """
    if N > tracker.energy_order:
        raise ValueError(f"Tracker recorded energies up to N={tracker.energy_order}, asked for {N}")
    column = f"E_mod_{N}"
    _require_columns(record, [column])
    frame = record.series()[["time", column]].rename(columns={column: "energy"})
    frame["bound"] = 2.0 * float(frame["energy"].iloc[0])
    frame["within"] = frame["energy"] <= frame["bound"]
    return frame
