import math
import logging
import itertools
from dataclasses import field, dataclass
from typing import Union, Literal, Iterable, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from mc_kinetic_lab.transport import RunState, RunRecord, gaussian_free_density
from mc_kinetic_lab.greens_fields import (
    KernelSpec,
    FieldSolution,
    bessel_k,
    bessel_k_bound,
    solve_commuted_field,
    kernel_decay_integral,
)
from mc_kinetic_lab.phase_grid import (
    GridSpec,
    PhaseDensity,
    l1_norm,
    bump_profile,
    sample_function,
    gaussian_profile,
    velocity_average,
    apply_multi_index,
    apply_vfield_values,
    apply_vfield_spatial,
)
from mc_kinetic_lab.vfield_algebra import (
    MultiIndex,
    FieldExpression,
    commutator,
    make_gamma,
    expression_of,
    free_transport,
    rho_commutation,
    gamma_structure_table,
    laplacian_commutation,
    weighted_derivative_identity_check,
)

LOGGER = logging.getLogger(__name__)

MAX_GRID_ORDER = 2
MIN_FIT_POINTS = 8
EXCURSION_FACTOR = 5.0


class StencilBudgetError(ValueError):
    """
    Too many stacked difference operators for the grid margin around the data.
    """


class ModifiedOperators(Protocol):
    """
    Anything that can apply Y^i for a family position i on raw phase-grid values.
    """

    time_tag: float

    def apply_values(self, spec: GridSpec, values: np.ndarray, entry: int, t: float) -> np.ndarray: ...


@dataclass(frozen=True)
class EnergyRow:
    """
    ||Z^alpha f||_{L^1} for every ordered alpha with |alpha| <= order, keyed by label.
    """

    time: float
    order: int
    mode: Literal["plain", "modified"]
    terms: dict[str, float]
    orders: dict[str, int]

    @property
    def total(self) -> float:
        return math.fsum(self.terms.values())

    def energy(self, order: int) -> float:
        if order > self.order:
            raise ValueError(f"Row holds energies up to N={self.order}, asked for {order}")
        return math.fsum(value for label, value in self.terms.items() if self.orders[label] <= order)

    def by_order(self) -> dict[int, float]:
        return {k: self.energy(k) for k in range(self.order + 1)}


@dataclass
class EnergyReport:
    rows: list[EnergyRow] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record = {"time": row.time, "mode": row.mode}
            record.update({f"E_{k}": value for k, value in row.by_order().items()})
            records.append(record)
        return pd.DataFrame(records)


def _check_stencil_budget(f: PhaseDensity, order: int):
    if order > MAX_GRID_ORDER:
        raise StencilBudgetError(f"Order {order} exceeds the grid budget of {MAX_GRID_ORDER}")
    margin = 2 * order + 1
    if min(f.spec.nx, f.spec.nv) < 2 * margin + 5:
        raise StencilBudgetError(f"Grid too small for order {order} stencils")
    if not f.within_margin(margin):
        raise StencilBudgetError(
            f"Data within {margin} cells of the boundary; order {order} stencils would reach it"
        )


def _family_operators(n: int, center: Optional[Sequence[float]]) -> list[FieldExpression]:
    expressions = [expression_of(symbol) for symbol in make_gamma(n)]
    if center is None or not any(center):
        return expressions
    return [expression.translated(center) for expression in expressions]


def energy_N(
    f: PhaseDensity,
    N: int,
    t: Optional[float] = None,
    mode: Literal["plain", "modified"] = "plain",
    coefficients: Optional[ModifiedOperators] = None,
    center: Optional[Sequence[float]] = None,
) -> EnergyRow:
    """
    Sum of ||Z^alpha f||_{L^1} (or ||Y^alpha f||) over ordered alpha with |alpha| <= N.
    Z^alpha f is built depth-first, each child applying one more field on the left.
    """
    t = f.time_tag if t is None else t
    if N < 0:
        raise ValueError(f"Energy order must be non-negative: {N}")
    if N > 0:
        _check_stencil_budget(f, N)
    if mode == "modified":
        if coefficients is None:
            raise ValueError("Modified energies need coefficient fields")
        if not math.isclose(coefficients.time_tag, t, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"Coefficients at t={coefficients.time_tag} do not match t={t}")
    elif mode != "plain":
        raise ValueError(f"Unknown energy mode: {mode}")

    spec = f.spec
    family = make_gamma(spec.n)
    operators = _family_operators(spec.n, center)
    terms: dict[str, float] = {}
    orders: dict[str, int] = {}

    def visit(values: np.ndarray, entries: tuple[int, ...]):
        label = MultiIndex(spec.n, entries).label
        terms[label] = l1_norm(values, spec)
        orders[label] = len(entries)
        if len(entries) == N:
            return
        for entry in range(len(family)):
            if mode == "modified":
                child = coefficients.apply_values(spec, values, entry, t)
            else:
                child = apply_vfield_values(spec, values, operators[entry], t)
            visit(child, (entry,) + entries)

    visit(f.values, ())
    return EnergyRow(t, N, mode, terms, orders)


def ks_ratio(
    f: PhaseDensity,
    t: Optional[float] = None,
    center: Optional[Sequence[float]] = None,
    energy: Optional[float] = None,
) -> float:
    """
    sup_x (1 + t + |x - c|)^n rho(|f|)(x) / E_n[f]. With a centre c the vector
    fields are re-centred at c as well, which makes the ratio translation covariant.
    """
    t = f.time_tag if t is None else t
    n = f.spec.n
    if energy is None:
        if not np.any(f.values):
            return 0.0
        energy = energy_N(f, n, t, center=center).total
    if energy == 0.0:
        return 0.0
    rho = velocity_average(f, absolute=True)
    c = center if center is not None else [0.0] * n
    distance = np.sqrt(sum((xi - ci) ** 2 for xi, ci in zip(rho.grid.mesh(), c)))
    return float(np.max((1.0 + t + distance) ** n * rho.scalar)) / energy


@dataclass(frozen=True)
class DecayFit:
    exponent: float
    intercept: float
    t_start: float
    t_end: float
    residual_rms: float
    point_count: int
    stderr: float = 0.0

    def to_dict(self) -> dict[str, float]:
        return {
            "exponent": self.exponent,
            "intercept": self.intercept,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "residual_rms": self.residual_rms,
            "point_count": self.point_count,
            "stderr": self.stderr,
        }


Series = Union[pd.Series, Iterable[tuple[float, float]]]


def _as_series(series: Series) -> pd.Series:
    if isinstance(series, pd.Series):
        return series.astype(float)
    pairs = list(series)
    if not pairs:
        return pd.Series(dtype=float)
    times, values = zip(*pairs)
    return pd.Series(values, index=pd.Index(times, name="time"), dtype=float)


def decay_fit(
    series: Series,
    window: Optional[tuple[float, float]] = None,
    min_points: int = MIN_FIT_POINTS,
) -> DecayFit:
    """
    Least-squares slope of log(value) against log(1 + t) over the window, which
    defaults to [t_max / 10, t_max].
    """
    data = _as_series(series).sort_index()
    if data.empty:
        raise ValueError("Cannot fit an empty series")
    times = data.index.to_numpy(dtype=float)
    if window is None:
        window = (times.max() / 10.0, times.max())
    t_start, t_end = window
    if t_start > t_end:
        raise ValueError(f"Window start {t_start} is after its end {t_end}")
    if t_start < times.min() - 1e-12 or t_end > times.max() + 1e-12:
        raise ValueError(f"Window [{t_start}, {t_end}] outside the series range [{times.min()}, {times.max()}]")
    selected = data[(times >= t_start - 1e-12) & (times <= t_end + 1e-12)]
    if len(selected) < min_points:
        raise ValueError(f"Need at least {min_points} points in the window, got {len(selected)}")
    values = selected.to_numpy(dtype=float)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValueError("Decay fits need strictly positive finite values")
    log_t = np.log1p(selected.index.to_numpy(dtype=float))
    log_v = np.log(values)
    fit = stats.linregress(log_t, log_v)
    residuals = log_v - (fit.intercept + fit.slope * log_t)
    return DecayFit(
        exponent=float(fit.slope),
        intercept=float(fit.intercept),
        t_start=float(t_start),
        t_end=float(t_end),
        residual_rms=float(np.sqrt(np.mean(residuals**2))),
        point_count=len(selected),
        stderr=float(fit.stderr),
    )


def excursion(series: Series, window: Optional[tuple[float, float]] = None) -> float:
    """
    max / median of a ratio series over the window (default [t_max / 10, t_max]).
    """
    data = _as_series(series).sort_index()
    times = data.index.to_numpy(dtype=float)
    if window is None:
        window = (times.max() / 10.0, times.max())
    selected = np.abs(data[(times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)].to_numpy())
    if selected.size == 0:
        raise ValueError(f"No samples in window {window}")
    median = float(np.median(selected))
    if median == 0.0:
        return 0.0 if float(selected.max()) == 0.0 else math.inf
    return float(selected.max()) / median


@dataclass(frozen=True)
class BilinearTerm:
    measured: float
    envelope: float
    time: float

    @property
    def ratio(self) -> float:
        return self.measured / self.envelope if self.envelope > 0 else 0.0


def _check_pair_budget(gamma: MultiIndex, beta: MultiIndex):
    for name, index in (("gamma", gamma), ("beta", beta)):
        if len(index) > MAX_GRID_ORDER:
            raise StencilBudgetError(f"|{name}| = {len(index)} exceeds the grid budget of {MAX_GRID_ORDER}")


def _commuted_potential(
    f: PhaseDensity, kernel: KernelSpec, gamma: MultiIndex, t: float, phi_solution: Optional[FieldSolution], cache: dict
) -> FieldSolution:
    if not gamma.entries and phi_solution is not None:
        return phi_solution
    return solve_commuted_field(kernel, f, gamma, t, cache=cache)


def bilinear_l1(grad_potential: np.ndarray, values: np.ndarray, spec: GridSpec) -> float:
    """
    || |grad_x psi| * g ||_{L^1} for a (n,) + x-shape gradient and phase-grid values.
    """
    magnitude = np.sqrt(np.sum(grad_potential**2, axis=0))
    weight = magnitude.reshape(magnitude.shape + (1,) * spec.n)
    return l1_norm(weight * values, spec)


def bilinear_term(
    f: PhaseDensity,
    phi_solution: Optional[FieldSolution],
    gamma: MultiIndex,
    beta: MultiIndex,
    t: Optional[float] = None,
    kernel: Optional[KernelSpec] = None,
    energy: Optional[float] = None,
) -> BilinearTerm:
    """
    measured = ||grad_x Z^gamma phi . Z^beta f||_{L^1}; envelope =
    E_N[f]^2 / (1 + t)^{n-1} for Poisson, one power better for Yukawa.
    """
    t = f.time_tag if t is None else t
    _check_pair_budget(gamma, beta)
    if kernel is None:
        if phi_solution is None:
            raise ValueError("Either a field solution or a kernel is required")
        kernel = KernelSpec("poisson" if f.spec.n >= 3 else "yukawa", f.spec.n)
    if not np.any(f.values):
        return BilinearTerm(0.0, 0.0, t)
    potential = _commuted_potential(f, kernel, gamma, t, phi_solution, {})
    commuted = apply_multi_index(f, beta, t)
    measured = bilinear_l1(potential.grad_phi.values, commuted.values, f.spec)
    if energy is None:
        energy = energy_N(f, max(len(gamma), len(beta)), t).total
    power = f.spec.n - 1 if kernel.kind == "poisson" else f.spec.n
    return BilinearTerm(measured, energy**2 / (1.0 + t) ** power, t)


def commuted_field_column(alpha: MultiIndex) -> str:
    return f"sup_grad_phi[{alpha.label}]" if alpha.entries else "sup_grad_phi"


def grad_field_decay(
    record: RunRecord, alpha: MultiIndex, window: Optional[tuple[float, float]] = None
) -> DecayFit:
    """
    Decay fit of sup_x |grad_x Z^alpha phi|. alpha = () reads the field snapshots;
    longer alpha need the commuted-field observer to have run.
    """
    if not alpha.entries:
        if not record.field_snapshots:
            raise KeyError("Record holds no field snapshots; available times: none")
        series = [(s.time, s.field.grad_phi.sup()) for s in record.field_snapshots]
        return decay_fit(series, window)
    column = commuted_field_column(alpha)
    if not record.rows or column not in record.rows[-1]:
        available = ", ".join(f"{time:.6g}" for time in record.times) or "none"
        raise KeyError(f"No {column} series recorded; available times: {available}")
    return decay_fit(record.column(column), window)


def commutator_pairs(alpha: MultiIndex) -> list[tuple[MultiIndex, MultiIndex]]:
    """
    (gamma, beta) with beta a proper order-preserving sub-word of alpha and gamma a
    sub-word of its complement; beta is then also taken with one boost prepended,
    which is how the velocity derivative in [T_phi, Z^alpha] is absorbed.
    """
    n = alpha.dimension
    family = make_gamma(n)
    boosts = [k for k, symbol in enumerate(family) if symbol.kind == "boost"]
    pairs = []
    positions = range(len(alpha))
    for keep in itertools.product((True, False), repeat=len(alpha)):
        if all(keep) and alpha.entries:
            continue
        beta = alpha.restricted([p for p in positions if keep[p]])
        rest = [p for p in positions if not keep[p]]
        for size in range(len(rest) + 1):
            for chosen in itertools.combinations(rest, size):
                gamma = alpha.restricted(chosen)
                pairs.append((gamma, beta))
                for boost in boosts:
                    pairs.append((gamma, MultiIndex(n, (boost,) + beta.entries)))
    return list(dict.fromkeys(pairs))


def commutator_budget(
    f: PhaseDensity, alpha: MultiIndex, kernel: KernelSpec, t: Optional[float] = None, workers: int = 1
) -> float:
    """
    (1 + t) sum over commutator_pairs of ||grad_x Z^gamma phi . Z^beta f||_{L^1}.
    """
    t = f.time_tag if t is None else t
    if len(alpha) > MAX_GRID_ORDER:
        raise StencilBudgetError(f"|alpha| = {len(alpha)} exceeds the grid budget of {MAX_GRID_ORDER}")
    if not alpha.entries or not np.any(f.values):
        return 0.0
    cache: dict = {}
    commuted: dict[tuple[int, ...], np.ndarray] = {}
    total = []
    for gamma, beta in commutator_pairs(alpha):
        potential = solve_commuted_field(kernel, f, gamma, t, workers, cache)
        if beta.entries not in commuted:
            commuted[beta.entries] = apply_multi_index(f, beta, t).values
        total.append(bilinear_l1(potential.grad_phi.values, commuted[beta.entries], f.spec))
    return (1.0 + t) * math.fsum(total)


def budget_column(alpha: MultiIndex) -> str:
    return f"commutator_budget[{alpha.label}]"


def high_dim_commutator_budget(record: RunRecord, alpha: MultiIndex) -> pd.DataFrame:
    """
    The recorded budget series with the (1 + t)^{n-2} normalisation of the
    integrand; measurement only.
    """
    column = budget_column(alpha)
    if not record.rows or column not in record.rows[-1]:
        raise KeyError(f"No {column} series recorded")
    frame = record.series()[["time", column]].rename(columns={column: "budget"})
    frame["normalized"] = frame["budget"] * (1.0 + frame["time"]) ** max(alpha.dimension - 2, 0)
    return frame


def epsilon_scaling(eps_values: Sequence[float], measurements: Sequence[float]) -> float:
    """
    Slope of log(measurement) against log(eps); 2 for quadratic dependence.
    """
    if len(eps_values) < 2 or len(eps_values) != len(measurements):
        raise ValueError("Need at least two eps values with one measurement each")
    measurements = np.asarray(measurements, dtype=float)
    if np.any(measurements <= 0):
        raise ValueError("Scaling fits need strictly positive measurements")
    return float(stats.linregress(np.log(eps_values), np.log(measurements)).slope)


def derivative_density_column(k: int = 1) -> str:
    return f"sup_rho_dx{k}"


def prop_derivative_decay(
    record: RunRecord, k: int = 1, window: Optional[tuple[float, float]] = None
) -> DecayFit:
    """
    Decay fit of sup_x |rho(d_{x^k} f)|. The expected exponent is -(n + 1); only
    reported since the derivative is under-resolved at late times.
    """
    column = derivative_density_column(k)
    if not record.rows or column not in record.rows[-1]:
        raise KeyError(f"No {column} series recorded")
    return decay_fit(record.column(column), window)


def rho_commutation_defect(f: PhaseDensity, t: Optional[float] = None) -> float:
    """
    Worst relative sup-norm defect of Z rho(f) = rho(Z f) + c rho(f) over the family.
    """
    t = f.time_tag if t is None else t
    rho = velocity_average(f)
    scale = max(float(np.max(np.abs(rho.scalar))), 1e-300)
    worst = 0.0
    for symbol in make_gamma(f.spec.n):
        expression = expression_of(symbol)
        lhs = apply_vfield_spatial(rho, expression, t).scalar
        commuted = f.with_values(apply_vfield_values(f.spec, f.values, expression, t))
        rhs = velocity_average(commuted).scalar + float(rho_commutation(symbol).constant) * rho.scalar
        inner = (slice(2, -2),) * f.spec.n
        worst = max(worst, float(np.max(np.abs(lhs - rhs)[inner])) / scale)
    return worst


# Observers


def energy_observer(N: int = MAX_GRID_ORDER):
    def observe(state: RunState) -> dict[str, float]:
        row = energy_N(state.density, N, state.time)
        return {f"E_{k}": value for k, value in row.by_order().items()}

    return observe


def ks_observer(center: Optional[Sequence[float]] = None):
    def observe(state: RunState) -> dict[str, float]:
        return {"ks_ratio": ks_ratio(state.density, state.time, center)}

    return observe


def commuted_field_observer(alphas: Sequence[MultiIndex], kernel: KernelSpec, workers: int = 1):
    def observe(state: RunState) -> dict[str, float]:
        cache: dict = {}
        row = {}
        for alpha in alphas:
            if not alpha.entries:
                continue
            solution = solve_commuted_field(kernel, state.density, alpha, state.time, workers, cache)
            row[commuted_field_column(alpha)] = solution.grad_phi.sup()
        return row

    return observe


def commutator_budget_observer(alpha: MultiIndex, kernel: KernelSpec, workers: int = 1):
    def observe(state: RunState) -> dict[str, float]:
        return {budget_column(alpha): commutator_budget(state.density, alpha, kernel, state.time, workers)}

    return observe


def derivative_density_observer(k: int = 1):
    def observe(state: RunState) -> dict[str, float]:
        f = state.density
        values = apply_vfield_values(f.spec, f.values, FieldExpression.from_terms(f.spec.n, {f"x{k}": 1}), state.time)
        rho = velocity_average(f.with_values(values))
        return {derivative_density_column(k): float(np.max(np.abs(rho.scalar)))}

    return observe


# Lemma suites


@dataclass(frozen=True)
class LemmaCheckReport:
    """
    One lemma's sampled parameters with measured values, allowed values and their
    ratio; the check passes when the worst asserted ratio is at most the threshold.
    """

    suite: str
    lemma: str
    table: pd.DataFrame
    threshold: float = 1.0

    @property
    def asserted(self) -> pd.DataFrame:
        if "asserted" not in self.table.columns:
            return self.table
        return self.table[self.table["asserted"]]

    @property
    def worst_ratio(self) -> float:
        asserted = self.asserted
        if asserted.empty:
            return 0.0
        return float(asserted["ratio"].max())

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst_ratio)) and self.worst_ratio <= self.threshold

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "lemma": self.lemma,
            "worst_ratio": self.worst_ratio,
            "threshold": self.threshold,
            "passed": self.passed,
            "rows": len(self.table),
        }


def _exact_rows(rows: list[dict]) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    frame["ratio"] = (~frame["holds"]).astype(float)
    return frame


def commutator_suite(dimensions: Sequence[int] = (2, 3, 4)) -> list[LemmaCheckReport]:
    transport_rows, span_rows, laplace_rows, rho_rows, identity_rows = [], [], [], [], []
    for n in dimensions:
        transport = free_transport(n)
        for symbol in make_gamma(n):
            transport_rows.append(
                {"n": n, "field": symbol.label, "holds": commutator(transport, expression_of(symbol)).is_zero}
            )
            expected_laplace = -2 if symbol.kind == "scaling" else 0
            constant = laplacian_commutation(symbol)
            laplace_rows.append({"n": n, "field": symbol.label, "constant": str(constant), "holds": constant == expected_laplace})
            rho = rho_commutation(symbol)
            expected_rho = n if symbol.kind == "scaling" else 0
            rho_rows.append({"n": n, "field": symbol.label, "constant": str(rho.constant), "holds": rho.constant == expected_rho})
        for entry in gamma_structure_table(n):
            span_rows.append(
                {
                    "n": n,
                    "left": entry.left.label,
                    "right": entry.right.label,
                    "expansion": str(entry.expansion),
                    "holds": entry.in_span,
                }
            )
        points = np.random.default_rng(n).uniform(0.5, 2.0, size=(8, n))
        identity_rows.append({"n": n, "holds": weighted_derivative_identity_check(n, points, seed=n)})
    return [
        LemmaCheckReport("commutators", "transport_commutes", _exact_rows(transport_rows), 0.0),
        LemmaCheckReport("commutators", "structure_in_span", _exact_rows(span_rows), 0.0),
        LemmaCheckReport("commutators", "laplacian_commutation", _exact_rows(laplace_rows), 0.0),
        LemmaCheckReport("commutators", "rho_commutation", _exact_rows(rho_rows), 0.0),
        LemmaCheckReport("commutators", "weighted_derivative_identity", _exact_rows(identity_rows), 0.0),
        _rho_grid_check(),
    ]


def _rho_grid_check(tolerance: float = 1e-8) -> LemmaCheckReport:
    spec = GridSpec(n=2, x_extent=6.0, v_extent=6.0, nx=24, nv=24)
    rows = []
    for t in (0.0, 1.5):
        f = sample_function(spec, gaussian_profile(1e-3, center=[0.5, -0.25]))
        defect = rho_commutation_defect(f, t)
        rows.append({"t": t, "measured": defect, "bound": tolerance, "ratio": defect / tolerance})
    return LemmaCheckReport("commutators", "rho_commutation_on_grid", pd.DataFrame(rows))


def bessel_suite(
    orders: Sequence[float] = (0.5, 1.0, 1.5, 2.0),
    radii: Optional[Sequence[float]] = None,
    envelope_constant: float = 3.0,
) -> list[LemmaCheckReport]:
    radii = np.logspace(-3, 2, 26) if radii is None else np.asarray(radii, dtype=float)
    closed_rows = []
    for r in radii:
        exact = math.sqrt(math.pi / (2.0 * r)) * math.exp(-r)
        error = abs(bessel_k(0.5, r) - exact) / exact
        closed_rows.append({"r": r, "measured": error, "bound": 1e-10, "ratio": error / 1e-10})
    envelope_rows = []
    for nu in orders:
        for r in radii:
            value = bessel_k(nu, r)
            envelope_rows.append({"nu": nu, "r": r, "measured": value, "bound": bessel_k_bound(nu, r), "ratio": value / bessel_k_bound(nu, r)})
    LOGGER.info(f"Bessel sweep over {len(orders)} orders and {len(radii)} radii done")
    return [
        LemmaCheckReport("bessel", "closed_form_half_order", pd.DataFrame(closed_rows)),
        LemmaCheckReport("bessel", "envelope", pd.DataFrame(envelope_rows), envelope_constant),
    ]


def kernel_integral_suite(
    dimensions: Sequence[int] = (2, 3),
    distances: Sequence[float] = (0.5, 1.0, 5.0, 20.0, 100.0),
) -> list[LemmaCheckReport]:
    origin_rows, growth_rows, slope_rows = [], [], []
    for n in dimensions:
        at_origin = kernel_decay_integral(n, 0.0).total
        error = abs(at_origin - 2.0 * math.pi) / (2.0 * math.pi)
        origin_rows.append({"n": n, "measured": at_origin, "bound": 2.0 * math.pi, "ratio": error / 1e-8})
        for distance in distances:
            value = kernel_decay_integral(n, distance).total
            growth_rows.append({"n": n, "distance": distance, "measured": value, "bound": 1.5 * at_origin, "ratio": value / (1.5 * at_origin)})
        far = np.logspace(1.0, 2.0, 8)
        middle = [kernel_decay_integral(n, d).middle for d in far]
        slope = float(stats.linregress(np.log(far), np.log(middle)).slope)
        bound = 1.0 - n / 2.0 + 0.1
        # Ratio of the fitted power law to the envelope at the far end of the window.
        slope_rows.append({"n": n, "measured": slope, "bound": bound, "ratio": far[-1] ** (slope - bound)})
    return [
        LemmaCheckReport("kernel-integral", "value_at_origin", pd.DataFrame(origin_rows)),
        LemmaCheckReport("kernel-integral", "bounded_growth", pd.DataFrame(growth_rows)),
        LemmaCheckReport("kernel-integral", "near_region_slope", pd.DataFrame(slope_rows)),
    ]


def free_transport_ks_ratio(eps: float, n: int, t: float, energy: float, width: float = 1.0) -> float:
    """
    K-S ratio of Gaussian data under free transport: the energies are conserved
    because every field commutes with T, and rho is known in closed form.
    """
    radius = np.linspace(0.0, 12.0 * (1.0 + t) * width, 20001)
    rho = gaussian_free_density(eps, t, [radius] + [np.zeros_like(radius)] * (n - 1), width)
    return float(np.max((1.0 + t + radius) ** n * rho)) / energy


def ks_suite(
    spec: Optional[GridSpec] = None,
    eps: float = 1e-3,
    times: Sequence[float] = (1.0, 5.0, 25.0),
    random_samples: int = 4,
    seed: int = 0,
) -> list[LemmaCheckReport]:
    spec = spec or GridSpec(n=2, x_extent=8.0, v_extent=8.0, nx=32, nv=32)
    n = spec.n
    f0 = sample_function(spec, gaussian_profile(eps))
    energy0 = energy_N(f0, n).total
    baseline = ks_ratio(f0, 0.0, energy=energy0)

    shift = [4 * spec.dx, -2 * spec.dx]
    moved = sample_function(spec, gaussian_profile(eps, center=shift))
    moved_ratio = ks_ratio(moved, 0.0, center=shift)
    difference = abs(moved_ratio - baseline) / baseline
    translation_rows = [{"shift": str(shift), "measured": moved_ratio, "bound": baseline, "ratio": difference / 1e-3, "asserted": True}]
    scaled = sample_function(spec, gaussian_profile(eps, width=1.1))
    scaled_ratio = ks_ratio(scaled, 0.0)
    translation_rows.append(
        {"shift": "scale 1.1", "measured": scaled_ratio, "bound": baseline, "ratio": abs(scaled_ratio - baseline) / baseline / 1e-3, "asserted": False}
    )

    reference = free_transport_ks_ratio(eps, n, 0.0, energy0)
    stability_rows = []
    for t in times:
        value = free_transport_ks_ratio(eps, n, t, energy0)
        stability_rows.append({"t": t, "measured": value, "bound": 2.0 * reference, "ratio": max(value / reference, reference / value) / 2.0})

    rng = np.random.default_rng(seed)
    random_rows = []
    for sample in range(random_samples):
        center = rng.uniform(-1.5, 1.5, size=n).tolist()
        radius = float(rng.uniform(2.0, 3.5))
        f = sample_function(spec, bump_profile(eps, radius, center))
        value = ks_ratio(f, 0.0)
        random_rows.append({"sample": sample, "radius": radius, "measured": value, "bound": 5.0 * baseline, "ratio": value / (5.0 * baseline)})
    LOGGER.info(f"K-S suite baseline ratio {baseline:.4g}")
    return [
        LemmaCheckReport("ks", "translation_invariance", pd.DataFrame(translation_rows)),
        LemmaCheckReport("ks", "free_transport_stability", pd.DataFrame(stability_rows)),
        LemmaCheckReport("ks", "random_data", pd.DataFrame(random_rows)),
    ]


SUITES = {
    "commutators": commutator_suite,
    "bessel": bessel_suite,
    "kernel-integral": kernel_integral_suite,
    "ks": ks_suite,
}


def run_suite(name: str) -> list[LemmaCheckReport]:
    if name == "all":
        return [report for suite in SUITES.values() for report in suite()]
    if name not in SUITES:
        raise ValueError(f"Unknown suite {name}; choose from {', '.join(list(SUITES) + ['all'])}")
    LOGGER.info(f"Running lemma suite {name}")
    return SUITES[name]()
