import logging
import itertools
from fractions import Fraction
from functools import lru_cache
from dataclasses import field, dataclass
from typing import Union, Literal, Iterable, Optional, Sequence

import numpy as np
import sympy as sp

LOGGER = logging.getLogger(__name__)

SymbolKind = Literal["translation", "boost", "rotation", "scaling"]


@lru_cache(maxsize=None)
def phase_variables(n: int) -> tuple[sp.Symbol, tuple[sp.Symbol, ...], tuple[sp.Symbol, ...]]:
    """
    The symbols (t, x1..xn, v1..vn) used for polynomial coefficients in dimension n.
    """
    if n < 1:
        raise ValueError(f"Dimension must be positive: {n}")
    t = sp.Symbol("t")
    xs = tuple(sp.Symbol(f"x{i}") for i in range(1, n + 1))
    vs = tuple(sp.Symbol(f"v{i}") for i in range(1, n + 1))
    return t, xs, vs


def generators(n: int) -> tuple[sp.Symbol, ...]:
    t, xs, vs = phase_variables(n)
    return (t,) + xs + vs


def slot_names(n: int) -> tuple[str, ...]:
    """
    Derivative slots in canonical order: d_t, d_x1..d_xn, d_v1..d_vn.
    """
    return ("t",) + tuple(f"x{i}" for i in range(1, n + 1)) + tuple(
        f"v{i}" for i in range(1, n + 1)
    )


def slot_variable(slot: str, n: int) -> sp.Symbol:
    t, xs, vs = phase_variables(n)
    if slot == "t":
        return t
    family, index = slot[0], int(slot[1:])
    if family not in ("x", "v") or not 1 <= index <= n:
        raise ValueError(f"Invalid derivative slot {slot} for dimension {n}")
    return xs[index - 1] if family == "x" else vs[index - 1]


def _slot_key(slot: str) -> tuple[int, int]:
    if slot == "t":
        return (0, 0)
    return (1 if slot[0] == "x" else 2, int(slot[1:]))


def _as_poly(expr, n: int) -> sp.Poly:
    return sp.Poly(sp.sympify(expr), *generators(n), domain=sp.QQ)


def _poly_text(poly: sp.Poly) -> str:
    gens = poly.gens
    pieces = []
    for monom, coeff in poly.terms():
        factors = []
        for gen, power in zip(gens, monom):
            if power == 1:
                factors.append(str(gen))
            elif power > 1:
                factors.append(f"{gen}^{power}")
        monomial = "*".join(factors) if factors else "1"
        pieces.append(f"{coeff}*{monomial}")
    return " + ".join(pieces) if pieces else "0"


@dataclass(frozen=True)
class FieldExpression:
    """
    A first-order differential operator sum_s a_s(t,x,v) d_s + a_0(t,x,v) with
    polynomial coefficients over the rationals.

    `terms` holds (slot, coefficient) pairs in canonical slot order with no zero
    coefficients, so structural equality is coefficient-wise equality.
    """

    dimension: int
    terms: tuple[tuple[str, sp.Poly], ...] = ()
    zeroth: Optional[sp.Poly] = None

    def __post_init__(self):
        if self.zeroth is None:
            object.__setattr__(self, "zeroth", _as_poly(0, self.dimension))

    @classmethod
    def from_terms(
        cls, n: int, coefficients: dict[str, object], zeroth: object = 0
    ) -> "FieldExpression":
        """
        Build a canonical expression from a slot -> coefficient mapping. Coefficients
        may be anything sympy can turn into a polynomial in (t, x, v).
        """
        valid = set(slot_names(n))
        polys = []
        for slot, coefficient in coefficients.items():
            if slot not in valid:
                raise ValueError(f"Invalid derivative slot {slot} for dimension {n}")
            poly = _as_poly(coefficient, n)
            if not poly.is_zero:
                polys.append((slot, poly))
        polys.sort(key=lambda item: _slot_key(item[0]))
        return cls(n, tuple(polys), _as_poly(zeroth, n))

    @classmethod
    def zero(cls, n: int) -> "FieldExpression":
        return cls.from_terms(n, {})

    @property
    def is_zero(self) -> bool:
        return not self.terms and self.zeroth.is_zero

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(slot for slot, _ in self.terms)

    def coefficient(self, slot: str) -> sp.Poly:
        for name, poly in self.terms:
            if name == slot:
                return poly
        return _as_poly(0, self.dimension)

    def coefficient_map(self) -> dict[str, sp.Poly]:
        return dict(self.terms)

    def has_time_derivative(self) -> bool:
        return "t" in self.slots

    def _check_dimension(self, other: "FieldExpression"):
        if self.dimension != other.dimension:
            raise ValueError(
                f"Dimension mismatch: {self.dimension} vs {other.dimension}"
            )

    def __add__(self, other: "FieldExpression") -> "FieldExpression":
        self._check_dimension(other)
        merged = {slot: poly.as_expr() for slot, poly in self.terms}
        for slot, poly in other.terms:
            merged[slot] = merged.get(slot, 0) + poly.as_expr()
        return FieldExpression.from_terms(
            self.dimension, merged, (self.zeroth + other.zeroth).as_expr()
        )

    def __neg__(self) -> "FieldExpression":
        return self.scale(-1)

    def __sub__(self, other: "FieldExpression") -> "FieldExpression":
        return self + (-other)

    def scale(self, factor: Union[int, Fraction]) -> "FieldExpression":
        factor = sp.Rational(factor.numerator, factor.denominator) if isinstance(
            factor, Fraction
        ) else sp.Rational(factor)
        return FieldExpression.from_terms(
            self.dimension,
            {slot: factor * poly.as_expr() for slot, poly in self.terms},
            factor * self.zeroth.as_expr(),
        )

    def derivation(self, poly: sp.Poly) -> sp.Poly:
        """
        Apply the first-order (derivative) part of the operator to a polynomial.
        """
        result = _as_poly(0, self.dimension)
        for slot, coefficient in self.terms:
            result = result + coefficient * poly.diff(slot_variable(slot, self.dimension))
        return result

    def apply(self, expr: sp.Expr) -> sp.Expr:
        """
        Apply the operator to an arbitrary sympy expression, e.g. an undefined function.
        """
        n = self.dimension
        result = self.zeroth.as_expr() * expr
        for slot, coefficient in self.terms:
            result += coefficient.as_expr() * sp.diff(expr, slot_variable(slot, n))
        return result

    def macroscopic(self) -> "FieldExpression":
        """
        The counterpart acting on functions of (t, x): velocity slots are dropped.
        Only defined when the remaining coefficients do not depend on v.
        """
        _, _, vs = phase_variables(self.dimension)
        kept = {}
        for slot, poly in self.terms:
            if slot.startswith("v"):
                continue
            if any(poly.degree(v) > 0 for v in vs):
                raise ValueError(f"Coefficient of d_{slot} depends on velocity")
            kept[slot] = poly.as_expr()
        return FieldExpression.from_terms(self.dimension, kept, self.zeroth.as_expr())

    def translated(self, center: Sequence[float]) -> "FieldExpression":
        """
        Conjugate by the spatial translation x -> x - center.
        """
        n = self.dimension
        if len(center) != n:
            raise ValueError(f"Center has {len(center)} components, expected {n}")
        _, xs, _ = phase_variables(n)
        substitution = {
            x: x - sp.Rational(str(c)) for x, c in zip(xs, center) if c != 0
        }
        if not substitution:
            return self
        return FieldExpression.from_terms(
            n,
            {slot: poly.as_expr().subs(substitution) for slot, poly in self.terms},
            self.zeroth.as_expr().subs(substitution),
        )

    def to_text(self) -> str:
        """
        Canonical text form: one bracketed polynomial per slot in slot order, then
        the zeroth-order polynomial.
        """
        pieces = [f"[{_poly_text(poly)}]*d_{slot}" for slot, poly in self.terms]
        if not self.zeroth.is_zero:
            pieces.append(f"[{_poly_text(self.zeroth)}]")
        return " + ".join(pieces) if pieces else "0"

    def __repr__(self):
        return f"{FieldExpression.__name__}(n={self.dimension}, {self.to_text()})"


@dataclass(frozen=True, order=True)
class VectorFieldSymbol:
    """
    One member of the commuting family: Translation(i), Boost(i), Rotation(i, j)
    with i < j, or Scaling. Indices are 1-based.
    """

    kind: SymbolKind
    dimension: int
    i: int = 0
    j: int = 0

    def __post_init__(self):
        n = self.dimension
        if n < 2:
            raise ValueError(f"Dimension must be at least 2: {n}")
        if self.kind in ("translation", "boost"):
            if not 1 <= self.i <= n:
                raise ValueError(f"Index {self.i} out of range for dimension {n}")
        elif self.kind == "rotation":
            if not 1 <= self.i < self.j <= n:
                raise ValueError(
                    f"Rotation indices must satisfy 1 <= i < j <= {n}: ({self.i}, {self.j})"
                )
        elif self.kind != "scaling":
            raise ValueError(f"Unknown vector field kind: {self.kind}")

    @property
    def label(self) -> str:
        if self.kind == "rotation":
            return f"rotation({self.i},{self.j})"
        if self.kind == "scaling":
            return "scaling"
        return f"{self.kind}({self.i})"

    def expression(self) -> FieldExpression:
        return expression_of(self)

    def __str__(self):
        return self.label


def translation_expression(i: int, n: int) -> FieldExpression:
    return FieldExpression.from_terms(n, {f"x{i}": 1})


def boost_expression(i: int, n: int) -> FieldExpression:
    t, _, _ = phase_variables(n)
    return FieldExpression.from_terms(n, {f"x{i}": t, f"v{i}": 1})


def rotation_x_expression(i: int, j: int, n: int) -> FieldExpression:
    """
    x^i d_{x^j} - x^j d_{x^i}; zero when i == j.
    """
    if i == j:
        return FieldExpression.zero(n)
    _, xs, _ = phase_variables(n)
    return FieldExpression.from_terms(n, {f"x{j}": xs[i - 1], f"x{i}": -xs[j - 1]})


def rotation_expression(i: int, j: int, n: int) -> FieldExpression:
    """
    The microscopic rotation, normalized so that (i, i) is zero and (j, i) is
    minus (i, j).
    """
    if i == j:
        return FieldExpression.zero(n)
    if i > j:
        return -rotation_expression(j, i, n)
    _, xs, vs = phase_variables(n)
    return FieldExpression.from_terms(
        n,
        {
            f"x{j}": xs[i - 1],
            f"x{i}": -xs[j - 1],
            f"v{j}": vs[i - 1],
            f"v{i}": -vs[j - 1],
        },
    )


def scaling_x_expression(n: int) -> FieldExpression:
    _, xs, _ = phase_variables(n)
    return FieldExpression.from_terms(n, {f"x{k}": xs[k - 1] for k in range(1, n + 1)})


def scaling_expression(n: int) -> FieldExpression:
    _, xs, vs = phase_variables(n)
    coefficients = {f"x{k}": xs[k - 1] for k in range(1, n + 1)}
    coefficients.update({f"v{k}": vs[k - 1] for k in range(1, n + 1)})
    return FieldExpression.from_terms(n, coefficients)


def free_transport(n: int) -> FieldExpression:
    """
    T = d_t + sum_i v^i d_{x^i}.
    """
    _, _, vs = phase_variables(n)
    coefficients = {"t": 1}
    coefficients.update({f"x{k}": vs[k - 1] for k in range(1, n + 1)})
    return FieldExpression.from_terms(n, coefficients)


@lru_cache(maxsize=None)
def expression_of(symbol: VectorFieldSymbol) -> FieldExpression:
    n = symbol.dimension
    if symbol.kind == "translation":
        return translation_expression(symbol.i, n)
    if symbol.kind == "boost":
        return boost_expression(symbol.i, n)
    if symbol.kind == "rotation":
        return rotation_expression(symbol.i, symbol.j, n)
    return scaling_expression(n)


@lru_cache(maxsize=None)
def make_gamma(n: int) -> tuple[VectorFieldSymbol, ...]:
    """
    The ordered commuting family for dimension n: boosts, translations, rotations
    in lexicographic (i, j) order, then scaling.
    """
    if n < 2:
        raise ValueError(f"The commuting family needs dimension n >= 2, got {n}")
    boosts = [VectorFieldSymbol("boost", n, i) for i in range(1, n + 1)]
    translations = [VectorFieldSymbol("translation", n, i) for i in range(1, n + 1)]
    rotations = [
        VectorFieldSymbol("rotation", n, i, j)
        for i, j in itertools.combinations(range(1, n + 1), 2)
    ]
    family = tuple(boosts + translations + rotations + [VectorFieldSymbol("scaling", n)])
    assert len(family) == 2 * n + n * (n - 1) // 2 + 1
    return family


def gamma_size(n: int) -> int:
    return 2 * n + n * (n - 1) // 2 + 1


@dataclass(frozen=True)
class MultiIndex:
    """
    alpha = (alpha^1, ..., alpha^k) of 0-based positions into make_gamma(n);
    Z^alpha = Z^{alpha^1} ... Z^{alpha^k}, so the last entry acts first.
    """

    dimension: int
    entries: tuple[int, ...] = ()

    def __post_init__(self):
        size = gamma_size(self.dimension)
        for entry in self.entries:
            if not 0 <= entry < size:
                raise ValueError(
                    f"Multi-index entry {entry} outside the family of size {size}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def symbols(self) -> tuple[VectorFieldSymbol, ...]:
        family = make_gamma(self.dimension)
        return tuple(family[entry] for entry in self.entries)

    def restricted(self, positions: Iterable[int]) -> "MultiIndex":
        return MultiIndex(self.dimension, tuple(self.entries[p] for p in positions))

    @property
    def label(self) -> str:
        if not self.entries:
            return "()"
        return ".".join(symbol.label for symbol in self.symbols())

    def __str__(self):
        return self.label


def multi_indices(n: int, max_order: int) -> list[MultiIndex]:
    """
    All ordered multi-indices with |alpha| <= max_order, shortest first.
    """
    size = gamma_size(n)
    result = []
    for order in range(max_order + 1):
        for entries in itertools.product(range(size), repeat=order):
            result.append(MultiIndex(n, entries))
    return result


def commutator(a: FieldExpression, b: FieldExpression) -> FieldExpression:
    """
    Lie bracket [A, B] = AB - BA of two first-order operators.
    """
    a._check_dimension(b)
    n = a.dimension
    slots = sorted(set(a.slots) | set(b.slots), key=_slot_key)
    coefficients = {}
    for slot in slots:
        value = a.derivation(b.coefficient(slot)) - b.derivation(a.coefficient(slot))
        coefficients[slot] = value.as_expr()
    zeroth = a.derivation(b.zeroth) - b.derivation(a.zeroth)
    return FieldExpression.from_terms(n, coefficients, zeroth.as_expr())


@dataclass(frozen=True)
class NotInSpan:
    """
    Returned by express_in_basis when no constant combination of the basis matches.
    """

    reason: str


def _coefficient_vector(expression: FieldExpression) -> dict[tuple[str, tuple[int, ...]], sp.Rational]:
    vector = {}
    for slot, poly in expression.terms:
        for monom, coeff in poly.terms():
            vector[(slot, monom)] = coeff
    for monom, coeff in expression.zeroth.terms():
        vector[("1", monom)] = coeff
    return vector


def express_in_basis(
    expression: FieldExpression, basis: Sequence[FieldExpression]
) -> Union[dict[int, Fraction], NotInSpan]:
    """
    Find constants c_k with expression = sum_k c_k basis[k]. Free parameters of an
    underdetermined system are set to zero.
    """
    for first, second in itertools.combinations(range(len(basis)), 2):
        if basis[first] == basis[second]:
            raise ValueError(f"Basis entries {first} and {second} are identical")
    if expression.is_zero:
        return {k: Fraction(0) for k in range(len(basis))}

    target = _coefficient_vector(expression)
    columns = [_coefficient_vector(element) for element in basis]
    keys = sorted(set(target).union(*[set(column) for column in columns]))
    spanned = set().union(*[set(column) for column in columns]) if columns else set()
    missing = [key for key in target if key not in spanned]
    if missing:
        slot, _ = missing[0]
        return NotInSpan(f"no basis element carries a d_{slot} term of that degree")

    matrix = sp.Matrix(
        [[column.get(key, 0) for column in columns] for key in keys]
    )
    rhs = sp.Matrix([target.get(key, 0) for key in keys])
    try:
        solution, params = matrix.gauss_jordan_solve(rhs)
    except ValueError:
        return NotInSpan("linear system is inconsistent")
    if params.shape[0] > 0:
        solution = solution.subs({p: 0 for p in params})
    return {k: Fraction(str(solution[k])) for k in range(len(basis))}


def laplacian_commutation(symbol: VectorFieldSymbol) -> Fraction:
    """
    The constant c with [Z, Delta] = c Delta on functions of x.
    """
    n = symbol.dimension
    _, xs, _ = phase_variables(n)
    psi = sp.Function("psi")(*xs)
    z = expression_of(symbol).macroscopic()

    def laplacian(expr):
        return sum(sp.diff(expr, x, 2) for x in xs)

    bracket = sp.expand(z.apply(laplacian(psi)) - laplacian(z.apply(psi)))
    base = sp.Derivative(psi, (xs[0], 2))
    constant = sp.nsimplify(bracket.coeff(base))
    if constant.free_symbols or sp.expand(bracket - constant * laplacian(psi)) != 0:
        raise ValueError(f"[{symbol.label}, Laplacian] is not a constant multiple")
    return Fraction(str(constant))


@dataclass(frozen=True)
class RhoCommutation:
    """
    Z rho(f) = rho(Z f) + constant * rho(f).
    """

    pass_through: bool
    constant: Fraction


def rho_commutation(symbol: VectorFieldSymbol, n: Optional[int] = None) -> RhoCommutation:
    n = symbol.dimension if n is None else n
    if n != symbol.dimension:
        raise ValueError(f"Symbol dimension {symbol.dimension} does not match n={n}")
    _, _, vs = phase_variables(n)
    expression = expression_of(symbol)
    if not expression.zeroth.is_zero:
        raise ValueError(f"{symbol.label} has a zeroth-order term")
    expression.macroscopic()
    divergence = sum(
        (expression.coefficient(f"v{k}").diff(vs[k - 1]) for k in range(1, n + 1)),
        _as_poly(0, n),
    )
    if not divergence.is_ground:
        raise ValueError(f"Velocity divergence of {symbol.label} is not constant")
    constant = Fraction(str(divergence.as_expr()))
    return RhoCommutation(pass_through=constant == 0, constant=constant)


@dataclass(frozen=True)
class TphiTerm:
    """
    One summand -mu * d_{x^k}(potential_operator phi) * d_{v^k} f of [T_phi, Z] f.
    """

    component: int
    potential_operator: FieldExpression
    velocity_slot: str


@dataclass(frozen=True)
class TphiCommutation:
    """
    [T_phi, Z] f = -mu sum_k d_{x^k}(Z phi + c phi) d_{v^k} f, with the pieces
    needed to build the modification source. Translations need no modification,
    so their `modification_terms` are empty.
    """

    symbol: VectorFieldSymbol
    constant: Fraction
    macroscopic: FieldExpression
    terms: tuple[TphiTerm, ...]
    requires_modification: bool

    @property
    def modification_terms(self) -> tuple[TphiTerm, ...]:
        return self.terms if self.requires_modification else ()


@lru_cache(maxsize=None)
def commute_with_Tphi_order1(symbol: VectorFieldSymbol) -> TphiCommutation:
    n = symbol.dimension
    t, xs, vs = phase_variables(n)
    phi = sp.Function("phi")(*xs)
    f = sp.Function("f")(t, *xs, *vs)
    z = expression_of(symbol)
    z_macro = z.macroscopic()

    def force(expr):
        return sum(sp.diff(phi, xs[k]) * sp.diff(expr, vs[k]) for k in range(n))

    # [T, Z] = 0, so only the force part of T_phi contributes (per unit mu).
    bracket = sp.expand(force(z.apply(f)) - z.apply(force(f)))

    def template(c):
        return -sum(
            sp.diff(z_macro.apply(phi) + c * phi, xs[k]) * sp.diff(f, vs[k])
            for k in range(n)
        )

    remainder = sp.expand(bracket - template(0))
    constant = -sp.simplify(
        remainder.coeff(sp.Derivative(f, vs[0])) / sp.diff(phi, xs[0])
    )
    if constant.free_symbols or sp.expand(bracket - template(constant)) != 0:
        raise ValueError(f"[T_phi, {symbol.label}] does not match the first-order template")
    constant = Fraction(str(constant))

    potential = FieldExpression(n, z_macro.terms, _as_poly(sp.Rational(str(constant)), n))
    terms = tuple(TphiTerm(k, potential, f"v{k}") for k in range(1, n + 1))
    return TphiCommutation(
        symbol=symbol,
        constant=constant,
        macroscopic=z_macro,
        terms=terms,
        requires_modification=symbol.kind != "translation",
    )


def weighted_derivative_identity_check(
    n: int,
    points: np.ndarray,
    seed: int = 0,
    degree: int = 2,
    tolerance: float = 1e-12,
) -> bool:
    """
    Check |x| d_{x^i} = sum_j (x^j/|x|) Omega^x_{ji} + (x^i/|x|) S^x pointwise on a
    random integer polynomial of the given degree.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != n:
        raise ValueError(f"Sample points must have {n} columns, got {points.shape[1]}")
    radii = np.linalg.norm(points, axis=1)
    if np.any(radii == 0):
        raise ValueError("Sample points must avoid x = 0")

    _, xs, _ = phase_variables(n)
    rng = np.random.default_rng(seed)
    monomials = sp.itermonomials(list(xs), degree)
    polynomial = sum(int(rng.integers(-9, 10)) * m for m in sorted(monomials, key=sp.default_sort_key))
    r = sp.sqrt(sum(x**2 for x in xs))
    scaling = scaling_x_expression(n)

    worst = 0.0
    for i in range(1, n + 1):
        lhs = r * sp.diff(polynomial, xs[i - 1])
        rhs = sum(
            xs[j - 1] / r * rotation_x_expression(j, i, n).apply(polynomial)
            for j in range(1, n + 1)
        ) + xs[i - 1] / r * scaling.apply(polynomial)
        lhs_values = np.broadcast_to(sp.lambdify(xs, lhs, "numpy")(*points.T), radii.shape)
        rhs_values = np.broadcast_to(sp.lambdify(xs, rhs, "numpy")(*points.T), radii.shape)
        scale = max(float(np.max(np.abs(lhs_values))), 1e-300)
        worst = max(worst, float(np.max(np.abs(lhs_values - rhs_values))) / scale)
    LOGGER.debug(f"Weighted derivative identity residual for n={n}: {worst:.3e}")
    return worst < tolerance


def _subset_expansion(
    alpha: MultiIndex, shifts: Sequence[Fraction]
) -> dict[tuple[int, ...], Fraction]:
    """
    Expand prod_i (Z_{alpha^i} + shifts_i) into sum_beta c_beta Z^beta, where beta
    runs over order-preserving sub-words of alpha.
    """
    expansion: dict[tuple[int, ...], Fraction] = {}
    k = len(alpha)
    for keep in itertools.product((True, False), repeat=k):
        coefficient = Fraction(1)
        for position, kept in enumerate(keep):
            if not kept:
                coefficient *= shifts[position]
        if coefficient == 0:
            continue
        beta = tuple(alpha.entries[p] for p in range(k) if keep[p])
        expansion[beta] = expansion.get(beta, Fraction(0)) + coefficient
    return {beta: c for beta, c in expansion.items() if c != 0}


def laplacian_commutator_expansion(alpha: MultiIndex) -> dict[tuple[int, ...], Fraction]:
    """
    Constants c_beta with [Z^alpha, Delta] = sum_beta c_beta Z^beta Delta, |beta| < |alpha|.
    """
    shifts = [-laplacian_commutation(symbol) for symbol in alpha.symbols()]
    expansion = _subset_expansion(alpha, shifts)
    expansion.pop(alpha.entries, None)
    return {beta: -c for beta, c in expansion.items()}


def rho_commutator_expansion(alpha: MultiIndex) -> dict[tuple[int, ...], Fraction]:
    """
    Constants with Z^alpha rho(f) = sum_beta c_beta rho(Z^beta f); the beta = alpha
    coefficient is 1.
    """
    shifts = [rho_commutation(symbol).constant for symbol in alpha.symbols()]
    return _subset_expansion(alpha, shifts)


@dataclass(frozen=True)
class CommutedSource:
    """
    (Delta - m^2) Z^alpha phi = sum rho_terms[beta] rho(Z^beta f)
                                + sum phi_terms[beta] Z^beta phi.
    """

    alpha: MultiIndex
    mass_squared: int
    rho_terms: dict[tuple[int, ...], Fraction] = field(default_factory=dict)
    phi_terms: dict[tuple[int, ...], Fraction] = field(default_factory=dict)


@lru_cache(maxsize=None)
def commuted_field_source(alpha: MultiIndex, mass_squared: int = 0) -> CommutedSource:
    """
    Right-hand side of the field equation satisfied by Z^alpha phi when
    (Delta - m^2) phi = rho(f).
    """
    if mass_squared not in (0, 1):
        raise ValueError(f"Only m^2 in {{0, 1}} is supported, got {mass_squared}")
    # Delta Z^alpha = prod_i (Z_i - c_i) Delta with c_i from [Z_i, Delta] = c_i Delta.
    shifts = [-laplacian_commutation(symbol) for symbol in alpha.symbols()]
    outer = _subset_expansion(alpha, shifts)

    rho_terms: dict[tuple[int, ...], Fraction] = {}
    phi_terms: dict[tuple[int, ...], Fraction] = {}
    for beta, coefficient in outer.items():
        for gamma, inner in rho_commutator_expansion(MultiIndex(alpha.dimension, beta)).items():
            rho_terms[gamma] = rho_terms.get(gamma, Fraction(0)) + coefficient * inner
        if mass_squared and beta != alpha.entries:
            phi_terms[beta] = phi_terms.get(beta, Fraction(0)) + mass_squared * coefficient
    return CommutedSource(
        alpha=alpha,
        mass_squared=mass_squared,
        rho_terms={k: v for k, v in rho_terms.items() if v != 0},
        phi_terms={k: v for k, v in phi_terms.items() if v != 0},
    )


@dataclass(frozen=True)
class StructureConstant:
    left: VectorFieldSymbol
    right: VectorFieldSymbol
    expansion: Union[dict[int, Fraction], NotInSpan]

    @property
    def in_span(self) -> bool:
        return not isinstance(self.expansion, NotInSpan)


def gamma_structure_table(n: int) -> list[StructureConstant]:
    """
    Every pair commutator [Z, Z'] of the family expressed back in the family.
    """
    family = make_gamma(n)
    basis = [expression_of(symbol) for symbol in family]
    table = []
    for a, b in itertools.combinations(range(len(family)), 2):
        bracket = commutator(basis[a], basis[b])
        expansion = express_in_basis(bracket, basis)
        if isinstance(expansion, dict):
            expansion = {k: c for k, c in expansion.items() if c != 0}
        table.append(StructureConstant(family[a], family[b], expansion))
    return table
