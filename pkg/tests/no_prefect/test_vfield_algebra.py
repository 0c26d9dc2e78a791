import os
import sys
from fractions import Fraction

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))

import pytest
import sympy as sp

from mc_kinetic_lab.vfield_algebra import (
    NotInSpan,
    MultiIndex,
    FieldExpression,
    VectorFieldSymbol,
    commutator,
    make_gamma,
    gamma_size,
    expression_of,
    free_transport,
    multi_indices,
    phase_variables,
    rho_commutation,
    express_in_basis,
    rotation_expression,
    gamma_structure_table,
    laplacian_commutation,
    commuted_field_source,
    commute_with_Tphi_order1,
    rho_commutator_expansion,
    laplacian_commutator_expansion,
    weighted_derivative_identity_check,
)

SCALING_2D = 5  # boosts 0-1, translations 2-3, rotation 4, scaling 5


def random_polynomial(rng: np.random.Generator, n: int, terms: int = 3) -> sp.Expr:
    """A sum of a few integer multiples of monomials of degree <= 2 in (t, x, v)."""
    t, xs, vs = phase_variables(n)
    variables = (t,) + xs + vs
    result = sp.Integer(0)
    for _ in range(terms):
        degree = int(rng.integers(0, 3))
        monomial = sp.Mul(*[variables[int(i)] for i in rng.integers(0, len(variables), size=degree)])
        result += int(rng.integers(-3, 4)) * monomial
    return result


def random_expression(rng: np.random.Generator, n: int = 2) -> FieldExpression:
    """A first-order expression with random polynomial coefficients, zeroth-order term included."""
    slots = ["t"] + [f"x{i}" for i in range(1, n + 1)] + [f"v{i}" for i in range(1, n + 1)]
    return FieldExpression.from_terms(n, {slot: random_polynomial(rng, n) for slot in slots}, random_polynomial(rng, n))


class TestFamily:
    """The ordered commuting family and multi-indices."""

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_family_size_and_order(self, n):
        family = make_gamma(n)
        assert len(family) == gamma_size(n) == 2 * n + n * (n - 1) // 2 + 1
        assert [symbol.kind for symbol in family[:n]] == ["boost"] * n
        assert [symbol.kind for symbol in family[n : 2 * n]] == ["translation"] * n
        assert family[-1].kind == "scaling"

    def test_invalid_symbols_are_rejected(self):
        with pytest.raises(ValueError):
            VectorFieldSymbol("rotation", 3, 2, 1)
        with pytest.raises(ValueError):
            VectorFieldSymbol("boost", 2, 3)
        with pytest.raises(ValueError):
            make_gamma(1)

    def test_rotation_normalisation(self):
        assert rotation_expression(2, 2, 3).is_zero
        assert rotation_expression(2, 1, 3) == -rotation_expression(1, 2, 3)

    def test_multi_index_bounds(self):
        with pytest.raises(ValueError):
            MultiIndex(2, (gamma_size(2),))
        assert MultiIndex(2, ()).label == "()"
        assert MultiIndex(2, (0, 2)).label == "boost(1).translation(1)"

    def test_multi_indices_enumeration(self):
        indices = multi_indices(2, 2)
        assert len(indices) == 1 + 6 + 36
        assert len(set(indices)) == len(indices)
        assert [len(alpha) for alpha in indices] == sorted(len(alpha) for alpha in indices)

    def test_macroscopic_boost_drops_velocity_slot(self):
        t, _, _ = phase_variables(2)
        boost = expression_of(make_gamma(2)[0])
        assert boost.macroscopic() == FieldExpression.from_terms(2, {"x1": t})


class TestCommutators:
    """Exact brackets of the family with free transport and among themselves."""

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_every_field_commutes_with_free_transport(self, n):
        transport = free_transport(n)
        for symbol in make_gamma(n):
            assert commutator(transport, expression_of(symbol)).is_zero, symbol.label

    def test_bracket_is_antisymmetric(self):
        family = [expression_of(symbol) for symbol in make_gamma(3)]
        for a in family:
            for b in family:
                assert commutator(a, b) == -commutator(b, a)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_brackets_are_antisymmetric_and_satisfy_jacobi(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (random_expression(rng) for _ in range(3))
        assert commutator(a, b) == -commutator(b, a)
        assert commutator(a, a).is_zero
        jacobi = commutator(a, commutator(b, c)) + commutator(b, commutator(c, a)) + commutator(c, commutator(a, b))
        assert jacobi.is_zero

    def test_translation_scaling_bracket(self):
        family = make_gamma(2)
        translation, scaling = expression_of(family[2]), expression_of(family[SCALING_2D])
        bracket = commutator(translation, scaling)
        assert bracket == translation
        expansion = express_in_basis(bracket, [expression_of(symbol) for symbol in family])
        assert expansion[2] == Fraction(1)
        assert all(value == 0 for key, value in expansion.items() if key != 2)

    @pytest.mark.parametrize("n", [2, 3])
    def test_structure_table_closes_in_span(self, n):
        table = gamma_structure_table(n)
        size = gamma_size(n)
        assert len(table) == size * (size - 1) // 2
        assert all(entry.in_span for entry in table)

    def test_express_in_basis_reports_missing_terms(self):
        _, xs, _ = phase_variables(2)
        outside = FieldExpression.from_terms(2, {"x1": xs[0] ** 2})
        result = express_in_basis(outside, [expression_of(symbol) for symbol in make_gamma(2)])
        assert isinstance(result, NotInSpan)

    def test_express_in_basis_rejects_duplicate_basis(self):
        translation = expression_of(make_gamma(2)[2])
        with pytest.raises(ValueError):
            express_in_basis(translation, [translation, translation])


class TestFieldEquationCommutation:
    """Laplacian, velocity average and T_phi commutation constants."""

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_laplacian_constants(self, n):
        for symbol in make_gamma(n):
            expected = Fraction(-2) if symbol.kind == "scaling" else Fraction(0)
            assert laplacian_commutation(symbol) == expected

    @pytest.mark.parametrize("n", [2, 3])
    def test_rho_constants(self, n):
        for symbol in make_gamma(n):
            result = rho_commutation(symbol)
            expected = Fraction(n) if symbol.kind == "scaling" else Fraction(0)
            assert result.constant == expected
            assert result.pass_through == (symbol.kind != "scaling")

    def test_tphi_commutation_constants(self):
        family = make_gamma(2)
        scaling = commute_with_Tphi_order1(family[SCALING_2D])
        assert scaling.constant == Fraction(-2)
        assert scaling.requires_modification
        assert len(scaling.modification_terms) == 2
        boost = commute_with_Tphi_order1(family[0])
        assert boost.constant == Fraction(0)
        translation = commute_with_Tphi_order1(family[2])
        assert not translation.requires_modification
        assert translation.modification_terms == ()

    def test_scaling_commuted_field_source(self):
        alpha = MultiIndex(2, (SCALING_2D,))
        poisson_like = commuted_field_source(alpha, 0)
        assert poisson_like.rho_terms == {(SCALING_2D,): Fraction(1), (): Fraction(4)}
        assert poisson_like.phi_terms == {}
        screened = commuted_field_source(alpha, 1)
        assert screened.rho_terms == poisson_like.rho_terms
        assert screened.phi_terms == {(): Fraction(2)}

    def test_translation_source_passes_through(self):
        alpha = MultiIndex(2, (2, 3))
        source = commuted_field_source(alpha, 1)
        assert source.rho_terms == {(2, 3): Fraction(1)}
        assert source.phi_terms == {}

    def test_expansions_for_repeated_scaling(self):
        alpha = MultiIndex(2, (SCALING_2D, SCALING_2D))
        # [S S, Delta] = S [S, Delta] + [S, Delta] S = -4 S Delta - 4 Delta
        assert laplacian_commutator_expansion(alpha) == {(SCALING_2D,): Fraction(-4), (): Fraction(-4)}
        # S S rho(f) = rho((S + 2)(S + 2) f)
        assert rho_commutator_expansion(alpha) == {
            (SCALING_2D, SCALING_2D): Fraction(1),
            (SCALING_2D,): Fraction(4),
            (): Fraction(4),
        }

    @pytest.mark.parametrize("n", [2, 3, 4])
    def test_weighted_derivative_identity(self, n):
        points = np.random.default_rng(n).uniform(0.5, 2.0, size=(6, n))
        assert weighted_derivative_identity_check(n, points, seed=n)

    def test_weighted_derivative_identity_rejects_origin(self):
        with pytest.raises(ValueError):
            weighted_derivative_identity_check(2, np.zeros((1, 2)))


class TestApplication:
    """Symbolic application agrees with direct differentiation."""

    def test_boost_applied_to_polynomial(self):
        t, xs, vs = phase_variables(2)
        boost = expression_of(make_gamma(2)[0])
        g = xs[0] ** 2 * vs[0]
        assert sp.expand(boost.apply(g) - (2 * t * xs[0] * vs[0] + xs[0] ** 2)) == 0
