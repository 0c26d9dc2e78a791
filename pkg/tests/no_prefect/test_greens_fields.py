import os
import sys
import math

import numpy as np
from scipy import special

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))

import pytest

from tests.utils import small_grid, gaussian_density
from mc_kinetic_lab.vfield_algebra import MultiIndex
from mc_kinetic_lab.phase_grid import SpatialGrid, SpatialField, velocity_average
from mc_kinetic_lab.greens_fields import (
    KernelSpec,
    bessel_k,
    solve_field,
    bessel_table,
    kernel_value,
    bessel_k_bound,
    field_spec_for,
    kernel_l1_norms,
    kernel_table,
    point_mass_field,
    solve_field_direct,
    solve_commuted_field,
    kernel_decay_integral,
    iterated_yukawa_convolution,
)


def gaussian_source(grid: SpatialGrid, width: float = 1.0) -> SpatialField:
    r2 = sum(x**2 for x in grid.mesh())
    return SpatialField(grid, np.exp(-r2 / width**2))


class TestKernelSpec:
    """Kernel validation and closed forms."""

    def test_validation(self):
        with pytest.raises(ValueError):
            KernelSpec("poisson", 2)
        with pytest.raises(ValueError):
            KernelSpec("yukawa", 2, mass=2)
        with pytest.raises(ValueError):
            KernelSpec("coulomb", 3)
        assert KernelSpec("yukawa", 3).mass_squared == 1
        assert KernelSpec("poisson", 3).mass_squared == 0

    def test_field_spec_for_system(self):
        assert field_spec_for("vp", 3) == KernelSpec("poisson", 3)
        assert field_spec_for("vy", 2) == KernelSpec("yukawa", 2)
        with pytest.raises(ValueError):
            field_spec_for("vm", 3)

    def test_kernels_are_negative(self):
        radii = np.array([0.1, 1.0, 5.0])
        assert np.all(kernel_value(KernelSpec("yukawa", 2), radii) < 0)
        assert kernel_value(KernelSpec("poisson", 3), 2.0) == pytest.approx(-1.0 / (8.0 * math.pi))
        assert kernel_value(KernelSpec("yukawa", 3), 1.0) == pytest.approx(-math.exp(-1.0) / (4.0 * math.pi))
        with pytest.raises(ValueError):
            kernel_value(KernelSpec("yukawa", 2), 0.0)

    @pytest.mark.parametrize("n, gradient_norm", [(2, math.pi / 2.0), (3, 2.0)])
    def test_screened_l1_norms(self, n, gradient_norm):
        value_norm, grad_norm = kernel_l1_norms(KernelSpec("yukawa", n))
        assert value_norm == pytest.approx(1.0, rel=1e-6)
        assert grad_norm == pytest.approx(gradient_norm, rel=1e-6)

    def test_kernel_table(self):
        spec = KernelSpec("yukawa", 3)
        table = kernel_table(spec, [1.0, 2.0])
        assert table["r"].tolist() == [1.0, 2.0]
        np.testing.assert_allclose(table["value"], kernel_value(spec, np.array([1.0, 2.0])))

    def test_poisson_has_no_l1_norm(self):
        with pytest.raises(ValueError):
            kernel_l1_norms(KernelSpec("poisson", 3))


class TestBessel:
    """Quadrature of K_nu against closed forms and scipy."""

    @pytest.mark.parametrize("r", [0.05, 0.7, 3.0, 25.0])
    def test_half_order_closed_form(self, r):
        exact = math.sqrt(math.pi / (2.0 * r)) * math.exp(-r)
        assert bessel_k(0.5, r) == pytest.approx(exact, rel=1e-10)

    @pytest.mark.parametrize("nu", [0.0, 1.0, 1.5, 2.0, 3.5])
    @pytest.mark.parametrize("r", [0.01, 1.0, 10.0, 60.0])
    def test_against_scipy(self, nu, r):
        assert bessel_k(nu, r) == pytest.approx(float(special.kv(nu, r)), rel=1e-9)

    def test_envelope_holds(self):
        for nu in (0.5, 1.0, 2.0):
            for r in np.logspace(-2, 2, 9):
                assert bessel_k(nu, r) <= 4.0 * bessel_k_bound(nu, r)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            bessel_k(1.0, 0.0)
        with pytest.raises(ValueError):
            bessel_k(-1.0, 1.0)
        with pytest.raises(ValueError):
            bessel_k_bound(0.25, 1.0)

    def test_table_columns(self):
        table = bessel_table([0.0, 1.0], [0.5, 2.0])
        assert list(table.columns) == ["nu", "r", "k_quadrature", "k_reference", "bound", "ratio"]
        assert len(table) == 4
        assert table.loc[table["nu"] == 0.0, "ratio"].isna().all()


class TestKernelDecayIntegral:
    """The weighted kernel integral in its three regions."""

    @pytest.mark.parametrize("n", [2, 3])
    def test_value_at_the_origin(self, n):
        assert kernel_decay_integral(n, 0.0).total == pytest.approx(2.0 * math.pi, rel=1e-8)

    @pytest.mark.parametrize("n", [2, 3])
    def test_decays_with_distance(self, n):
        totals = [kernel_decay_integral(n, a).total for a in (1.0, 4.0, 16.0)]
        assert totals[0] > totals[1] > totals[2] > 0
        regions = kernel_decay_integral(n, 4.0)
        assert min(regions.inner, regions.middle, regions.outer) > 0

    def test_rejects_negative_distance(self):
        with pytest.raises(ValueError):
            kernel_decay_integral(2, -1.0)


class TestFieldSolver:
    """Spectral convolution against the direct sum and the field equation."""

    def test_fast_matches_direct_in_two_dimensions(self):
        grid = SpatialGrid(2, 6.0, 16)
        rho = gaussian_source(grid)
        spec = KernelSpec("yukawa", 2)
        fast = solve_field(spec, rho).phi.scalar
        direct = solve_field_direct(spec, rho).phi.scalar
        assert np.max(np.abs(fast - direct)) <= 1e-10 * np.max(np.abs(direct))

    def test_fast_matches_direct_in_three_dimensions(self):
        grid = SpatialGrid(3, 6.0, 16)
        rho = gaussian_source(grid)
        spec = KernelSpec("poisson", 3)
        fast = solve_field(spec, rho).phi.scalar
        direct = solve_field_direct(spec, rho).phi.scalar
        assert np.max(np.abs(fast - direct)) <= 1e-10 * np.max(np.abs(direct))

    def test_residual_improves_with_resolution(self):
        spec = KernelSpec("yukawa", 2)
        coarse = solve_field(spec, gaussian_source(SpatialGrid(2, 8.0, 32)))
        fine = solve_field(spec, gaussian_source(SpatialGrid(2, 8.0, 64)))
        assert fine.residual_norm * 2.0 <= coarse.residual_norm

    def test_positive_source_gives_negative_potential(self):
        grid = SpatialGrid(2, 6.0, 16)
        phi = solve_field(KernelSpec("yukawa", 2), point_mass_field(grid)).phi
        assert np.all(phi.scalar < 0)
        assert phi.grid == grid

    def test_boundary_source_is_invalid(self):
        grid = SpatialGrid(2, 6.0, 16)
        solution = solve_field(KernelSpec("yukawa", 2), point_mass_field(grid, (0, 8)))
        assert solution.status == "invalid"
        assert not solution.valid

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            solve_field(KernelSpec("poisson", 3), gaussian_source(SpatialGrid(2, 6.0, 16)))

    def test_iterated_convolution(self):
        rho = gaussian_source(SpatialGrid(2, 6.0, 16))
        assert iterated_yukawa_convolution(rho, 0) is rho
        once = iterated_yukawa_convolution(rho, 1)
        np.testing.assert_allclose(once.scalar, solve_field(KernelSpec("yukawa", 2), rho).phi.scalar)
        with pytest.raises(ValueError):
            iterated_yukawa_convolution(rho, -1)

    def test_commuted_field_of_empty_index_is_the_field(self):
        f = gaussian_density(small_grid())
        spec = KernelSpec("yukawa", 2)
        commuted = solve_commuted_field(spec, f, MultiIndex(2, ()))
        direct = solve_field(spec, velocity_average(f))
        np.testing.assert_allclose(commuted.phi.scalar, direct.phi.scalar, rtol=1e-12, atol=1e-18)

    def test_commuted_translation_is_the_field_derivative(self):
        f = gaussian_density(small_grid())
        spec = KernelSpec("yukawa", 2)
        cache = {}
        translated = solve_commuted_field(spec, f, MultiIndex(2, (2,)), cache=cache)
        field = solve_commuted_field(spec, f, MultiIndex(2, ()), cache=cache)
        difference = translated.phi.scalar - field.grad_phi.values[0]
        interior = (slice(4, -4),) * 2
        scale = np.max(np.abs(field.grad_phi.values[0]))
        assert np.max(np.abs(difference[interior])) < 5e-2 * scale
