import os
import sys
import math

import numpy as np

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))

import pytest

from tests.utils import small_grid, gaussian_density
from mc_kinetic_lab.greens_fields import KernelSpec
from mc_kinetic_lab.phase_grid import (
    GridSpec,
    SpatialGrid,
    PhaseDensity,
    ResourceBudgetError,
    l1_norm,
    gaussian_profile,
    sample_particles,
)
from mc_kinetic_lab.transport import (
    RunRecord,
    SolverConfig,
    RunAbortedError,
    CFLViolationError,
    run,
    advect_x,
    mass_error,
    strang_step,
    step_semilagrangian,
    dt_refinement_study,
    free_transport_exact,
    step_particles,
    kick_drift_kick,
    spatial_variance,
    gaussian_free_density,
    _observation_times,
)

YUKAWA_2D = KernelSpec("yukawa", 2)
YUKAWA_3D = KernelSpec("yukawa", 3)


def grid_config(**overrides) -> SolverConfig:
    values = dict(mu=1, kernel=YUKAWA_2D, t_end=1.0, observer_cadence=0.5)
    values.update(overrides)
    return SolverConfig(**values)


class TestSolverConfig:
    """Validation of the time-integration settings."""

    @pytest.mark.parametrize(
        "overrides",
        [dict(mu=0), dict(cfl_safety=0.95), dict(t_end=-1.0), dict(observer_cadence=0.0), dict(dt=-0.1)],
    )
    def test_rejects_invalid_settings(self, overrides):
        with pytest.raises(ValueError):
            grid_config(**overrides)

    def test_force_switch(self):
        assert grid_config(mu=-1).effective_mu == -1.0
        assert grid_config(mu=-1, force_enabled=False).effective_mu == 0.0

    def test_digest_is_stable(self):
        assert grid_config().digest() == grid_config().digest()
        assert grid_config().digest() != grid_config(mu=-1).digest()


class TestObservationTimes:
    """The observation schedule."""

    def test_cadence_divides_t_end(self):
        assert _observation_times(1.0, 0.5) == [0.5, 1.0]

    def test_final_time_is_appended(self):
        times = _observation_times(1.0, 0.3)
        assert times[-1] == 1.0
        assert len(times) == 4

    def test_zero_length_run(self):
        assert _observation_times(0.0, 1.0) == []


class TestGridSolver:
    """The Strang-split semi-Lagrangian solver."""

    def test_zero_shift_is_the_identity(self):
        spec = small_grid()
        f = gaussian_density(spec)
        np.testing.assert_array_equal(advect_x(f.values, spec, 0.0), f.values)

    def test_cfl_violation_suggests_a_step(self):
        f = gaussian_density(small_grid())
        with pytest.raises(CFLViolationError) as error:
            strang_step(f, grid_config(), 1.0)
        assert 0 < error.value.suggested_dt < 1.0

    def test_dimension_mismatch(self):
        f = gaussian_density(small_grid())
        with pytest.raises(ValueError):
            strang_step(f, grid_config(kernel=YUKAWA_3D), 0.01)

    def test_free_transport_matches_the_exact_density(self):
        spec = small_grid()
        record = run(grid_config(force_enabled=False), gaussian_density(spec, eps=1e-3))
        assert record.times == [0.0, 0.5, 1.0]
        final = record.rows[-1]
        exact_peak = 1e-3 * math.pi / 2.0
        assert final["sup_rho"] == pytest.approx(exact_peak, rel=0.1)
        assert final["total_density"] == pytest.approx(record.rows[0]["total_density"], rel=1e-10)
        assert mass_error(record) < 1e-2
        assert final["boundary_flag"] == 0.0

    def test_free_transport_converges_under_refinement(self):
        errors = []
        for points in (16, 32):
            spec = small_grid(nx=points, nv=points)
            config = grid_config(force_enabled=False, snapshot_times=(1.0,))
            state = run(config, gaussian_density(spec, eps=1e-3)).state_snapshots[-1].state
            x, v = spec.mesh()
            exact = np.broadcast_to(free_transport_exact(gaussian_profile(1e-3), 1.0, x, v), spec.shape)
            errors.append(l1_norm(state.values - exact, spec) / l1_norm(exact, spec))
        assert errors[1] < 0.5 * errors[0]

    def test_gaussian_free_density_peak(self):
        x = [np.zeros(1), np.zeros(1)]
        assert gaussian_free_density(2.0, 1.0, x)[0] == pytest.approx(math.pi)

    def test_free_transport_exact_shifts_positions(self):
        profile = gaussian_profile(1e-3)
        x = [np.array([1.0]), np.array([0.0])]
        v = [np.array([0.5]), np.array([0.0])]
        assert free_transport_exact(profile, 2.0, x, v)[0] == pytest.approx(1e-3 * math.exp(-0.25))
        np.testing.assert_array_equal(free_transport_exact(profile, 0.0, x, v), profile(x, v))

    def test_semilagrangian_step_is_the_strang_step(self):
        f = gaussian_density(small_grid())
        config = grid_config()
        np.testing.assert_array_equal(step_semilagrangian(f, config, 0.02).values, strang_step(f, config, 0.02).density.values)
        spec = GridSpec(n=3, x_extent=4.0, v_extent=4.0, nx=8, nv=8)
        with pytest.raises(ValueError):
            step_semilagrangian(PhaseDensity(spec, np.zeros(spec.shape)), grid_config(kernel=YUKAWA_3D), 0.01)

    def test_dt_refinement_study(self):
        study = dt_refinement_study(grid_config(t_end=0.12), gaussian_density(small_grid()), [0.03, 0.015])
        assert study["dt"].tolist() == [0.03, 0.015]
        assert study["sup_rho"].iloc[0] == pytest.approx(study["sup_rho"].iloc[1], rel=1e-2)

    def test_force_sign_changes_the_spread(self):
        f0 = gaussian_density(small_grid(nx=16, nv=16), eps=0.5)
        variances = {}
        for label, overrides in (
            ("plus", dict(mu=1)),
            ("minus", dict(mu=-1)),
            ("free", dict(force_enabled=False)),
        ):
            config = grid_config(dt=0.05, snapshot_times=(1.0,), **overrides)
            snapshot = run(config, f0).state_snapshots[-1]
            variances[label] = spatial_variance(snapshot.state)
        low, high = sorted([variances["plus"], variances["minus"]])
        assert low < variances["free"] < high

    def test_snapshots_are_taken_at_requested_times(self):
        record = run(grid_config(snapshot_times=(0.0, 0.5)), gaussian_density(small_grid()))
        assert [snapshot.time for snapshot in record.state_snapshots] == [0.0, 0.5]
        assert record.field_at(0.5).valid
        with pytest.raises(KeyError):
            record.field_at(0.75)

    def test_zero_length_run_records_the_initial_state(self):
        record = run(grid_config(t_end=0.0), gaussian_density(small_grid()))
        assert record.times == [0.0]

    def test_mass_budget(self):
        with pytest.raises(ValueError):
            run(grid_config(mass_budget=1e-6), gaussian_density(small_grid(), eps=1e-3))


class FailingCompanion:
    def __init__(self, error: Exception, on_start: bool = False):
        self.error = error
        self.on_start = on_start

    def start(self, state):
        if self.on_start:
            raise self.error

    def advance(self, state):
        raise self.error


class TestRunRecord:
    """Record bookkeeping and aborted runs."""

    def test_times_must_increase(self):
        record = RunRecord("hash")
        record.append({"time": 0.0, "mass": 1.0})
        with pytest.raises(ValueError):
            record.append({"time": 0.0, "mass": 1.0})
        with pytest.raises(KeyError):
            record.column("sup_rho")

    def test_aborted_run_keeps_partial_record(self):
        with pytest.raises(RunAbortedError) as error:
            run(grid_config(), gaussian_density(small_grid()), companions=[FailingCompanion(ValueError("boom"))])
        record = error.value.record
        assert record.aborted
        assert record.times == [0.0]
        assert "boom" in record.error

    def test_budget_errors_are_not_aborts(self):
        companion = FailingCompanion(ResourceBudgetError("too large"), on_start=True)
        with pytest.raises(ResourceBudgetError):
            run(grid_config(), gaussian_density(small_grid()), companions=[companion])


class TestParticleSolver:
    """The kick-drift-kick particle solver."""

    def test_free_drift(self):
        grid = SpatialGrid(3, 8.0, 16)
        particles = sample_particles(200, 1e-3, seed=0)
        moved = step_particles(particles, SolverConfig(1, YUKAWA_3D, 1.0, force_enabled=False), 0.1, grid)
        np.testing.assert_allclose(moved.positions, particles.positions + 0.1 * particles.velocities, rtol=1e-14)
        np.testing.assert_array_equal(moved.velocities, particles.velocities)

    def test_leapfrog_is_reversible(self):
        grid = SpatialGrid(3, 8.0, 16)
        particles = sample_particles(200, 0.1, seed=1)
        config = SolverConfig(-1, YUKAWA_3D, 1.0)
        forward = kick_drift_kick(particles, config, 0.05, grid).ensemble
        back = kick_drift_kick(forward, config, -0.05, grid).ensemble
        np.testing.assert_allclose(back.positions, particles.positions, atol=1e-12)
        np.testing.assert_allclose(back.velocities, particles.velocities, atol=1e-12)

    def test_backward_step_keeps_the_signed_clock(self):
        grid = SpatialGrid(3, 8.0, 16)
        particles = sample_particles(50, 1e-3, seed=3)
        result = kick_drift_kick(particles, SolverConfig(1, YUKAWA_3D, 1.0), -0.05, grid)
        assert result.ensemble.time_tag == pytest.approx(-0.05)
        assert result.field.phi.time_tag == pytest.approx(-0.05)

    def test_particle_run(self):
        grid = SpatialGrid(3, 8.0, 16)
        particles = sample_particles(300, 1e-3, seed=2)
        config = SolverConfig(1, YUKAWA_3D, 0.5, observer_cadence=0.25)
        record = run(config, particles, grid=grid)
        assert record.times == [0.0, 0.25, 0.5]
        assert "off_domain_fraction" in record.series().columns
        assert mass_error(record) == 0.0

    def test_particle_runs_are_bit_identical(self):
        grid = SpatialGrid(3, 8.0, 16)
        config = SolverConfig(1, YUKAWA_3D, 0.5, observer_cadence=0.25)
        first = run(config, sample_particles(300, 1e-3, seed=5), grid=grid)
        second = run(config, sample_particles(300, 1e-3, seed=5), grid=grid)
        assert first.config_hash == second.config_hash
        assert first.rows == second.rows

    def test_particle_run_needs_a_grid(self):
        with pytest.raises(ValueError):
            run(SolverConfig(1, YUKAWA_3D, 0.5), sample_particles(10, 1e-3, seed=0))

    def test_particle_solver_is_three_dimensional(self):
        with pytest.raises(ValueError):
            step_particles(sample_particles(10, 1e-3, seed=0, n=2), SolverConfig(1, YUKAWA_2D, 1.0), 0.1, SpatialGrid(2, 8.0, 16))
