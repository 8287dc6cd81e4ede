import numpy as np
import pytest

from vaeprior.field import FieldSample, GridSpec, synthesize, to_permeability
from vaeprior.flow import (ATMOSPHERIC_PA, SECONDS_PER_DAY, FlowSolverError, FlowSystem, FluidAndRock,
                           SensorLayout, WellSpec, assemble_and_solve, five_spot_wells, mass_balance,
                           sample_sensors)

PSI = 9.87e-14


def homogeneous(grid, k=PSI):
    return FieldSample(grid, np.full(grid.n_cells, k), "permeability")


def strip_oracle(k, mu, dx, dy, dz, rw, pL, pR):
    # series resistors 1/WI, 1/T, 1/T, 1/WI between the two BHP controls
    T = k * dy * dz / dx / mu
    WI = 2 * np.pi * k * dz / (mu * np.log(0.2 * dx / rw))
    Q = (pL - pR) / (2 / WI + 2 / T)
    p0 = pL - Q / WI
    p1 = p0 - Q / T
    p2 = p1 - Q / T
    return np.array([p0, p1, p2]), Q


class TestStrip:
    @pytest.mark.parametrize("solver", ["direct", "cg"])
    def test_three_cell_closed_form(self, solver):
        g = GridSpec(30.0, 10.0, 3, 1)
        pL, pR = 2.0e6, 1.0e5
        wells = [WellSpec(0, "bhp", pL), WellSpec(2, "bhp", pR)]
        sol = FlowSystem(g, wells, solver=solver).solve(homogeneous(g, 1e-12))
        p, Q = strip_oracle(1e-12, 1e-3, 10.0, 10.0, 1.0, 0.1, pL, pR)
        np.testing.assert_allclose(sol.pressure, p, rtol=1e-10)
        assert pR < sol.pressure[1] < pL
        # injection positive: the high-pressure well pushes Q into the strip
        np.testing.assert_allclose(sol.well_fluxes, [Q, -Q], rtol=1e-10)


class TestFiveSpot:
    def test_production_equals_injection(self):
        g = GridSpec(100.0, 100.0, 50, 50)
        sol = FlowSystem(g, five_spot_wells(g)).solve(homogeneous(g))
        assert sol.produced * SECONDS_PER_DAY == pytest.approx(100.0, rel=1e-8)
        assert sol.injected * SECONDS_PER_DAY == pytest.approx(100.0, rel=1e-12)
        mb = mass_balance(sol)
        assert abs(mb.net) <= 1e-8 * mb.total_injection

    @pytest.mark.parametrize("n", [21, 51])
    def test_rotation_symmetry(self, n):
        # odd grids put the injector at the exact center cell
        g = GridSpec(100.0, 100.0, n, n)
        P = FlowSystem(g, five_spot_wells(g)).solve(homogeneous(g)).pressure.reshape(n, n)
        scale = np.max(np.abs(P))
        for k in (1, 2, 3):
            assert np.max(np.abs(np.rot90(P, k) - P)) <= 1e-8 * scale

    def test_well_layout(self):
        g = GridSpec(100.0, 100.0, 50, 50)
        w = five_spot_wells(g)
        assert w[0].control == "rate" and w[0].cell == g.cell_index(50.0, 50.0)
        assert sorted(x.cell for x in w[1:]) == [0, 49, 2450, 2499]
        assert all(x.control == "bhp" and x.value == ATMOSPHERIC_PA for x in w[1:])

    def test_cg_matches_direct(self, basis20, grid20, rng):
        k = to_permeability(synthesize(basis20, rng.standard_normal(400)), PSI, 1.0)
        wells = five_spot_wells(grid20)
        a = FlowSystem(grid20, wells).solve(k)
        b = FlowSystem(grid20, wells, solver="cg").solve(k)
        assert b.iterations > 0
        np.testing.assert_allclose(b.pressure, a.pressure, rtol=1e-8)

    def test_heterogeneous_divergence(self, basis20, grid20, rng):
        for _ in range(5):
            k = to_permeability(synthesize(basis20, rng.standard_normal(400)), PSI, 1.0)
            mb = mass_balance(FlowSystem(grid20, five_spot_wells(grid20)).solve(k))
            assert mb.max_divergence <= 1e-6 * mb.max_face_flux
            assert abs(mb.net) <= 1e-8 * mb.total_injection

    def test_garbage_pressure_flagged(self, grid20):
        sol = FlowSystem(grid20, five_spot_wells(grid20)).solve(homogeneous(grid20))
        sol.pressure = sol.pressure + np.random.default_rng(0).normal(0, 1e4, grid20.n_cells)
        mb = mass_balance(sol)
        assert mb.max_divergence > 1e-3 * mb.max_face_flux

    def test_scaling_permeability(self, grid20):
        fs = FlowSystem(grid20, five_spot_wells(grid20))
        inj = five_spot_wells(grid20)[0].cell
        a = fs.solve(homogeneous(grid20))
        b = fs.solve(homogeneous(grid20, 3 * PSI))
        da = a.pressure[inj] - ATMOSPHERIC_PA
        db = b.pressure[inj] - ATMOSPHERIC_PA
        assert db == pytest.approx(da / 3, rel=1e-10)

    def test_matrix_spd(self, grid20, basis20, rng):
        k = to_permeability(synthesize(basis20, rng.standard_normal(400)), PSI, 1.0).values
        A, *_ = FlowSystem(grid20, five_spot_wells(grid20)).assemble(k)
        A = A.toarray()
        np.testing.assert_array_equal(A, A.T)
        assert np.linalg.eigvalsh(A).min() > 0

    def test_functional_wrapper(self, grid20):
        sol = assemble_and_solve(grid20, homogeneous(grid20), FluidAndRock(), five_spot_wells(grid20))
        ref = FlowSystem(grid20, five_spot_wells(grid20)).solve(homogeneous(grid20))
        np.testing.assert_array_equal(sol.pressure, ref.pressure)


class TestErrors:
    def test_no_bhp_well(self, grid20):
        with pytest.raises(FlowSolverError):
            FlowSystem(grid20, [WellSpec(5, "rate", 100.0)])

    def test_nonpositive_perm(self, grid20):
        fs = FlowSystem(grid20, five_spot_wells(grid20))
        k = np.full(grid20.n_cells, PSI)
        k[3] = 0.0
        with pytest.raises(FlowSolverError):
            fs.solve(k)

    def test_bad_specs(self, grid20):
        with pytest.raises(ValueError):
            WellSpec(0, "pressure", 1.0)
        with pytest.raises(ValueError):
            WellSpec(0, "rate", np.inf)
        with pytest.raises(ValueError):
            FluidAndRock(viscosity=0.0)
        with pytest.raises(ValueError):
            FlowSystem(grid20, [WellSpec(10_000, "bhp", 1.0)])

    def test_units(self):
        assert WellSpec(0, "rate", 100.0).rate_si * 86400.0 == 100.0


class TestSensors:
    def test_lattice(self):
        g = GridSpec(100.0, 100.0, 50, 50)
        lay = SensorLayout.lattice(g)
        assert lay.count == 25
        np.testing.assert_allclose(np.unique(lay.positions[:, 0]), [10, 30, 50, 70, 90])
        assert np.unique(lay.cells(g)).size == 25

    def test_constant_field(self, grid20):
        sol = FlowSystem(grid20, five_spot_wells(grid20)).solve(homogeneous(grid20))
        sol.pressure = np.full(grid20.n_cells, 7.0)
        assert np.all(sample_sensors(sol, SensorLayout.lattice(grid20)) == 7.0)

    def test_cell_center_lookup(self, grid20):
        sol = FlowSystem(grid20, five_spot_wells(grid20)).solve(homogeneous(grid20))
        c = grid20.cell_centers()[37]
        assert sample_sensors(sol, SensorLayout([c]))[0] == sol.pressure[37]

    def test_outside_domain(self, grid20):
        with pytest.raises(ValueError):
            SensorLayout([[101.0, 5.0]]).cells(grid20)
