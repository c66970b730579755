"""Control types, measure integration, convex perturbation, chattering."""

import numpy as np
import pytest

from singopt.controls import (
    CellMeasure,
    ChatteringError,
    ControlError,
    RelaxedControl,
    SingularControl,
    StrictControl,
    PerturbationSpec,
    alternating_strict,
    chattering,
    constant_relaxed,
    constant_strict,
    control_from_obj,
    control_to_obj,
    convex_combine,
    dirac_embed,
    integrate,
    regrid_relaxed,
    zero_singular,
)
from singopt.model import TimeGrid


def pm1(grid):
    return constant_relaxed(grid, [[-1.0], [1.0]], [0.5, 0.5])


class TestIntegrate:
    def test_dirac_returns_point_value(self):
        m = CellMeasure([[2.0]], [1.0])
        assert integrate(m, lambda a: 3.0 * a[0]) == 6.0

    def test_symmetric_measure_kills_odd_integrand(self):
        m = CellMeasure([[-1.0], [1.0]], [0.5, 0.5])
        assert integrate(m, lambda a: a[0]) == 0.0

    def test_double_well_integrand_vanishes_at_atoms(self):
        m = CellMeasure([[-1.0], [1.0]], [0.5, 0.5])
        assert integrate(m, lambda a: (1 - a[0] ** 2) ** 2) == 0.0

    def test_linearity_to_machine_precision(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            raw = rng.exponential(size=4)
            m = CellMeasure(rng.normal(size=(4, 1)), raw / raw.sum())
            alpha, beta = rng.normal(size=2)
            f = lambda a: np.sin(a[0])
            g = lambda a: a[0] ** 3
            lhs = integrate(m, lambda a: alpha * f(a) + beta * g(a))
            rhs = alpha * integrate(m, f) + beta * integrate(m, g)
            assert abs(lhs - rhs) < 1e-12

    def test_vector_valued_integrand(self):
        m = CellMeasure([[-1.0], [1.0]], [0.25, 0.75])
        out = integrate(m, lambda a: np.array([a[0], 1.0]))
        assert out.tolist() == [0.5, 1.0]

    def test_nonfinite_integrand_names_atom(self):
        m = CellMeasure([[-1.0], [1.0]], [0.5, 0.5])
        with pytest.raises(ControlError, match=r"\[1\.0\]"):
            integrate(m, lambda a: np.inf if a[0] > 0 else 0.0)

    def test_weight_validation(self):
        with pytest.raises(ControlError):
            CellMeasure([[0.0], [1.0]], [0.6, 0.6])
        with pytest.raises(ControlError):
            CellMeasure([[0.0], [1.0]], [-0.1, 1.1])


class TestDiracEmbed:
    def test_constant_control(self, grid64):
        q = dirac_embed(constant_strict(grid64, [1.0]))
        assert q.atoms.shape == (64, 1, 1)
        assert np.all(q.weights == 1.0)

    def test_alternating_blocks_embed_per_cell(self, grid64):
        v = alternating_strict(grid64, 8)
        q = dirac_embed(v)
        # first block +1, second block -1, matching (-1)^k
        assert np.all(q.atoms[:8, 0, 0] == 1.0)
        assert np.all(q.atoms[8:16, 0, 0] == -1.0)

    def test_composition_identity(self, grid64):
        v = alternating_strict(grid64, 4)
        q = dirac_embed(v)
        for j in (0, 17, 63):
            assert integrate(q.cell(j), lambda a: a[0] ** 2 + a[0]) == (
                v.values[j, 0] ** 2 + v.values[j, 0]
            )


class TestConvexCombine:
    def test_theta_zero_returns_base(self, grid64):
        base = (pm1(grid64), zero_singular(grid64, 1))
        direction = (dirac_embed(constant_strict(grid64, [1.0])), zero_singular(grid64, 1))
        out = convex_combine(base, direction, 0.0)
        assert out[0] is base[0] and out[1] is base[1]

    def test_theta_one_returns_direction(self, grid64):
        base = (pm1(grid64), zero_singular(grid64, 1))
        direction = (dirac_embed(constant_strict(grid64, [1.0])), zero_singular(grid64, 1))
        out = convex_combine(base, direction, 1.0)
        assert out[0] is direction[0]

    def test_half_mix_of_diracs(self, grid64):
        base = (dirac_embed(constant_strict(grid64, [0.0])), zero_singular(grid64, 1))
        direction = (dirac_embed(constant_strict(grid64, [1.0])), zero_singular(grid64, 1))
        mixed, _ = convex_combine(base, direction, 0.5)
        cell = mixed.cell(0)
        assert cell.atoms.ravel().tolist() == [0.0, 1.0]
        assert cell.weights.tolist() == [0.5, 0.5]

    @pytest.mark.parametrize("theta", [0.1, 0.3, 0.77])
    def test_weights_stay_normalized_and_increments_nonnegative(self, grid64, theta):
        rng = np.random.default_rng(5)
        base = (pm1(grid64), SingularControl(grid64, rng.uniform(0, 1, (64, 1))))
        direction = (
            dirac_embed(constant_strict(grid64, [1.0])),
            SingularControl(grid64, rng.uniform(0, 1, (64, 1))),
        )
        mixed, xi = convex_combine(base, direction, theta)
        assert np.max(np.abs(mixed.weights.sum(axis=1) - 1.0)) <= 1e-12
        assert np.all(xi.increments >= 0)

    def test_duplicate_atoms_are_merged(self, grid64):
        base = (pm1(grid64), zero_singular(grid64, 1))
        direction = (pm1(grid64), zero_singular(grid64, 1))
        mixed, _ = convex_combine(base, direction, 0.25)
        cell = mixed.cell(0)
        assert len(cell.weights) == 2
        assert cell.weights.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_theta_out_of_range(self, grid64):
        base = (pm1(grid64), zero_singular(grid64, 1))
        with pytest.raises(ControlError):
            convex_combine(base, base, 1.5)
        with pytest.raises(ControlError):
            PerturbationSpec(-0.1, *base)


class TestSingularControl:
    def test_cumulative_is_left_limit_partial_sum(self):
        grid = TimeGrid(4, 1.0)
        xi = SingularControl(grid, [[1.0], [0.0], [2.0], [0.0]])
        assert xi.cumulative().ravel().tolist() == [0.0, 1.0, 1.0, 3.0, 3.0]

    def test_negative_increment_rejected(self):
        grid = TimeGrid(2, 1.0)
        with pytest.raises(ControlError):
            SingularControl(grid, [[-0.5], [0.0]])


class TestChattering:
    def test_dirac_target_is_constant_for_every_n(self, grid64):
        q = dirac_embed(constant_strict(grid64, [1.0]))
        for n in (1, 2, 5):
            u = chattering(q, n)
            assert np.all(u.values == 1.0)

    def test_half_half_single_cell(self):
        grid = TimeGrid(1, 1.0)
        q = constant_relaxed(grid, [[-1.0], [1.0]], [0.5, 0.5])
        u = chattering(q, 2)
        # 4 refined steps: first half at -1 (atom order), second half at +1
        assert u.values.ravel().tolist() == [-1.0, -1.0, 1.0, 1.0]
        occ = (u.values.ravel() == -1.0).mean()
        assert occ == 0.5

    def test_alternating_structure_on_n_cells(self):
        # the relaxed optimum chattered on n cells alternates sign each
        # half-cell with equal occupation, the structure of the n-block control
        n = 8
        grid = TimeGrid(n, 1.0)
        q = constant_relaxed(grid, [[-1.0], [1.0]], [0.5, 0.5])
        u = chattering(q, 2)  # 4 sub-steps per cell
        vals = u.values.ravel()
        assert (vals == -1.0).mean() == 0.5
        halves = vals.reshape(2 * n, 2)
        assert np.all(halves[:, 0] == halves[:, 1])
        assert np.all(halves[::2, 0] == -1.0) and np.all(halves[1::2, 0] == 1.0)

    @pytest.mark.parametrize("n", [2, 4, 8, 16])
    def test_occupation_error_bound(self, n):
        grid = TimeGrid(5, 1.0)
        q = constant_relaxed(grid, [[-1.0], [0.2], [1.0]], [0.3, 0.21, 0.49])
        u = chattering(q, n)
        tests = [lambda a: a[0], lambda a: a[0] ** 2, lambda a: abs(a[0]),
                 lambda a: (1 - a[0] ** 2) ** 2]
        dt = u.grid.dt
        for f in tests:
            time_avg = sum(f(v) * dt for v in u.values) / grid.horizon
            target = integrate(q.cell(0), f)
            fmax = max(abs(f(a)) for a in q.cell(0).atoms)
            assert abs(time_avg - target) <= 2.0 * fmax / n + 1e-12

    def test_cellwise_varying_weights_get_cellwise_occupation(self):
        grid = TimeGrid(2, 1.0)
        atoms = np.tile(np.array([[[-1.0], [1.0]]]), (2, 1, 1))
        weights = np.array([[0.25, 0.75], [0.75, 0.25]])
        q = RelaxedControl(grid, atoms, weights)
        u = chattering(q, 4)  # 8 sub-steps per cell, quotas land exactly
        per_cell = u.values.reshape(2, 8)
        assert (per_cell[0] == -1.0).mean() == 0.25
        assert (per_cell[1] == -1.0).mean() == 0.75
        # runs are consecutive: first block of each cell is the first atom
        assert per_cell[0, :2].tolist() == [-1.0, -1.0]
        assert per_cell[1, :6].tolist() == [-1.0] * 6

    def test_output_values_lie_in_atom_set(self, grid64):
        q = constant_relaxed(grid64, [[-1.0], [1.0]], [0.25, 0.75])
        u = chattering(q, 3)
        assert set(np.unique(u.values)) <= {-1.0, 1.0}

    def test_too_coarse_refinement_states_minimum(self):
        grid = TimeGrid(1, 1.0)
        q = constant_relaxed(grid, [[-1.0], [1.0]], [0.001, 0.999])
        with pytest.raises(ChatteringError, match="1000"):
            chattering(q, 1)


class TestRegrid:
    def test_constant_measure_unchanged(self, grid64):
        q = pm1(grid64)
        out = regrid_relaxed(q, 4)
        for j in range(4):
            cell = out.cell(j)
            assert sorted(cell.atoms.ravel().tolist()) == [-1.0, 1.0]
            assert cell.weights.tolist() == pytest.approx([0.5, 0.5])

    def test_two_cells_average_to_one(self):
        grid = TimeGrid(2, 1.0)
        atoms = np.array([[[0.0]], [[1.0]]])
        weights = np.ones((2, 1))
        q = RelaxedControl(grid, atoms, weights)
        out = regrid_relaxed(q, 1)
        cell = out.cell(0)
        assert cell.atoms.ravel().tolist() == [0.0, 1.0]
        assert cell.weights.tolist() == pytest.approx([0.5, 0.5])


class TestJsonForms:
    def test_strict_round_trip(self, grid64):
        v = alternating_strict(grid64, 4)
        again = control_from_obj(control_to_obj(v), grid64)
        assert np.array_equal(v.values, again.values)

    def test_relaxed_round_trip(self, grid64):
        q = constant_relaxed(grid64, [[-1.0], [1.0]], [0.25, 0.75])
        again = control_from_obj(control_to_obj(q), grid64)
        assert np.array_equal(q.atoms, again.atoms)
        assert np.array_equal(q.weights, again.weights)

    def test_singular_round_trip(self, grid64):
        rng = np.random.default_rng(0)
        xi = SingularControl(grid64, rng.uniform(0, 1, (64, 1)))
        again = control_from_obj(control_to_obj(xi), grid64)
        assert np.array_equal(xi.increments, again.increments)

    def test_unknown_type_rejected(self, grid64):
        with pytest.raises(ControlError):
            control_from_obj({"type": "mystery"}, grid64)


def test_strict_membership_check(grid64, example1):
    v = alternating_strict(grid64, 8)
    assert v.in_grid(example1.u1_grid)
    w = StrictControl(grid64, np.full((64, 1), 0.5))
    assert not w.in_grid(example1.u1_grid)


def test_alternating_requires_divisibility(grid64):
    with pytest.raises(ControlError):
        alternating_strict(grid64, 7)
