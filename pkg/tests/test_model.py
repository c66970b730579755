"""Problem definitions, assumption validation, noise reproducibility."""

import math

import numpy as np
import pytest

from singopt.model import (
    BUILTIN_NAMES,
    NoiseBatch,
    ProblemError,
    TimeGrid,
    builtin_problem,
    problem_from_config,
    problem_from_json,
    problem_to_json,
    validate_problem,
)


def test_builtin_names_all_load_and_validate():
    for name in BUILTIN_NAMES:
        spec = builtin_problem(name)
        report = validate_problem(spec, probe_seed=1)
        assert report.passed, f"{name}:\n{report}"


def test_unknown_builtin_lists_available():
    with pytest.raises(ProblemError, match="example1"):
        builtin_problem("no_such_problem")


def test_example1_fields(example1):
    assert example1.horizon == 1.0
    assert example1.x0.tolist() == [0.0]
    assert sorted(example1.u1_grid.ravel().tolist()) == [-1.0, 1.0]
    # b = a, sigma = 0, h = x^2
    assert example1.b(0.3, np.array([2.0]), np.array([1.0])).tolist() == [1.0]
    assert not example1.sigma(0.0, np.array([1.0]), np.array([1.0])).any()
    assert example1.h(0.0, np.array([3.0]), np.array([1.0])) == 9.0


def test_example2_running_cost_value(example2_separated):
    # h(0, x=0, a=0) = (1 - 0)^2 = 1
    assert example2_separated.h(0.0, np.array([0.0]), np.array([0.0])) == pytest.approx(1.0)
    # vanishes at a = +-1 when x = 0
    for a in (-1.0, 1.0):
        assert example2_separated.h(0.0, np.array([0.0]), np.array([a])) == pytest.approx(0.0)


def test_singular_block_coefficients():
    spec = builtin_problem("singular_block", kappa=2.5)
    assert spec.G(0.4).tolist() == [[1.0]]
    assert spec.k_cost(0.7).tolist() == [2.5]
    assert spec.x0.tolist() == [1.0]


def test_negative_singular_cost_fails_check():
    cfg = builtin_problem("singular_block").config
    cfg = {**cfg, "coefficients": {**cfg["coefficients"],
                                   "singular_cost": {"form": "constant", "value": [-1.0]}}}
    report = validate_problem(problem_from_config(cfg))
    failed = {c.name for c in report.violated()}
    assert failed == {"singular_cost_nonnegative"}


def test_mismatched_gradient_is_flagged(example1):
    # declare a terminal gradient off by 10%
    broken = example1.with_overrides(g_x=lambda x: 1.1 * example1.g_x(x) + 0.1)
    report = validate_problem(broken)
    assert not report.passed
    assert any(c.name == "gradient_consistency_terminal_cost" for c in report.violated())


def test_nonfinite_coefficient_raises_naming_function(example1):
    broken = example1.with_overrides(h=lambda t, x, a: np.full(np.shape(x)[:-1], np.inf))
    with pytest.raises(ProblemError, match="running_cost"):
        validate_problem(broken)


def test_validation_deterministic_given_probe_seed(example2_stochastic):
    r1 = validate_problem(example2_stochastic, probe_seed=9)
    r2 = validate_problem(example2_stochastic, probe_seed=9)
    assert str(r1) == str(r2)


def test_json_round_trip_exact(example1):
    text = problem_to_json(example1)
    again = problem_from_json(text)
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = rng.uniform(0, 1)
        x = rng.uniform(-2, 2, size=1)
        a = example1.u1_grid[rng.integers(0, 2)]
        assert example1.b(t, x, a).tolist() == again.b(t, x, a).tolist()
        assert example1.sigma(t, x, a).tolist() == again.sigma(t, x, a).tolist()
        assert float(example1.h(t, x, a)) == float(again.h(t, x, a))
        assert float(example1.g(x)) == float(again.g(x))
        assert example1.k_cost(t).tolist() == again.k_cost(t).tolist()


def test_json_round_trip_through_file(tmp_path, example2_stochastic):
    path = tmp_path / "problem.json"
    problem_to_json(example2_stochastic, path)
    again = problem_from_json(path)
    assert again.name == example2_stochastic.name
    assert again.u1_grid.tolist() == example2_stochastic.u1_grid.tolist()


def test_custom_problem_has_no_json_form(tanh_drift):
    with pytest.raises(ProblemError, match="custom callables"):
        problem_to_json(tanh_drift)


def test_time_grid_basics():
    grid = TimeGrid(4, 2.0)
    assert grid.dt == 0.5
    assert grid.knots.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    with pytest.raises(ProblemError):
        TimeGrid(0, 1.0)


class TestNoiseBatch:
    def test_same_seed_bit_identical(self):
        grid = TimeGrid(32, 1.0)
        a = NoiseBatch.generate(16, grid, 2, 1234)
        b = NoiseBatch.generate(16, grid, 2, 1234)
        assert np.array_equal(a.increments, b.increments)

    def test_path_substreams_independent_of_batch_size(self):
        grid = TimeGrid(8, 1.0)
        small = NoiseBatch.generate(3, grid, 1, 7)
        large = NoiseBatch.generate(10, grid, 1, 7)
        assert np.array_equal(small.increments, large.increments[:3])

    def test_increment_moments(self):
        grid = TimeGrid(50, 1.0)
        batch = NoiseBatch.generate(2000, grid, 1, 42)
        flat = batch.increments.ravel()
        assert abs(flat.mean()) < 3 * math.sqrt(grid.dt / flat.size)
        assert flat.var() == pytest.approx(grid.dt, rel=0.05)


def test_problem_rejects_empty_grid(example1):
    with pytest.raises(ProblemError, match="u1_grid"):
        example1.with_overrides(u1_grid=np.zeros((0, 1)))
