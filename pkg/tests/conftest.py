"""Shared fixtures: built-in problems, grids, and two custom fixtures that
exercise state-dependent linearizations (the built-ins all have b_x = 0)."""

import numpy as np
import pytest

from singopt.model import ProblemSpec, TimeGrid, builtin_problem, problem_from_config


@pytest.fixture
def example1():
    return builtin_problem("example1")


@pytest.fixture
def example2_separated():
    return builtin_problem("example2_separated")


@pytest.fixture
def example2_stochastic():
    return builtin_problem("example2_stochastic")


@pytest.fixture
def singular_block():
    return builtin_problem("singular_block", kappa=1.0)


def linear_drift_config(sigma_state=0.0, sigma_const=0.0):
    """b = a + 0.5 x with quadratic costs; optional state-proportional noise.

    Unlike the built-ins this problem has b_x != 0, so the fundamental pair,
    the explicit adjoint transport and the duality identity are nontrivial.
    """
    return {
        "name": "linear_drift",
        "dims": {"n": 1, "d": 1, "k": 1, "m": 1},
        "horizon": 1.0,
        "x0": [0.5],
        "coefficients": {
            "drift": {"form": "affine", "state": [[0.5]], "control": [[1.0]]},
            "diffusion": {
                "form": "affine",
                "const": [[sigma_const]],
                "state": [[[sigma_state]]],
            },
            "singular_gain": {"form": "zero"},
            "running_cost": {"form": "quadratic", "state_quad": [[1.0]]},
            "terminal_cost": {"form": "quadratic", "state_quad": [[1.0]]},
            "singular_cost": {"form": "zero"},
        },
        "u1_grid": [[-1.0], [0.0], [1.0]],
        "assumptions_box": {"low": [-2.0], "high": [2.0]},
    }


@pytest.fixture
def linear_drift_det():
    return problem_from_config(linear_drift_config())


@pytest.fixture
def linear_drift_stoch():
    return problem_from_config(linear_drift_config(sigma_state=0.3, sigma_const=0.1))


def tanh_drift_problem():
    """Custom-callable problem with a genuinely nonlinear drift, b = a + tanh(x).

    Used for the finite-difference consistency trend: on affine problems the
    variational remainder vanishes identically, so this fixture supplies the
    nonvanishing second-order term.
    """

    def b(t, x, a):
        return np.tanh(x) + np.asarray(a, dtype=float)

    def b_x(t, x, a):
        return (1.0 - np.tanh(x) ** 2)[..., None]

    def sigma(t, x, a):
        return np.ones(np.shape(x)[:-1] + (1, 1))

    def sigma_x(t, x, a):
        return np.zeros(np.shape(x)[:-1] + (1, 1, 1))

    def h(t, x, a):
        return (x ** 2).sum(axis=-1)

    def h_x(t, x, a):
        return 2.0 * x

    def g(x):
        return np.zeros(np.shape(x)[:-1])

    def g_x(x):
        return np.zeros_like(x)

    return ProblemSpec(
        name="tanh_drift", n=1, d=1, k=1, m=1, horizon=1.0, x0=[0.0],
        b=b, sigma=sigma, G=lambda t: np.zeros((1, 1)),
        h=h, g=g, k_cost=lambda t: np.zeros(1),
        b_x=b_x, sigma_x=sigma_x, h_x=h_x, g_x=g_x,
        u1_grid=[[-1.0], [1.0]],
        assumptions_box=([-2.0], [2.0]),
    )


@pytest.fixture
def tanh_drift():
    return tanh_drift_problem()


@pytest.fixture
def grid64():
    return TimeGrid(64, 1.0)


@pytest.fixture
def grid100():
    return TimeGrid(100, 1.0)
