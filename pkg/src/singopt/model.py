"""Control-problem definitions: coefficients, grids, noise and validation.

A problem couples a state equation

    dx_t = b(t, x_t, a_t) dt + sigma(t, x_t, a_t) dW_t + G(t) d(eta_t)

with the cost  E[ g(x_T) + int h(t, x_t, a_t) dt + int k(t) . d(eta_t) ],
where the absolutely-continuous control a takes values in a finite candidate
grid U1 and eta is a componentwise-nondecreasing singular control.  Four
built-in problems used throughout the test-suite are constructed here from
the JSON coefficient forms, so they round-trip exactly through the problem
file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet, build_coefficients

BUILTIN_NAMES = ("example1", "example2_separated", "example2_stochastic", "singular_block")


class ProblemError(ValueError):
    """Raised for inconsistent problem definitions or non-finite coefficients."""


@dataclass(frozen=True)
class ProblemSpec:
    """A fully specified control problem.

    Coefficient callables follow the broadcasting contract of
    :mod:`singopt.coefficients`: x may carry leading batch axes, the control
    point a is a single vector of shape (k,).  Gradients may be supplied
    independently of the value functions (validate_problem cross-checks them
    against finite differences).
    """

    name: str
    n: int
    d: int
    k: int
    m: int
    horizon: float
    x0: np.ndarray
    b: Callable
    sigma: Callable
    G: Callable
    h: Callable
    g: Callable
    k_cost: Callable
    b_x: Callable
    sigma_x: Callable
    h_x: Callable
    g_x: Callable
    u1_grid: np.ndarray
    assumptions_box: tuple
    config: dict | None = field(default=None, repr=False)
    diffusion_is_zero: bool = False
    running_state_quad: np.ndarray | None = None
    terminal_state_quad: np.ndarray | None = None

    def __post_init__(self):
        if min(self.n, self.d, self.k, self.m) <= 0:
            raise ProblemError("dimensions must be positive integers")
        if not self.horizon > 0:
            raise ProblemError("horizon must be positive")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(self.n))
        grid = np.asarray(self.u1_grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        if grid.size == 0 or grid.shape[1] != self.k or not np.all(np.isfinite(grid)):
            raise ProblemError("u1_grid must be a nonempty finite set of points in R^k")
        object.__setattr__(self, "u1_grid", grid)
        lo = np.asarray(self.assumptions_box[0], dtype=float).reshape(self.n)
        hi = np.asarray(self.assumptions_box[1], dtype=float).reshape(self.n)
        if np.any(hi <= lo):
            raise ProblemError("assumptions_box must have low < high componentwise")
        object.__setattr__(self, "assumptions_box", (lo, hi))

    def with_overrides(self, **kwargs) -> "ProblemSpec":
        """Copy with selected fields replaced (test fixtures override gradients)."""
        return replace(self, **kwargs)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    num_steps: int
    horizon: float

    def __post_init__(self):
        if self.num_steps <= 0:
            raise ProblemError("num_steps must be positive")
        if not self.horizon > 0:
            raise ProblemError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    @property
    def knots(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.num_steps + 1)

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.num_steps * factor, self.horizon)


@dataclass(frozen=True)
class NoiseBatch:
    """Brownian increments for a path ensemble.

    Increment (i, j, :) is drawn from N(0, dt I_d) using a substream derived
    deterministically from (seed, path index), so path i's noise does not
    depend on how many paths the batch holds and regeneration is bit-exact.
    """

    num_paths: int
    num_steps: int
    noise_dim: int
    dt: float
    seed: object
    increments: np.ndarray = field(repr=False)

    @classmethod
    def generate(cls, num_paths: int, grid: TimeGrid, noise_dim: int, seed) -> "NoiseBatch":
        """seed may be an int or a tuple of ints (derived experiment streams)."""
        children = np.random.SeedSequence(seed).spawn(num_paths)
        dW = np.empty((num_paths, grid.num_steps, noise_dim))
        scale = np.sqrt(grid.dt)
        for i, child in enumerate(children):
            dW[i] = scale * np.random.default_rng(child).standard_normal(
                (grid.num_steps, noise_dim)
            )
        return cls(num_paths, grid.num_steps, noise_dim, grid.dt, seed, dW)


# ---------------------------------------------------------------------------
# built-in problems
# ---------------------------------------------------------------------------

def _builtin_config(name: str, kappa: float) -> dict:
    scalar = {"n": 1, "d": 1, "k": 1, "m": 1}
    box = {"low": [-2.0], "high": [2.0]}
    if name == "example1":
        return {
            "name": name,
            "dims": scalar,
            "horizon": 1.0,
            "x0": [0.0],
            "coefficients": {
                "drift": {"form": "affine", "control": [[1.0]]},
                "diffusion": {"form": "zero"},
                "singular_gain": {"form": "zero"},
                "running_cost": {"form": "quadratic", "state_quad": [[1.0]]},
                "terminal_cost": {"form": "zero"},
                "singular_cost": {"form": "zero"},
            },
            "u1_grid": [[-1.0], [1.0]],
            "assumptions_box": box,
        }
    if name in ("example2_separated", "example2_stochastic"):
        cfg = _builtin_config("example1", kappa)
        cfg["name"] = name
        # running cost x^2 + (1 - a^2)^2, expanded in powers of a
        cfg["coefficients"]["running_cost"]["control_poly"] = [[1.0, 0.0, -2.0, 0.0, 1.0]]
        cfg["u1_grid"] = [[v] for v in np.linspace(-1.0, 1.0, 21)]
        if name == "example2_stochastic":
            cfg["coefficients"]["diffusion"] = {"form": "affine", "const": [[1.0]]}
        return cfg
    if name == "singular_block":
        return {
            "name": name,
            "dims": scalar,
            "horizon": 1.0,
            "x0": [1.0],
            "coefficients": {
                "drift": {"form": "zero"},
                "diffusion": {"form": "zero"},
                "singular_gain": {"form": "constant", "value": [[1.0]]},
                "running_cost": {"form": "quadratic", "state_quad": [[1.0]]},
                "terminal_cost": {"form": "zero"},
                "singular_cost": {"form": "constant", "value": [float(kappa)]},
            },
            "u1_grid": [[0.0]],
            "assumptions_box": box,
        }
    raise ProblemError(f"unknown built-in problem '{name}'; available: {', '.join(BUILTIN_NAMES)}")


def problem_from_config(config: dict) -> ProblemSpec:
    """Assemble a ProblemSpec from a JSON-style problem description."""
    for key in ("dims", "horizon", "x0", "u1_grid", "assumptions_box"):
        if key not in config:
            raise ProblemError(f"problem config missing '{key}'")
    coeffs: CoefficientSet = build_coefficients(config)
    box = config["assumptions_box"]
    return ProblemSpec(
        name=str(config.get("name", "unnamed")),
        n=coeffs.n, d=coeffs.d, k=coeffs.k, m=coeffs.m,
        horizon=float(config["horizon"]),
        x0=config["x0"],
        b=coeffs.b, sigma=coeffs.sigma, G=coeffs.G,
        h=coeffs.h, g=coeffs.g, k_cost=coeffs.k_cost,
        b_x=coeffs.b_x, sigma_x=coeffs.sigma_x, h_x=coeffs.h_x, g_x=coeffs.g_x,
        u1_grid=config["u1_grid"],
        assumptions_box=(box["low"], box["high"]),
        config=config,
        diffusion_is_zero=coeffs.diffusion_is_zero,
        running_state_quad=coeffs.running_state_quad,
        terminal_state_quad=coeffs.terminal_state_quad,
    )


def builtin_problem(name: str, kappa: float = 1.0) -> ProblemSpec:
    """Return one of the built-in problems.

    ``kappa`` sets the singular cost rate of ``singular_block`` and is
    ignored by the other names.
    """
    return problem_from_config(_builtin_config(name, kappa))


def problem_to_json(spec: ProblemSpec, path: str | Path | None = None) -> str:
    """Serialize a form-built problem to JSON; custom-callable specs cannot."""
    if spec.config is None:
        raise ProblemError(
            f"problem '{spec.name}' was built from custom callables and has no JSON form"
        )
    text = json.dumps(spec.config, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def problem_from_json(source: str | Path) -> ProblemSpec:
    """Load a problem from a JSON string or file path."""
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        text = Path(source).read_text()
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"invalid problem JSON: {exc}") from exc
    return problem_from_config(config)


# ---------------------------------------------------------------------------
# assumption validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def violated(self) -> list:
        return [c for c in self.checks if not c.passed]

    def __str__(self):
        lines = [
            f"[{'pass' if c.passed else 'FAIL'}] {c.name}: {c.detail}" for c in self.checks
        ]
        return "\n".join(lines)


def _require_finite(value, fn_name, t, x, a=None):
    if not np.all(np.isfinite(value)):
        where = f"t={t!r}, x={np.asarray(x).tolist()!r}"
        if a is not None:
            where += f", a={np.asarray(a).tolist()!r}"
        raise ProblemError(f"{fn_name} returned a non-finite value at {where}")
    return value


def _fd_gradient(fn, x, eps):
    """Central finite differences of fn along the state, one component at a time."""
    n = x.shape[-1]
    base = np.asarray(fn(x), dtype=float)
    cols = []
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        cols.append((np.asarray(fn(x + dx)) - np.asarray(fn(x - dx))) / (2 * eps))
    return np.stack(cols, axis=-1), base


def validate_problem(
    spec: ProblemSpec,
    probe_seed: int = 0,
    num_probes: int = 64,
    gradient_rtol: float = 1e-4,
    growth_bound: float = 1e6,
) -> ValidationReport:
    """Probe the standing assumptions of a problem at random sample points.

    Checks, in order: componentwise nonnegativity of the singular cost rate,
    agreement of every declared state gradient with central finite
    differences (relative tolerance ``gradient_rtol``), and a linear-growth
    probe on b and sigma over the assumptions box.  Deterministic for a fixed
    ``probe_seed``.  A non-finite coefficient value raises ProblemError
    immediately, naming the function and inputs.
    """
    rng = np.random.default_rng(probe_seed)
    lo, hi = spec.assumptions_box
    ts = rng.uniform(0.0, spec.horizon, size=num_probes)
    xs = rng.uniform(lo, hi, size=(num_probes, spec.n))
    atoms = spec.u1_grid[rng.integers(0, len(spec.u1_grid), size=num_probes)]
    checks = []

    # singular cost rate must map into [0, inf)^m
    k_vals = np.array([_require_finite(spec.k_cost(t), "singular_cost", t, "-") for t in ts])
    k_min = float(k_vals.min())
    checks.append(
        CheckResult("singular_cost_nonnegative", k_min >= 0.0, f"min component {k_min:.3g}")
    )

    # gradient consistency: declared derivatives vs central differences
    eps = 1e-5
    worst = {"drift": 0.0, "diffusion": 0.0, "running_cost": 0.0, "terminal_cost": 0.0}
    for t, x, a in zip(ts, xs, atoms):
        _require_finite(spec.b(t, x, a), "drift", t, x, a)
        _require_finite(spec.sigma(t, x, a), "diffusion", t, x, a)
        _require_finite(spec.h(t, x, a), "running_cost", t, x, a)
        _require_finite(spec.g(x), "terminal_cost", t, x)

        fd, _ = _fd_gradient(lambda y: spec.b(t, y, a), x, eps)
        declared = np.asarray(spec.b_x(t, x, a), dtype=float)
        worst["drift"] = max(worst["drift"], _rel_err(fd, declared))

        fd, _ = _fd_gradient(lambda y: spec.sigma(t, y, a), x, eps)
        # fd has shape (n, d, n); declared is (d, n, n)
        declared = np.asarray(spec.sigma_x(t, x, a), dtype=float)
        worst["diffusion"] = max(worst["diffusion"], _rel_err(np.moveaxis(fd, 1, 0), declared))

        fd, _ = _fd_gradient(lambda y: spec.h(t, y, a), x, eps)
        declared = np.asarray(spec.h_x(t, x, a), dtype=float)
        worst["running_cost"] = max(worst["running_cost"], _rel_err(fd, declared))

        fd, _ = _fd_gradient(spec.g, x, eps)
        declared = np.asarray(spec.g_x(x), dtype=float)
        worst["terminal_cost"] = max(worst["terminal_cost"], _rel_err(fd, declared))
    for fn_name, err in worst.items():
        checks.append(
            CheckResult(
                f"gradient_consistency_{fn_name}",
                err <= gradient_rtol,
                f"worst relative error {err:.3g} (tol {gradient_rtol:g})",
            )
        )

    # growth probe: |b|, |sigma| against C (1 + |x| + |a|)
    ratio = 0.0
    for t, x, a in zip(ts, xs, atoms):
        scale = 1.0 + np.linalg.norm(x) + np.linalg.norm(a)
        ratio = max(ratio, np.linalg.norm(spec.b(t, x, a)) / scale)
        ratio = max(ratio, np.linalg.norm(spec.sigma(t, x, a)) / scale)
    checks.append(
        CheckResult(
            "linear_growth",
            ratio <= growth_bound,
            f"max |coefficient| / (1+|x|+|a|) = {ratio:.3g} over the assumptions box",
        )
    )

    checks.append(
        CheckResult("u1_grid", True, f"{len(spec.u1_grid)} candidate points in R^{spec.k}")
    )
    return ValidationReport(tuple(checks))


def _rel_err(fd, declared):
    return float(np.max(np.abs(fd - declared) / (1.0 + np.abs(declared))))
