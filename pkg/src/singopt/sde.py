"""Forward simulation of the controlled state equations.

All schemes are explicit Euler-Maruyama on a uniform grid, vectorized over
paths: the strict and relaxed state equations, the (first-order) variational
equation of a convex control perturbation, and the matrix-valued fundamental
solution of the linearized dynamics together with its inverse.  The singular
increment of a cell is applied inside the same step as drift and diffusion
(end-of-cell convention, matching the left-continuity convention of
singular controls).

Everything is deterministic given (problem, controls, grid, noise); means
and suprema reduce in fixed path order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controls import (
    RelaxedControl,
    SingularControl,
    StrictControl,
    chattering,
    dirac_embed,
    regrid_relaxed,
)
from .model import NoiseBatch, ProblemSpec, TimeGrid


class SimulationError(RuntimeError):
    """Raised when a simulated state stops being finite (blow-up)."""


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Simulated states, shape (M, N+1, n), plus the noise that produced them."""

    states: np.ndarray = field(repr=False)
    grid: TimeGrid
    noise: NoiseBatch
    control_tag: str

    @property
    def num_paths(self) -> int:
        return self.states.shape[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]


@dataclass(frozen=True)
class VariationalEnsemble:
    """First-order state sensitivities z, shape (M, N+1, n); z_0 = 0."""

    z: np.ndarray = field(repr=False)
    grid: TimeGrid
    noise: NoiseBatch


@dataclass(frozen=True)
class FundamentalPair:
    """Fundamental solution Phi of the linearized dynamics and its inverse Psi.

    Both have shape (M, N+1, n, n) with identity initial value.  Psi solves
    the Ito inverse equation; the product Psi Phi is monitored, not
    re-inverted, so its defect exposes the discretization error.
    """

    Phi: np.ndarray = field(repr=False)
    Psi: np.ndarray = field(repr=False)
    grid: TimeGrid

    def inverse_defect(self) -> float:
        """max over paths and knots of || Psi_t Phi_t - I ||_F."""
        prod = np.einsum("mtpq,mtqr->mtpr", self.Psi, self.Phi)
        eye = np.eye(prod.shape[-1])
        return float(np.sqrt(((prod - eye) ** 2).sum(axis=(-2, -1))).max())


def _cell_average(fn, t, x, atoms, weights):
    """Measure average sum_a w_a fn(t, x, a) over one cell's atoms."""
    total = None
    for atom, w in zip(atoms, weights):
        if w == 0.0:
            continue
        value = fn(t, x, atom)
        total = w * value if total is None else total + w * value
    return total


def _check_finite(x, step):
    if np.all(np.isfinite(x)):
        return
    bad_paths = np.where(~np.isfinite(x).all(axis=tuple(range(1, x.ndim))))[0]
    raise SimulationError(
        f"state became non-finite at step {step}, first affected path {int(bad_paths[0])}"
    )


def _simulate(spec: ProblemSpec, atoms, weights, eta: SingularControl,
              grid: TimeGrid, noise: NoiseBatch, tag: str) -> TrajectoryEnsemble:
    if noise.num_steps != grid.num_steps or noise.noise_dim != spec.d:
        raise SimulationError("noise batch does not match the grid / noise dimension")
    M = noise.num_paths
    knots = grid.knots
    dt = grid.dt
    dW = noise.increments
    inc = eta.increments
    has_singular = bool(inc.any())
    gain_inc = (
        [spec.G(knots[j]) @ inc[j] for j in range(grid.num_steps)] if has_singular else None
    )
    x = np.empty((M, grid.num_steps + 1, spec.n))
    x[:, 0, :] = spec.x0
    for j in range(grid.num_steps):
        t = knots[j]
        xj = x[:, j, :]
        drift = _cell_average(spec.b, t, xj, atoms[j], weights[j])
        diff = _cell_average(spec.sigma, t, xj, atoms[j], weights[j])
        step = xj + drift * dt + np.matmul(diff, dW[:, j, :, None])[..., 0]
        if has_singular:
            step = step + gain_inc[j]
        x[:, j + 1, :] = step
        _check_finite(x[:, j + 1, :], j + 1)
    return TrajectoryEnsemble(x, grid, noise, tag)


def _require_grid(grid: TimeGrid, *controls):
    for c in controls:
        if c.grid != grid:
            raise SimulationError(
                f"control defined on {c.grid.num_steps} steps does not match the "
                f"simulation grid of {grid.num_steps} steps"
            )


def simulate_strict(spec: ProblemSpec, v: StrictControl, eta: SingularControl,
                    grid: TimeGrid, noise: NoiseBatch) -> TrajectoryEnsemble:
    """Euler-Maruyama for the strictly controlled state equation."""
    _require_grid(grid, v, eta)
    q = dirac_embed(v)
    return _simulate(spec, q.atoms, q.weights, eta, grid, noise, "strict")


def simulate_relaxed(spec: ProblemSpec, q: RelaxedControl, eta: SingularControl,
                     grid: TimeGrid, noise: NoiseBatch) -> TrajectoryEnsemble:
    """Euler-Maruyama for the measure-controlled state equation.

    Drift and diffusion are replaced by their per-cell measure averages; a
    point-mass control reproduces simulate_strict bit for bit.
    """
    _require_grid(grid, q, eta)
    return _simulate(spec, q.atoms, q.weights, eta, grid, noise, "relaxed")


def simulate_variational(
    spec: ProblemSpec,
    base: tuple,
    direction: tuple,
    base_traj: TrajectoryEnsemble,
    grid: TimeGrid,
    noise: NoiseBatch,
) -> VariationalEnsemble:
    """Simulate the first-order sensitivity z of the state to the perturbation
    moving `base` toward `direction`.

    The linearization runs along the base trajectory; the inhomogeneous terms
    carry the coefficient differences in the direction (direction - base), so
    (x_theta - x) / theta converges to z in mean square as theta -> 0.
    """
    mu, xi = base
    q, eta = direction
    _require_grid(grid, mu, xi, q, eta)
    M = noise.num_paths
    dt = grid.dt
    dW = noise.increments
    knots = grid.knots
    dinc = eta.increments - xi.increments
    z = np.zeros((M, grid.num_steps + 1, spec.n))
    for j in range(grid.num_steps):
        t = knots[j]
        xj = base_traj.states[:, j, :]
        zj = z[:, j, :]
        bx = np.broadcast_to(
            _cell_average(spec.b_x, t, xj, mu.atoms[j], mu.weights[j]), (M, spec.n, spec.n)
        )
        sx = np.broadcast_to(
            _cell_average(spec.sigma_x, t, xj, mu.atoms[j], mu.weights[j]),
            (M, spec.d, spec.n, spec.n),
        )
        db = _cell_average(spec.b, t, xj, q.atoms[j], q.weights[j]) - _cell_average(
            spec.b, t, xj, mu.atoms[j], mu.weights[j]
        )
        ds = _cell_average(spec.sigma, t, xj, q.atoms[j], q.weights[j]) - _cell_average(
            spec.sigma, t, xj, mu.atoms[j], mu.weights[j]
        )
        ds = np.broadcast_to(ds, (M, spec.n, spec.d))
        z[:, j + 1, :] = (
            zj
            + (np.einsum("mpq,mq->mp", bx, zj) + db) * dt
            + np.einsum("mjpq,mq,mj->mp", sx, zj, dW[:, j, :])
            + np.einsum("mpj,mj->mp", ds, dW[:, j, :])
            + spec.G(t) @ dinc[j]
        )
        _check_finite(z[:, j + 1, :], j + 1)
    return VariationalEnsemble(z, grid, noise)


def fundamental_solutions(
    spec: ProblemSpec,
    pair: tuple,
    base_traj: TrajectoryEnsemble,
    grid: TimeGrid,
    noise: NoiseBatch,
) -> FundamentalPair:
    """Euler-Maruyama for the fundamental matrix of the linearized dynamics
    and for its inverse.

    Phi solves dPhi = bx Phi dt + sx Phi dW along the base trajectory; the
    inverse solves the Ito equation dPsi = Psi (sum_i sx_i^2 - bx) dt
    - sum_i Psi sx_i dW_i, so Psi_t Phi_t stays within discretization error
    of the identity.
    """
    mu, _ = pair
    M = noise.num_paths
    dt = grid.dt
    dW = noise.increments
    knots = grid.knots
    eye = np.eye(spec.n)
    Phi = np.empty((M, grid.num_steps + 1, spec.n, spec.n))
    Psi = np.empty_like(Phi)
    Phi[:, 0] = eye
    Psi[:, 0] = eye
    for j in range(grid.num_steps):
        t = knots[j]
        xj = base_traj.states[:, j, :]
        bx = np.broadcast_to(
            _cell_average(spec.b_x, t, xj, mu.atoms[j], mu.weights[j]), (M, spec.n, spec.n)
        )
        sx = np.broadcast_to(
            _cell_average(spec.sigma_x, t, xj, mu.atoms[j], mu.weights[j]),
            (M, spec.d, spec.n, spec.n),
        )
        Pj = Phi[:, j]
        Qj = Psi[:, j]
        stoch = np.einsum("mjpq,mqr,mj->mpr", sx, Pj, dW[:, j, :])
        Phi[:, j + 1] = Pj + np.einsum("mpq,mqr->mpr", bx, Pj) * dt + stoch
        sx_sq = np.einsum("mjpq,mjqr->mpr", sx, sx)
        drift = np.einsum("mpq,mqr->mpr", Qj, sx_sq - bx)
        stoch = np.einsum("mpq,mjqr,mj->mpr", Qj, sx, dW[:, j, :])
        Psi[:, j + 1] = Qj + drift * dt - stoch
        _check_finite(Phi[:, j + 1], j + 1)
        _check_finite(Psi[:, j + 1], j + 1)
    return FundamentalPair(Phi, Psi, grid)


# ---------------------------------------------------------------------------
# cost functional
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo cost estimate with its standard error and components."""

    value: float
    std_error: float
    terminal: float
    running: float
    singular: float
    num_paths: int

    def as_dict(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "terminal": self.terminal,
            "running": self.running,
            "singular": self.singular,
            "num_paths": self.num_paths,
        }


def per_path_cost(spec: ProblemSpec, traj: TrajectoryEnsemble, control,
                  eta: SingularControl) -> np.ndarray:
    """Per-path total cost: terminal + left-endpoint running quadrature +
    singular quadrature sum_j k(t_j) . delta_eta_j."""
    grid = traj.grid
    if isinstance(control, StrictControl):
        control = dirac_embed(control)
    _require_grid(grid, control, eta)
    knots = grid.knots
    dt = grid.dt
    M = traj.num_paths
    running = np.zeros(M)
    for j in range(grid.num_steps):
        xj = traj.states[:, j, :]
        hbar = _cell_average(spec.h, knots[j], xj, control.atoms[j], control.weights[j])
        running = running + np.broadcast_to(hbar, (M,)) * dt
    singular = float(
        sum(spec.k_cost(knots[j]) @ eta.increments[j] for j in range(grid.num_steps))
    )
    terminal = np.broadcast_to(np.asarray(spec.g(traj.terminal), dtype=float), (M,))
    return terminal + running + singular


def estimate_cost(spec: ProblemSpec, traj: TrajectoryEnsemble, control,
                  eta: SingularControl) -> CostEstimate:
    """Monte Carlo estimate of the expected cost of (control, eta)."""
    grid = traj.grid
    if isinstance(control, StrictControl):
        control = dirac_embed(control)
    costs = per_path_cost(spec, traj, control, eta)
    M = len(costs)
    se = float(costs.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    knots = grid.knots
    singular = float(
        sum(spec.k_cost(knots[j]) @ eta.increments[j] for j in range(grid.num_steps))
    )
    terminal = float(np.mean(np.asarray(spec.g(traj.terminal), dtype=float)))
    return CostEstimate(
        value=float(costs.mean()),
        std_error=se,
        terminal=terminal,
        running=float(costs.mean()) - terminal - singular,
        singular=singular,
        num_paths=M,
    )


# ---------------------------------------------------------------------------
# chattering convergence experiment
# ---------------------------------------------------------------------------

def regrid_singular(eta: SingularControl, num_cells: int) -> SingularControl:
    """Redistribute increments onto num_cells equal cells by overlap fractions."""
    T = eta.grid.horizon
    old_dt = eta.grid.dt
    new_dt = T / num_cells
    out = np.zeros((num_cells, eta.singular_dim))
    for i in range(eta.grid.num_steps):
        start, end = i * old_dt, (i + 1) * old_dt
        lo = int(np.floor(start / new_dt))
        hi = min(int(np.ceil(end / new_dt)), num_cells)
        for j in range(lo, hi):
            overlap = min(end, (j + 1) * new_dt) - max(start, j * new_dt)
            if overlap > 0:
                out[j] += eta.increments[i] * (overlap / old_dt)
    return SingularControl(TimeGrid(num_cells, T), out)


def chattering_gap(spec: ProblemSpec, q: RelaxedControl, eta: SingularControl,
                   n: int, num_paths: int, seed) -> dict:
    """Trajectory and cost gap between a relaxed control and its n-th
    chattering approximant, under common refined-grid noise.

    The approximant plays the n-block time-average of q; both controls are
    simulated on the approximant's refined grid.  Returns the sup-over-knots
    mean-square trajectory gap, |J(u_n) - J(q)| and the standard error of
    the per-path cost difference.
    """
    qn = regrid_relaxed(q, n)
    un = chattering(qn, n)
    refined = un.grid
    q_ref = regrid_relaxed(q, refined.num_steps)
    eta_ref = regrid_singular(eta, refined.num_steps)
    noise = NoiseBatch.generate(num_paths, refined, spec.d, (seed, n))
    x_strict = simulate_strict(spec, un, eta_ref, refined, noise)
    x_relax = simulate_relaxed(spec, q_ref, eta_ref, refined, noise)
    gap = ((x_strict.states - x_relax.states) ** 2).sum(axis=2).mean(axis=0)
    cost_strict = per_path_cost(spec, x_strict, un, eta_ref)
    cost_relax = per_path_cost(spec, x_relax, q_ref, eta_ref)
    diff = cost_strict - cost_relax
    M = len(diff)
    se = float(diff.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return {
        "n": n,
        "traj_gap": float(gap.max()),
        "cost_gap": abs(float(diff.mean())),
        "cost_gap_se": se,
        "refined_steps": refined.num_steps,
    }
