"""First-order adjoint processes by two independent numerical routes.

The adjoint pair (p, P) prices state perturbations.  Route one evaluates the
explicit conditional-expectation formula: p_t is the time-t conditional
expectation of the terminal-gradient term transported by the fundamental
solution pair plus the accumulated running-cost gradient.  Route two sweeps
the linear backward SDE with terminal value g_x(x_T), estimating the
martingale integrand P and the drift by least-squares projection on a
polynomial basis in the current state (Longstaff-Schwartz style).  The two
routes cross-validate each other; agreement tolerances are part of the
test-suite.

Conditional expectations given the time-t state are least-squares
regressions; a regression of an identically-zero target returns exactly
zero, and a constant state column (deterministic problems) reduces the
projection to the plain mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .controls import RelaxedControl
from .model import NoiseBatch, ProblemSpec, TimeGrid
from .optimality import relaxed_hamiltonian_batch
from .sde import (
    FundamentalPair,
    TrajectoryEnsemble,
    _cell_average,
    fundamental_solutions,
    simulate_relaxed,
    simulate_variational,
)


class RegressionError(RuntimeError):
    """Raised when a conditional-expectation regression is unusable."""


def polynomial_features(x: np.ndarray, degree: int) -> np.ndarray:
    """Monomial features of total degree <= degree in the state, shape (M, F)."""
    M, n = x.shape
    cols = [np.ones(M)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            col = np.ones(M)
            for idx in combo:
                col = col * x[:, idx]
            cols.append(col)
    return np.column_stack(cols)


def fit_conditional(features: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Project targets onto the feature span; returns fitted values.

    targets may be (M,) or (M, ...) (each trailing component is regressed
    separately).  Raises RegressionError when there are fewer paths than
    basis functions or the solve produces non-finite coefficients; reduce
    the basis degree or add paths in that case.
    """
    M, F = features.shape
    if M < F:
        raise RegressionError(
            f"regression needs at least {F} paths for {F} basis functions, got {M}; "
            "reduce the basis degree or increase the number of paths"
        )
    flat = targets.reshape(M, -1)
    coeff, *_ = np.linalg.lstsq(features, flat, rcond=None)
    if not np.all(np.isfinite(coeff)):
        raise RegressionError(
            "regression produced non-finite coefficients; reduce the basis degree "
            "or increase the number of paths"
        )
    return (features @ coeff).reshape(targets.shape)


@dataclass(frozen=True)
class AdjointPair:
    """Adjoint estimates p (M, N+1, n) and P (M, N+1, n, d).

    P is None on the explicit route (that route produces p only; P can be
    recovered from the martingale integrand, see martingale_route_P).  By
    convention P[:, N] = 0: no Brownian exposure remains at the horizon.
    """

    p: np.ndarray = field(repr=False)
    P: np.ndarray | None = field(repr=False)
    method: str
    diagnostics: dict


@dataclass(frozen=True)
class AuxiliaryProcesses:
    """Transported sensitivity alpha = Psi z, the terminal functional X, the
    compensated martingale Y and the martingale integrand estimate Q."""

    alpha: np.ndarray = field(repr=False)  # (M, N+1, n)
    X: np.ndarray = field(repr=False)      # (M, n)
    Y: np.ndarray = field(repr=False)      # (M, N+1, n)
    Q: np.ndarray = field(repr=False)      # (M, N, n, d)


def _transpose_apply(mats: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """(mats^T vecs) per path: mats (M, n, n), vecs (M, n) -> (M, n)."""
    return np.einsum("mqp,mq->mp", mats, vecs)


def _grad_sums(spec: ProblemSpec, mu: RelaxedControl, traj: TrajectoryEnsemble,
               fund: FundamentalPair, grid: TimeGrid):
    """Per-step Phi_s^* hbar_x(s) and its prefix sums (left-endpoint rule)."""
    M = traj.num_paths
    knots = grid.knots
    terms = np.zeros((M, grid.num_steps, spec.n))
    for j in range(grid.num_steps):
        hx = np.broadcast_to(
            _cell_average(spec.h_x, knots[j], traj.states[:, j, :], mu.atoms[j], mu.weights[j]),
            (M, spec.n),
        )
        terms[:, j, :] = _transpose_apply(fund.Phi[:, j], hx)
    prefix = np.zeros((M, grid.num_steps + 1, spec.n))
    np.cumsum(terms * grid.dt, axis=1, out=prefix[:, 1:, :])
    return terms, prefix


def adjoint_explicit(
    spec: ProblemSpec,
    pair: tuple,
    traj: TrajectoryEnsemble,
    fund: FundamentalPair,
    grid: TimeGrid,
    degree: int = 2,
) -> AdjointPair:
    """Adjoint p from the explicit conditional-expectation representation.

    For each knot, the inner random variable Phi_T^* g_x(x_T) plus the
    remaining running-cost gradient integral is regressed on the polynomial
    basis in the time-t state, then transported by Psi_t^*.  At the horizon
    p equals g_x(x_T) exactly, per path.
    """
    mu, _ = pair
    M = traj.num_paths
    N = grid.num_steps
    gx_T = np.broadcast_to(np.asarray(spec.g_x(traj.terminal), dtype=float), (M, spec.n))
    _, prefix = _grad_sums(spec, mu, traj, fund, grid)
    total = prefix[:, N, :]
    head = _transpose_apply(fund.Phi[:, N], gx_T)
    p = np.empty((M, N + 1, spec.n))
    p[:, N, :] = gx_T
    worst = 0.0
    for j in range(N):
        target = head + (total - prefix[:, j, :])
        feats = polynomial_features(traj.states[:, j, :], degree)
        fitted = fit_conditional(feats, target)
        worst = max(worst, float(np.sqrt(np.mean((target - fitted) ** 2))))
        p[:, j, :] = _transpose_apply(fund.Psi[:, j], fitted)
    diags = {"basis_degree": degree, "basis_size": feats.shape[1], "max_residual_rms": worst}
    return AdjointPair(p=p, P=None, method="explicit", diagnostics=diags)


def _relaxed_hamiltonian_gradient(spec, t, x, atoms, weights, p, P):
    """Measure-averaged H_x = hbar_x + bbar_x^T p + sum_i sbar_x,i^T P_i."""
    M = x.shape[0]
    hx = np.broadcast_to(_cell_average(spec.h_x, t, x, atoms, weights), (M, spec.n))
    bx = np.broadcast_to(_cell_average(spec.b_x, t, x, atoms, weights), (M, spec.n, spec.n))
    sx = np.broadcast_to(
        _cell_average(spec.sigma_x, t, x, atoms, weights), (M, spec.d, spec.n, spec.n)
    )
    return hx + np.einsum("mqp,mq->mp", bx, p) + np.einsum("mjqp,mqj->mp", sx, P)


def adjoint_bsde(
    spec: ProblemSpec,
    pair: tuple,
    traj: TrajectoryEnsemble,
    grid: TimeGrid,
    degree: int = 2,
) -> AdjointPair:
    """Adjoint pair (p, P) from a backward regression sweep of the linear
    backward SDE with terminal value g_x(x_T).

    Per backward step, P_j is the regression of the martingale part of
    p_{j+1} against the Brownian increment (the time-j projection of p_{j+1}
    is subtracted first; this leaves the estimand unchanged because the
    increment has zero conditional mean, and removes most of the variance),
    and p_j is the regression of p_{j+1} plus the Hamiltonian-gradient drift
    evaluated at p_{j+1} (explicit backward Euler).
    """
    mu, _ = pair
    M = traj.num_paths
    N = grid.num_steps
    dt = grid.dt
    dW = traj.noise.increments
    knots = grid.knots
    p = np.empty((M, N + 1, spec.n))
    P = np.zeros((M, N + 1, spec.n, spec.d))
    p[:, N, :] = np.broadcast_to(np.asarray(spec.g_x(traj.terminal), dtype=float), (M, spec.n))
    worst = 0.0
    for j in range(N - 1, -1, -1):
        xj = traj.states[:, j, :]
        feats = polynomial_features(xj, degree)
        p_next = p[:, j + 1, :]
        p_proj = fit_conditional(feats, p_next)
        mart = np.einsum("mp,mj->mpj", p_next - p_proj, dW[:, j, :]) / dt
        P[:, j] = fit_conditional(feats, mart)
        hx = _relaxed_hamiltonian_gradient(
            spec, knots[j], xj, mu.atoms[j], mu.weights[j], p_next, P[:, j]
        )
        target = p_next + hx * dt
        fitted = fit_conditional(feats, target)
        worst = max(worst, float(np.sqrt(np.mean((target - fitted) ** 2))))
        p[:, j, :] = fitted
    diags = {"basis_degree": degree, "basis_size": feats.shape[1], "max_residual_rms": worst}
    return AdjointPair(p=p, P=P, method="bsde-regression", diagnostics=diags)


# ---------------------------------------------------------------------------
# auxiliary processes and the duality identity
# ---------------------------------------------------------------------------

def auxiliary_processes(
    spec: ProblemSpec,
    pair: tuple,
    traj: TrajectoryEnsemble,
    fund: FundamentalPair,
    variational,
    grid: TimeGrid,
    degree: int = 2,
) -> AuxiliaryProcesses:
    """alpha = Psi z, the terminal functional X, the compensated conditional
    expectation Y, and the martingale integrand Q.

    Y uses regressions for the interior knots and the exact identity
    Y_T = X - (full gradient integral) at the horizon.  Q regresses the
    discrete martingale increments against the Brownian increments.
    """
    mu, _ = pair
    M = traj.num_paths
    N = grid.num_steps
    dt = grid.dt
    dW = traj.noise.increments
    alpha = np.einsum("mtpq,mtq->mtp", fund.Psi, variational.z)
    gx_T = np.broadcast_to(np.asarray(spec.g_x(traj.terminal), dtype=float), (M, spec.n))
    _, prefix = _grad_sums(spec, mu, traj, fund, grid)
    head = _transpose_apply(fund.Phi[:, N], gx_T)
    X = head + prefix[:, N, :]
    # martingale E[X | F_t]: the accumulated part of X is known pathwise at
    # time t; only the remaining tail is a function of the Markov state and
    # goes through the regression.  Exact at the horizon.
    mart = np.empty((M, N + 1, spec.n))
    mart[:, N, :] = X
    for j in range(N):
        feats = polynomial_features(traj.states[:, j, :], degree)
        tail = head + (prefix[:, N, :] - prefix[:, j, :])
        mart[:, j, :] = prefix[:, j, :] + fit_conditional(feats, tail)
    Y = mart - prefix
    Q = np.empty((M, N, spec.n, spec.d))
    for j in range(N):
        feats = polynomial_features(traj.states[:, j, :], degree)
        incr = np.einsum("mp,mj->mpj", mart[:, j + 1, :] - mart[:, j, :], dW[:, j, :]) / dt
        Q[:, j] = fit_conditional(feats, incr)
    return AuxiliaryProcesses(alpha=alpha, X=X, Y=Y, Q=Q)


def martingale_route_P(
    spec: ProblemSpec,
    pair: tuple,
    traj: TrajectoryEnsemble,
    fund: FundamentalPair,
    aux: AuxiliaryProcesses,
    p: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Reconstruct P from the martingale integrand: P = Psi^* Q - sbar_x^* p.

    Returns an (M, N+1, n, d) array with the terminal slice zero, providing
    the cross-check route against the backward-sweep estimate.
    """
    mu, _ = pair
    M = traj.num_paths
    N = grid.num_steps
    knots = grid.knots
    P = np.zeros((M, N + 1, spec.n, spec.d))
    for j in range(N):
        xj = traj.states[:, j, :]
        sx = np.broadcast_to(
            _cell_average(spec.sigma_x, knots[j], xj, mu.atoms[j], mu.weights[j]),
            (M, spec.d, spec.n, spec.n),
        )
        P[:, j] = np.einsum("mqp,mqj->mpj", fund.Psi[:, j], aux.Q[:, j]) - np.einsum(
            "mjqp,mq->mpj", sx, p[:, j, :]
        )
    return P


def duality_residual(
    spec: ProblemSpec,
    pair: tuple,
    direction: tuple,
    grid: TimeGrid,
    noise: NoiseBatch,
    traj: TrajectoryEnsemble | None = None,
) -> tuple:
    """Monte Carlo residual of the duality identity E[alpha_T . Y_T] =
    E[g_x(x_T) . z_T], with the standard error of the per-path difference.

    All ingredients are computed on the common noise batch.  Y_T uses the
    exact horizon identity, so the residual isolates transport error of the
    fundamental pair rather than regression noise.
    """
    mu, xi = pair
    if traj is None:
        traj = simulate_relaxed(spec, mu, xi, grid, noise)
    z = simulate_variational(spec, pair, direction, traj, grid, noise)
    fund = fundamental_solutions(spec, pair, traj, grid, noise)
    M = traj.num_paths
    N = grid.num_steps
    gx_T = np.broadcast_to(np.asarray(spec.g_x(traj.terminal), dtype=float), (M, spec.n))
    alpha_T = np.einsum("mpq,mq->mp", fund.Psi[:, N], z.z[:, N, :])
    Y_T = _transpose_apply(fund.Phi[:, N], gx_T)
    per_path = np.einsum("mp,mp->m", alpha_T, Y_T) - np.einsum("mp,mp->m", gx_T, z.z[:, N, :])
    se = float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return abs(float(per_path.mean())), se


def variational_inequality_value(
    spec: ProblemSpec,
    base: tuple,
    direction: tuple,
    adjoint: AdjointPair,
    traj: TrajectoryEnsemble,
    grid: TimeGrid,
) -> tuple:
    """Monte Carlo estimate (value, standard error) of the first-order
    optimality functional: the Hamiltonian difference toward the direction
    measure plus the singular slack paired with the increment difference.

    At an optimal base the value is nonnegative up to Monte Carlo and
    discretization error, for every direction.
    """
    mu, xi = base
    q, eta = direction
    M = traj.num_paths
    dt = grid.dt
    knots = grid.knots
    P = adjoint.P
    if P is None:
        P = np.zeros((M, grid.num_steps + 1, spec.n, spec.d))
    per_path = np.zeros(M)
    dinc = eta.increments - xi.increments
    for j in range(grid.num_steps):
        xj = traj.states[:, j, :]
        pj = adjoint.p[:, j, :]
        Pj = P[:, j]
        h_dir = relaxed_hamiltonian_batch(spec, knots[j], xj, q.atoms[j], q.weights[j], pj, Pj)
        h_base = relaxed_hamiltonian_batch(spec, knots[j], xj, mu.atoms[j], mu.weights[j], pj, Pj)
        slack = spec.k_cost(knots[j]) + np.einsum("pq,mp->mq", spec.G(knots[j]), pj)
        per_path += (h_dir - h_base) * dt + slack @ dinc[j]
    se = float(per_path.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return float(per_path.mean()), se
