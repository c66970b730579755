"""Strict, relaxed and singular control processes on a time grid.

A strict control assigns one candidate point per grid cell.  A relaxed
control assigns a finite discrete probability measure (atoms + weights) per
cell, which makes dynamics and running cost linear in the control.  A
singular control assigns a nonnegative increment vector to each half-open
cell (t_j, t_{j+1}]; its cumulative process is evaluated as the
left-limit partial sum, honoring left-continuity at grid resolution.

The chattering construction approximates a relaxed control by a strict one:
within each cell, each atom is played for a consecutive run of refined
sub-steps proportional to its weight (largest-remainder rounding), so
occupation fractions deviate from the weights by at most one refined step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import TimeGrid

_WEIGHT_TOL = 1e-12


class ControlError(ValueError):
    """Raised for malformed controls or invalid control operations."""


class ChatteringError(ControlError):
    """Raised when the refined grid cannot represent all positive weights."""


@dataclass(frozen=True)
class CellMeasure:
    """A finite discrete probability measure on one grid cell."""

    atoms: np.ndarray   # (A, k)
    weights: np.ndarray  # (A,)

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        weights = np.asarray(self.weights, dtype=float).ravel()
        if len(atoms) != len(weights):
            raise ControlError("measure needs one weight per atom")
        if np.any(weights < 0):
            raise ControlError("measure weights must be nonnegative")
        if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ControlError(f"measure weights sum to {weights.sum()!r}, expected 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)


def integrate(measure: CellMeasure, f: Callable):
    """Integrate f over a single-cell measure: sum_j w_j f(a_j).

    f maps one atom (k,) to a scalar or array; the result has f's output
    shape.  Exactly linear in f.  A non-finite f value raises ControlError
    naming the offending atom.
    """
    total = None
    for atom, w in zip(measure.atoms, measure.weights):
        value = np.asarray(f(atom), dtype=float)
        if not np.all(np.isfinite(value)):
            raise ControlError(f"integrand returned non-finite value at atom {atom.tolist()}")
        total = w * value if total is None else total + w * value
    return total


@dataclass(frozen=True)
class StrictControl:
    """Per-cell control values, shape (N, k)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape[0] != self.grid.num_steps:
            raise ControlError(
                f"expected {self.grid.num_steps} cell values, got {vals.shape[0]}"
            )
        object.__setattr__(self, "values", vals)

    @property
    def control_dim(self) -> int:
        return self.values.shape[1]

    def in_grid(self, u1_grid: np.ndarray) -> bool:
        """True iff every cell value is a row of u1_grid (exact match)."""
        pts = {pt.tobytes() for pt in np.asarray(u1_grid, dtype=float)}
        return all(v.tobytes() in pts for v in self.values)


@dataclass(frozen=True)
class RelaxedControl:
    """Per-cell discrete measures stored as padded arrays.

    atoms has shape (N, A, k) and weights (N, A); padding entries carry
    weight 0.  Weights are nonnegative and sum to 1 per cell within 1e-12.
    """

    grid: TimeGrid
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if atoms.ndim == 2:
            atoms = atoms[:, :, None]
        if atoms.shape[0] != self.grid.num_steps or weights.shape != atoms.shape[:2]:
            raise ControlError("relaxed control arrays do not match the grid")
        if np.any(weights < 0):
            raise ControlError("relaxed control weights must be nonnegative")
        sums = weights.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > _WEIGHT_TOL:
            j = int(np.argmax(np.abs(sums - 1.0)))
            raise ControlError(f"cell {j}: weights sum to {sums[j]!r}, expected 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def control_dim(self) -> int:
        return self.atoms.shape[2]

    def cell(self, j: int) -> CellMeasure:
        keep = self.weights[j] > 0
        if not keep.any():
            raise ControlError(f"cell {j} has no positive weight")
        return CellMeasure(self.atoms[j][keep], self.weights[j][keep])

    def cells(self):
        return [self.cell(j) for j in range(self.grid.num_steps)]


@dataclass(frozen=True)
class SingularControl:
    """Nonnegative increments per cell, shape (N, m); eta_0 = 0."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 1:
            inc = inc[:, None]
        if inc.shape[0] != self.grid.num_steps:
            raise ControlError(
                f"expected {self.grid.num_steps} increment rows, got {inc.shape[0]}"
            )
        if np.any(inc < 0):
            raise ControlError("singular increments must be nonnegative componentwise")
        object.__setattr__(self, "increments", inc)

    @property
    def singular_dim(self) -> int:
        return self.increments.shape[1]

    def cumulative(self) -> np.ndarray:
        """Knot values of the nondecreasing process, shape (N+1, m).

        The increment of cell (t_j, t_{j+1}] is not yet included at knot
        t_j (left limits), so row 0 is zero and row N is the total.
        """
        out = np.zeros((self.grid.num_steps + 1, self.singular_dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(frozen=True)
class PerturbationSpec:
    """A convex perturbation size theta in [0, 1] and its direction pair."""

    theta: float
    relaxed: RelaxedControl
    singular: SingularControl

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ControlError(f"theta must lie in [0, 1], got {self.theta!r}")


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def constant_strict(grid: TimeGrid, point) -> StrictControl:
    point = np.atleast_1d(np.asarray(point, dtype=float))
    return StrictControl(grid, np.tile(point, (grid.num_steps, 1)))


def constant_relaxed(grid: TimeGrid, atoms, weights) -> RelaxedControl:
    atoms = np.atleast_2d(np.asarray(atoms, dtype=float))
    weights = np.asarray(weights, dtype=float).ravel()
    return RelaxedControl(
        grid,
        np.tile(atoms, (grid.num_steps, 1, 1)),
        np.tile(weights, (grid.num_steps, 1)),
    )


def zero_singular(grid: TimeGrid, singular_dim: int) -> SingularControl:
    return SingularControl(grid, np.zeros((grid.num_steps, singular_dim)))


def alternating_strict(grid: TimeGrid, num_blocks: int, high=1.0, low=-1.0) -> StrictControl:
    """Block-alternating scalar control: high on the first of num_blocks equal
    blocks, low on the second, and so on.  num_blocks must divide the grid."""
    if grid.num_steps % num_blocks != 0:
        raise ControlError(
            f"grid with {grid.num_steps} steps cannot hold {num_blocks} equal blocks"
        )
    per = grid.num_steps // num_blocks
    vals = np.empty(grid.num_steps)
    for blk in range(num_blocks):
        vals[blk * per:(blk + 1) * per] = high if blk % 2 == 0 else low
    return StrictControl(grid, vals[:, None])


def dirac_embed(v: StrictControl) -> RelaxedControl:
    """Identify a strict control with the relaxed control of point masses."""
    return RelaxedControl(
        v.grid,
        v.values[:, None, :],
        np.ones((v.grid.num_steps, 1)),
    )


# ---------------------------------------------------------------------------
# convex perturbation
# ---------------------------------------------------------------------------

def _merge_cell(atoms_a, w_a, atoms_b, w_b, wa, wb):
    """Union of two cell measures with weights wa*w_a + wb*w_b, deduplicated."""
    order = []
    acc = {}
    for atoms, weights, factor in ((atoms_a, w_a, wa), (atoms_b, w_b, wb)):
        for atom, w in zip(atoms, weights):
            if w == 0.0 and factor == 0.0:
                continue
            key = atom.tobytes()
            if key not in acc:
                acc[key] = [atom, 0.0]
                order.append(key)
            acc[key][1] += factor * w
    pts = np.array([acc[k][0] for k in order])
    wts = np.array([acc[k][1] for k in order])
    return pts, wts


def convex_combine(
    base: tuple, direction: tuple, theta: float
) -> tuple:
    """Move a (relaxed, singular) pair a fraction theta toward a direction pair.

    The measure part is the atom union with weights (1-theta) w_base +
    theta w_direction; the singular part mixes increments the same way.
    theta = 0 and theta = 1 return the base and direction unchanged.
    """
    if not 0.0 <= theta <= 1.0:
        raise ControlError(f"theta must lie in [0, 1], got {theta!r}")
    mu, xi = base
    q, eta = direction
    if mu.grid != q.grid or xi.grid != eta.grid:
        raise ControlError("base and direction controls must share the grid")
    if theta == 0.0:
        return mu, xi
    if theta == 1.0:
        return q, eta

    cells_atoms, cells_weights = [], []
    for j in range(mu.grid.num_steps):
        pts, wts = _merge_cell(
            mu.atoms[j], mu.weights[j], q.atoms[j], q.weights[j], 1.0 - theta, theta
        )
        cells_atoms.append(pts)
        cells_weights.append(wts)
    width = max(len(w) for w in cells_weights)
    k = mu.atoms.shape[2]
    atoms = np.zeros((mu.grid.num_steps, width, k))
    weights = np.zeros((mu.grid.num_steps, width))
    for j, (pts, wts) in enumerate(zip(cells_atoms, cells_weights)):
        atoms[j, : len(wts)] = pts
        atoms[j, len(wts):] = pts[0]  # padding rows stay inside the atom set
        weights[j, : len(wts)] = wts
    mixed = RelaxedControl(mu.grid, atoms, weights)
    inc = (1.0 - theta) * xi.increments + theta * eta.increments
    return mixed, SingularControl(xi.grid, inc)


# ---------------------------------------------------------------------------
# chattering approximation
# ---------------------------------------------------------------------------

def _apportion(weights: np.ndarray, seats: int) -> np.ndarray:
    """Largest-remainder apportionment of `seats` slots to the weights."""
    quotas = weights * seats
    alloc = np.floor(quotas).astype(int)
    remainder = quotas - alloc
    short = seats - int(alloc.sum())
    if short > 0:
        # stable: larger remainder first, ties to the lower index
        order = np.lexsort((np.arange(len(weights)), -remainder))
        alloc[order[:short]] += 1
    return alloc


def chattering(q: RelaxedControl, n: int) -> StrictControl:
    """Approximate a relaxed control by a strict control on a refined grid.

    Each base cell is subdivided into n * A refined sub-steps (A the padded
    atom count); atom j occupies a consecutive run of sub-steps apportioned
    to its weight by largest remainder, so its occupation fraction deviates
    from w_j by at most one refined step.  Raises ChatteringError when some
    positive weight receives no sub-step, stating the minimum refinement.
    """
    if n <= 0:
        raise ControlError("refinement index n must be positive")
    num_cells = q.grid.num_steps
    per_cell = n * q.atoms.shape[1]
    refined = q.grid.refine(per_cell)
    values = np.empty((refined.num_steps, q.control_dim))
    for j in range(num_cells):
        w = q.weights[j]
        alloc = _apportion(w, per_cell)
        starved = (w > 0) & (alloc == 0)
        if starved.any():
            need = int(np.ceil(1.0 / w[w > 0].min()))
            raise ChatteringError(
                f"cell {j}: refined grid too coarse to represent all positive "
                f"weights; needs at least {need} sub-steps per cell, got {per_cell}"
            )
        pos = j * per_cell
        for atom, count in zip(q.atoms[j], alloc):
            values[pos:pos + count] = atom
            pos += count
    return StrictControl(refined, values)


def regrid_relaxed(q: RelaxedControl, num_cells: int) -> RelaxedControl:
    """Resample a relaxed control onto num_cells equal cells by time-averaging.

    The measure of a new cell is the overlap-length-weighted convex mixture
    of the old cell measures it covers, so weights stay nonnegative and
    normalized.
    """
    if num_cells <= 0:
        raise ControlError("num_cells must be positive")
    T = q.grid.horizon
    old_dt = q.grid.dt
    new_dt = T / num_cells
    cells_atoms, cells_weights = [], []
    for j in range(num_cells):
        start, end = j * new_dt, (j + 1) * new_dt
        lo = int(np.floor(start / old_dt))
        hi = min(int(np.ceil(end / old_dt)), q.grid.num_steps)
        acc, order = {}, []
        for i in range(lo, hi):
            overlap = min(end, (i + 1) * old_dt) - max(start, i * old_dt)
            if overlap <= 0:
                continue
            frac = overlap / new_dt
            for atom, w in zip(q.atoms[i], q.weights[i]):
                if w == 0.0:
                    continue
                key = atom.tobytes()
                if key not in acc:
                    acc[key] = [atom, 0.0]
                    order.append(key)
                acc[key][1] += frac * w
        pts = np.array([acc[k][0] for k in order])
        wts = np.array([acc[k][1] for k in order])
        cells_atoms.append(pts)
        cells_weights.append(wts / wts.sum())
    width = max(len(w) for w in cells_weights)
    grid = TimeGrid(num_cells, T)
    atoms = np.zeros((num_cells, width, q.control_dim))
    weights = np.zeros((num_cells, width))
    for j, (pts, wts) in enumerate(zip(cells_atoms, cells_weights)):
        atoms[j, : len(wts)] = pts
        atoms[j, len(wts):] = pts[0]
        weights[j, : len(wts)] = wts
    return RelaxedControl(grid, atoms, weights)


# ---------------------------------------------------------------------------
# JSON forms
# ---------------------------------------------------------------------------

def control_to_obj(control) -> dict:
    """JSON-ready description of any control type."""
    if isinstance(control, StrictControl):
        return {"type": "strict", "values": control.values.tolist()}
    if isinstance(control, RelaxedControl):
        cells = []
        for j in range(control.grid.num_steps):
            keep = control.weights[j] > 0
            cells.append(
                {
                    "atoms": control.atoms[j][keep].tolist(),
                    "weights": control.weights[j][keep].tolist(),
                }
            )
        return {"type": "relaxed", "cells": cells}
    if isinstance(control, SingularControl):
        return {"type": "singular", "increments": control.increments.tolist()}
    raise ControlError(f"cannot serialize object of type {type(control).__name__}")


def control_from_obj(obj: dict, grid: TimeGrid):
    """Rebuild a control from its JSON description on the given grid."""
    kind = obj.get("type")
    if kind == "strict":
        return StrictControl(grid, np.asarray(obj["values"], dtype=float))
    if kind == "singular":
        return SingularControl(grid, np.asarray(obj["increments"], dtype=float))
    if kind == "relaxed":
        cells = obj["cells"]
        if len(cells) != grid.num_steps:
            raise ControlError(
                f"control has {len(cells)} cells but the grid has {grid.num_steps}"
            )
        width = max(len(c["weights"]) for c in cells)
        kdim = len(np.atleast_2d(np.asarray(cells[0]["atoms"]))[0])
        atoms = np.zeros((grid.num_steps, width, kdim))
        weights = np.zeros((grid.num_steps, width))
        for j, c in enumerate(cells):
            pts = np.atleast_2d(np.asarray(c["atoms"], dtype=float))
            wts = np.asarray(c["weights"], dtype=float)
            atoms[j, : len(wts)] = pts
            atoms[j, len(wts):] = pts[0]
            weights[j, : len(wts)] = wts
        return RelaxedControl(grid, atoms, weights)
    raise ControlError(f"unknown control type {kind!r}")
