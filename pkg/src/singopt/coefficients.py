"""Form-tagged coefficient functions for controlled SDE problems.

Problems are described by six coefficient functions: a drift b(t, x, a), a
diffusion sigma(t, x, a), a singular gain G(t), a running cost h(t, x, a), a
terminal cost g(x) and a singular cost rate k(t).  To keep problem files
portable and bit-reproducible, coefficients are not arbitrary code: they are
built from a small set of closed forms (zero, constant, affine, quadratic
cost) that serialize to plain JSON and whose state gradients are available in
closed form.

Conventions
-----------
* state arguments broadcast: x has shape (..., n) and results keep the
  leading axes, so a whole path ensemble can be evaluated in one call;
* the control argument a is always a single point of shape (k,);
* sigma returns (..., n, d); its state gradient returns (..., d, n, n) with
  entry [j] the Jacobian of the j-th diffusion column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class CoefficientError(ValueError):
    """Raised for malformed coefficient configurations."""


def _arr(value, shape, name):
    out = np.asarray(value, dtype=float)
    if out.shape != shape:
        raise CoefficientError(f"{name}: expected shape {shape}, got {out.shape}")
    return out


@dataclass(frozen=True)
class CoefficientSet:
    """The six coefficient functions of a problem plus their state gradients.

    ``config`` retains the JSON-serializable description the set was built
    from; ``diffusion_is_zero`` flags problems whose paths are deterministic;
    ``running_state_quad`` / ``terminal_state_quad`` expose the quadratic
    state matrices of the cost forms (used as declared-convexity evidence).
    """

    n: int
    d: int
    k: int
    m: int
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
    config: dict = field(repr=False)
    diffusion_is_zero: bool = False
    running_state_quad: np.ndarray | None = None
    terminal_state_quad: np.ndarray | None = None


def _vector_affine(cfg, n, k, name):
    """b = const + state @ x + control @ a, returning ((t,x,a)->(...,n), Jacobian).

    When the value does not depend on x the function returns an unbatched
    (n,) vector; callers rely on normal numpy broadcasting.
    """
    c = _arr(cfg.get("const", np.zeros(n)), (n,), f"{name}.const")
    A = _arr(cfg.get("state", np.zeros((n, n))), (n, n), f"{name}.state")
    B = _arr(cfg.get("control", np.zeros((n, k))), (n, k), f"{name}.control")
    has_A, has_B = bool(A.any()), bool(B.any())

    def fn(t, x, a):
        out = c + B @ np.asarray(a, dtype=float) if has_B else c
        if has_A:
            out = out + np.asarray(x, dtype=float) @ A.T
        return out

    def jac(t, x, a):
        return np.broadcast_to(A, np.shape(x)[:-1] + (n, n))

    return fn, jac, not (c.any() or has_A or has_B)


def _matmul_columns(A, x):
    # (d, n, n) acting on (..., n) -> (..., n, d)
    return np.einsum("jpq,...q->...pj", A, x)


def _matrix_affine(cfg, n, d, k, name):
    """sigma columns are affine in (x, a); returns ((t,x,a)->(...,n,d), gradient).

    As with the drift form, an x-independent diffusion comes back unbatched
    as (n, d).
    """
    C0 = _arr(cfg.get("const", np.zeros((n, d))), (n, d), f"{name}.const")
    A = _arr(cfg.get("state", np.zeros((d, n, n))), (d, n, n), f"{name}.state")
    B = _arr(cfg.get("control", np.zeros((d, n, k))), (d, n, k), f"{name}.control")
    has_A, has_B = bool(A.any()), bool(B.any())

    def fn(t, x, a):
        out = C0 + np.einsum("jpq,q->pj", B, np.asarray(a, dtype=float)) if has_B else C0
        if has_A:
            out = out + _matmul_columns(A, np.asarray(x, dtype=float))
        return out

    def grad(t, x, a):
        return np.broadcast_to(A, np.shape(x)[:-1] + (d, n, n))

    return fn, grad, not (C0.any() or has_A or has_B)


def _time_affine(cfg, shape, name):
    """G(t) = const + t * slope (slope optional)."""
    c = _arr(cfg.get("const", np.zeros(shape)), shape, f"{name}.const")
    s = _arr(cfg.get("slope", np.zeros(shape)), shape, f"{name}.slope")

    def fn(t):
        return c + t * s

    return fn


def _quadratic_cost(cfg, n, k, name, with_control):
    """h = x'Qx + r.x + c0 + sum_i poly_i(a_i); gradient is (Q+Q')x + r."""
    Q = _arr(cfg.get("state_quad", np.zeros((n, n))), (n, n), f"{name}.state_quad")
    r = _arr(cfg.get("state_lin", np.zeros(n)), (n,), f"{name}.state_lin")
    c0 = float(cfg.get("const", 0.0))
    sym = Q + Q.T
    poly = None
    if with_control:
        raw = cfg.get("control_poly")
        if raw is not None:
            poly = [np.asarray(p, dtype=float) for p in raw]
            if len(poly) != k:
                raise CoefficientError(
                    f"{name}.control_poly: expected {k} coefficient lists, got {len(poly)}"
                )

    def control_part(a):
        if poly is None:
            return 0.0
        a = np.asarray(a, dtype=float)
        total = 0.0
        for i, p in enumerate(poly):
            # p holds coefficients of a_i^0, a_i^1, ...
            total += sum(cj * a[i] ** j for j, cj in enumerate(p))
        return total

    has_Q, has_r = bool(Q.any()), bool(r.any())

    def state_part(x):
        x = np.asarray(x, dtype=float)
        out = np.einsum("...p,pq,...q->...", x, Q, x) if has_Q else np.zeros(x.shape[:-1])
        if has_r:
            out = out + x @ r
        return out + c0

    if with_control:

        def fn(t, x, a):
            return state_part(x) + control_part(a)

        def grad(t, x, a):
            return np.asarray(x, dtype=float) @ sym.T + r

    else:

        def fn(x):
            return state_part(x)

        def grad(x):
            return np.asarray(x, dtype=float) @ sym.T + r

    return fn, grad, Q


_VECTOR_FORMS = ("zero", "affine")
_COST_FORMS = ("zero", "quadratic")


def build_coefficients(config: dict) -> CoefficientSet:
    """Build a CoefficientSet from a JSON-style problem description.

    Parameters
    ----------
    config : dict
        Mapping with keys ``dims`` ({n, d, k, m}) and ``coefficients``
        holding form-tagged entries ``drift``, ``diffusion``,
        ``singular_gain``, ``running_cost``, ``terminal_cost`` and
        ``singular_cost``.  See the README for the field-by-field schema.
    """
    dims = config.get("dims")
    if not dims:
        raise CoefficientError("config missing 'dims'")
    n, d, k, m = (int(dims[key]) for key in ("n", "d", "k", "m"))
    if min(n, d, k, m) <= 0:
        raise CoefficientError(f"dims must be positive, got {dims}")
    coeffs = config.get("coefficients", {})

    def section(name):
        cfg = coeffs.get(name, {"form": "zero"})
        form = cfg.get("form", "zero")
        return cfg, form

    cfg, form = section("drift")
    if form not in _VECTOR_FORMS:
        raise CoefficientError(f"drift: unknown form '{form}'")
    b, b_x, _ = _vector_affine(cfg if form == "affine" else {}, n, k, "drift")

    cfg, form = section("diffusion")
    if form not in _VECTOR_FORMS:
        raise CoefficientError(f"diffusion: unknown form '{form}'")
    sigma, sigma_x, sig_zero = _matrix_affine(
        cfg if form == "affine" else {}, n, d, k, "diffusion"
    )

    cfg, form = section("singular_gain")
    if form not in ("zero", "constant", "time_affine"):
        raise CoefficientError(f"singular_gain: unknown form '{form}'")
    if form == "constant":
        cfg = {"const": cfg["value"]}
    G = _time_affine(cfg if form != "zero" else {}, (n, m), "singular_gain")

    cfg, form = section("running_cost")
    if form not in _COST_FORMS:
        raise CoefficientError(f"running_cost: unknown form '{form}'")
    h, h_x, hQ = _quadratic_cost(cfg if form == "quadratic" else {}, n, k, "running_cost", True)

    cfg, form = section("terminal_cost")
    if form not in _COST_FORMS:
        raise CoefficientError(f"terminal_cost: unknown form '{form}'")
    g, g_x, gQ = _quadratic_cost(cfg if form == "quadratic" else {}, n, k, "terminal_cost", False)

    cfg, form = section("singular_cost")
    if form not in ("zero", "constant", "time_affine"):
        raise CoefficientError(f"singular_cost: unknown form '{form}'")
    if form == "constant":
        cfg = {"const": cfg["value"]}
    k_cost = _time_affine(cfg if form != "zero" else {}, (m,), "singular_cost")

    return CoefficientSet(
        n=n, d=d, k=k, m=m,
        b=b, sigma=sigma, G=G, h=h, g=g, k_cost=k_cost,
        b_x=b_x, sigma_x=sigma_x, h_x=h_x, g_x=g_x,
        config=config,
        diffusion_is_zero=sig_zero,
        running_state_quad=hQ,
        terminal_state_quad=gQ,
    )
