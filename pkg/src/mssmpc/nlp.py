"""Smooth constrained optimization by an augmented Lagrangian.

Problems are written as ``f(x, p)``, ``c_eq(x, p) = 0`` and ``c_in(x, p) <= 0``
where ``p`` is any pytree of problem data. Callables are traced once per
function identity, so a controller that rebuilds its problem every step with
new ``p`` reuses the compiled code.

Inequalities enter through squared-hinge terms, multipliers are projected to
be nonnegative, and box bounds are kept by the inner L-BFGS-B minimizer.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import minimize

from .diffnet import ContractError, NumericError


@dataclass
class NLPProblem:
    dim: int
    objective: Callable
    eq_cons: Optional[Callable] = None
    ineq_cons: Optional[Callable] = None
    bounds: Optional[tuple] = None
    params: Any = None

    def lower_upper(self):
        if self.bounds is None:
            return np.full(self.dim, -np.inf), np.full(self.dim, np.inf)
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (self.dim,)).copy() for b in self.bounds)
        return lo, hi


@dataclass(frozen=True)
class NLPConfig:
    tol: float = 1e-7
    feas_tol: float = 1e-8
    max_outer: int = 40
    max_inner: int = 400
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e10
    trace_path: Optional[str] = None


@dataclass
class NLPSolution:
    x: np.ndarray
    objective: float
    eq_residual: float
    ineq_violation: float
    status: str
    iterations: int
    kkt_norm: float
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: float = 0.0
    trace: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _zero_cons(x, p):
    return jnp.zeros(0)


@functools.lru_cache(maxsize=256)
def _compiled(objective, eq_cons, ineq_cons):
    eq = eq_cons or _zero_cons
    ineq = ineq_cons or _zero_cons

    def ceq(x, p):
        return jnp.atleast_1d(eq(x, p))

    def cin(x, p):
        return jnp.atleast_1d(ineq(x, p))

    def aug(x, p, lam, nu, mu):
        c = ceq(x, p)
        h = cin(x, p)
        hinge = jnp.maximum(0.0, nu + mu * h)
        return (objective(x, p) + jnp.dot(lam, c) + 0.5 * mu * jnp.dot(c, c)
                + 0.5 / mu * (jnp.dot(hinge, hinge) - jnp.dot(nu, nu)))

    def lagr(x, p, lam, nu):
        return objective(x, p) + jnp.dot(lam, ceq(x, p)) + jnp.dot(nu, cin(x, p))

    def evaluate(x, p):
        return objective(x, p), ceq(x, p), cin(x, p)

    return (jax.jit(jax.value_and_grad(aug)), jax.jit(jax.grad(lagr)), jax.jit(evaluate))


def _violations(c, h):
    eq_res = float(np.max(np.abs(c))) if c.size else 0.0
    in_viol = float(np.max(np.maximum(h, 0.0))) if h.size else 0.0
    return eq_res, in_viol


def solve(p: NLPProblem, x0, cfg: NLPConfig = NLPConfig(), warm: NLPSolution | None = None) -> NLPSolution:
    """Augmented-Lagrangian solve from ``x0``.

    ``warm`` passes the multipliers and penalty of a related earlier solve
    (e.g. the previous receding-horizon step); they are used when the
    constraint counts match.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    if x.size != p.dim:
        raise ContractError(f"x0 has length {x.size}, problem dimension is {p.dim}")
    if not np.all(np.isfinite(x)):
        raise ContractError("x0 must be finite")
    vg, lag_grad, evaluate = _compiled(p.objective, p.eq_cons, p.ineq_cons)
    lo, hi = p.lower_upper()
    x = np.clip(x, lo, hi)
    params = p.params
    f0, c0, h0 = (np.asarray(a) for a in evaluate(x, params))
    if not np.isfinite(f0):
        raise NumericError("objective is not finite at the initial point")
    lam = np.zeros(c0.size)
    nu = np.zeros(h0.size)
    mu = cfg.mu0
    if warm is not None and warm.lam.size == c0.size and warm.nu.size == h0.size and warm.mu > 0:
        if np.all(np.isfinite(warm.lam)) and np.all(np.isfinite(warm.nu)):
            lam, nu, mu = warm.lam.copy(), warm.nu.copy(), min(float(warm.mu), cfg.mu_max)
    bounds = list(zip(np.where(np.isfinite(lo), lo, None), np.where(np.isfinite(hi), hi, None)))
    trace = []
    status = "max_iter"
    prev_viol = np.inf
    best = None
    kkt = np.inf

    for outer in range(1, cfg.max_outer + 1):
        args = (params, jnp.asarray(lam), jnp.asarray(nu), mu)

        def fun(xx):
            v, g = vg(jnp.asarray(xx), *args)
            v = float(v)
            if not np.isfinite(v):
                return 1e20, np.zeros_like(xx)
            return v, np.asarray(g)

        res = minimize(fun, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": cfg.max_inner, "ftol": 1e-15, "gtol": cfg.tol * 0.1, "maxcor": 20})
        x = np.clip(res.x, lo, hi)
        f, c, h = (np.asarray(a) for a in evaluate(x, params))
        eq_res, in_viol = _violations(c, h)
        viol = max(eq_res, in_viol)
        # first-order multiplier updates
        lam = lam + mu * c
        nu = np.maximum(0.0, nu + mu * h)
        g = np.asarray(lag_grad(jnp.asarray(x), params, jnp.asarray(lam), jnp.asarray(nu)))
        kkt = float(np.max(np.abs(x - np.clip(x - g, lo, hi)))) if x.size else 0.0
        comp = float(np.max(np.abs(nu * np.minimum(h, 0.0)))) if h.size else 0.0
        trace.append(dict(outer=outer, objective=float(f), eq_residual=eq_res, ineq_violation=in_viol,
                          kkt_norm=kkt, mu=mu, inner_iters=int(res.nit)))
        if np.isfinite(f) and (best is None or viol < best[1] - 1e-15 or (viol <= cfg.feas_tol and f < best[2])):
            best = (x.copy(), viol, float(f))
        scale = max(1.0, abs(float(f))) if np.isfinite(f) else 1.0
        if viol <= cfg.feas_tol and kkt <= cfg.tol * scale and comp <= cfg.tol * scale:
            status = "optimal"
            break
        if viol > 0.25 * prev_viol and viol > cfg.feas_tol:
            mu = min(mu * cfg.mu_growth, cfg.mu_max)
        prev_viol = viol

    if status != "optimal" and best is not None and best[1] < max_violation_of(x, evaluate, params):
        x = best[0]
    f, c, h = (np.asarray(a) for a in evaluate(x, params))
    eq_res, in_viol = _violations(c, h)
    if status != "optimal" and max(eq_res, in_viol) > 1e-4:
        status = "infeasible_estimate"
    if cfg.trace_path:
        write_trace(cfg.trace_path, trace)
    return NLPSolution(x=x, objective=float(f), eq_residual=eq_res, ineq_violation=in_viol, status=status,
                       iterations=len(trace), kkt_norm=kkt, lam=lam, nu=nu, mu=mu, trace=trace)


def max_violation_of(x, evaluate, params) -> float:
    _, c, h = (np.asarray(a) for a in evaluate(x, params))
    return max(_violations(c, h))


def write_trace(path, trace) -> None:
    if not trace:
        return
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(trace[0]))
        wr.writeheader()
        wr.writerows(trace)


@dataclass(frozen=True)
class OCPLayout:
    """Decision-vector layout of a single-shooting OCP: ``N`` stages of ``n_u``
    inputs followed by ``n_extra`` trailing variables (e.g. an artificial reference)."""

    N: int
    n_u: int
    n_extra: int = 0

    @property
    def dim(self) -> int:
        return self.N * self.n_u + self.n_extra


def warm_start_shift(prev, layout: OCPLayout, fill=None) -> np.ndarray:
    """Drop the first stage and append ``fill`` (default: repeat the last stage)."""
    x = np.asarray(prev.x if isinstance(prev, NLPSolution) else prev, dtype=float).ravel()
    if x.size != layout.dim:
        raise ContractError(f"previous solution has length {x.size}, layout needs {layout.dim}")
    nu = layout.n_u
    u = x[: layout.N * nu].reshape(layout.N, nu)
    extra = x[layout.N * nu:]
    last = u[-1] if fill is None else np.broadcast_to(np.asarray(fill, dtype=float), (nu,))
    shifted = np.vstack([u[1:], last[None]])
    return np.concatenate([shifted.ravel(), extra])


def evaluate(p: NLPProblem, x):
    """Objective, equality residuals and inequality values at ``x``."""
    _, _, ev = _compiled(p.objective, p.eq_cons, p.ineq_cons)
    f, c, h = ev(jnp.asarray(np.asarray(x, dtype=float)), p.params)
    return float(f), np.asarray(c), np.asarray(h)


def is_feasible(p: NLPProblem, x, feas_tol: float = 1e-8) -> bool:
    lo, hi = p.lower_upper()
    x = np.asarray(x, dtype=float)
    if np.any(x < lo - feas_tol) or np.any(x > hi + feas_tol):
        return False
    _, c, h = evaluate(p, x)
    return max(_violations(c, h)) <= feas_tol
