"""LQR terminal ingredients around a set-point and the level of the terminal set.

The terminal cost is ``V_f(z) = (z - zb)' P (z - zb)`` and the local controller
``kappa_f(z) = ub + K (z - zb)`` with ``(P, K)`` from the Riccati equation of the
linearization. The level ``gamma`` is the smallest of the input bound, the chance
bounds and the largest level on which the sampled decrease condition holds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import ContractError
from .gmm import ChanceSpec, chance_params, masked_margins
from .mss_model import MSSModel
from .nlp import NLPConfig, NLPProblem, solve
from .setpoint import Polytope, Setpoint, linearize

log = logging.getLogger(__name__)

EPS_DEFAULT = 1e-3


class DareError(RuntimeError):
    pass


@dataclass
class TerminalDesign:
    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    P: np.ndarray
    eps: float
    gamma: float
    Q: np.ndarray
    R: np.ndarray
    z_bar: np.ndarray
    u_bar: np.ndarray
    checks: dict = field(default_factory=dict)

    def kappa(self, z):
        return self.u_bar + self.K @ (np.asarray(z, float) - self.z_bar)

    def V_f(self, z):
        d = np.asarray(z, float) - self.z_bar
        return float(d @ self.P @ d)

    def contains(self, z) -> bool:
        return self.V_f(z) <= self.gamma

    def to_json(self) -> dict:
        arr = lambda a: np.asarray(a, float).tolist()  # noqa: E731
        return {"A": arr(self.A), "B": arr(self.B), "K": arr(self.K), "P": arr(self.P), "eps": self.eps,
                "gamma": self.gamma, "Q": arr(self.Q), "R": arr(self.R), "z_bar": arr(self.z_bar),
                "u_bar": arr(self.u_bar), "checks": self.checks}

    @classmethod
    def from_json(cls, doc) -> "TerminalDesign":
        a = lambda k: np.asarray(doc[k], float)  # noqa: E731
        return cls(a("A"), a("B"), a("K"), a("P"), doc["eps"], doc["gamma"], a("Q"), a("R"), a("z_bar"),
                   a("u_bar"), doc.get("checks", {}))


# ---------------------------------------------------------------------------
# Riccati


def _riccati(P, A, B, Q, R):
    BtP = B.T @ P
    G = np.linalg.solve(R + BtP @ B, BtP @ A)
    return Q + A.T @ P @ A - A.T @ P @ B @ G


def dare_gain(P, A, B, R):
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def dare_residual(P, A, B, Q, R) -> float:
    return float(np.linalg.norm(P - _riccati(P, A, B, Q, R), "fro"))


def solve_dare(A, B, Q, R, tol: float = 1e-9, max_iter: int = 100_000):
    """Fixed point of the Riccati recursion started from ``P = Q``; returns ``(P, K)``."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    P = Q.copy()
    for it in range(max_iter):
        P_next = _riccati(P, A, B, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)):
            break
        step = np.linalg.norm(P_next - P, "fro")
        P = P_next
        # relative to |P|: float64 cannot resolve an absolute 1e-9 residual when P is large;
        # iterate well past tol, stop early only once the recursion stagnates at rounding level
        scale = max(1.0, float(np.max(np.abs(P))))
        if step <= 1e-3 * tol * scale or (step <= 1e-13 * scale and dare_residual(P, A, B, Q, R) <= tol * scale):
            K = dare_gain(P, A, B, R)
            if np.max(np.abs(np.linalg.eigvals(A + B @ K))) < 1.0:
                return P, K
            break
    K = dare_gain(P, A, B, R) if np.all(np.isfinite(P)) else np.zeros((B.shape[1], A.shape[0]))
    rho = float(np.max(np.abs(np.linalg.eigvals(A + B @ K))))
    raise DareError(f"Riccati iteration did not converge in {max_iter} steps "
                    f"(closed-loop spectral radius estimate {rho:.4f})")


# ---------------------------------------------------------------------------
# level bounds


def gamma_from_inputs(P, K, u_bar, U: Polytope) -> float:
    """Largest level on which ``kappa_f`` stays inside the input polytope (inf if unbounded)."""
    P = np.atleast_2d(P)
    K = np.atleast_2d(K)
    Pinv = np.linalg.inv(P)
    gamma = np.inf
    for a, b in zip(U.H, U.h):
        slack = b - a @ np.atleast_1d(u_bar)
        denom = float(a @ K @ Pinv @ K.T @ a)
        if slack <= 0:
            log.warning("set-point input lies on the boundary of U; input level bound is zero")
            return 0.0
        if denom <= 0:
            continue
        gamma = min(gamma, slack**2 / denom)
    return float(gamma)


def _chance_obj(x, p):
    d = x - p["z_bar"]
    return d @ p["P"] @ d


def _chance_boundary(x, p):
    m = p["model"]
    u = p["u_bar"] + p["K"] @ (x - p["z_bar"])
    margins = masked_margins(m.output_pdf(x, u), p["chance"])
    d = x - p["z_bar"]
    return jnp.stack([-margins[p["side"]], d @ p["P"] @ d - p["gamma_max"]])


@dataclass
class ChanceBound:
    gamma: float
    unbounded: bool
    z: np.ndarray | None = None


@partial(jax.jit, static_argnames="side")
def _ray_margins(m, K, z_bar, u_bar, cp, zs, side):
    us = u_bar + (zs - z_bar) @ K.T
    return jax.vmap(lambda z, u: masked_margins(m.output_pdf(z, u), cp)[side])(zs, us)


def gamma_from_chance(m: MSSModel, P, K, sp: Setpoint, spec: ChanceSpec, gamma_max: float = 10.0,
                      starts: int = 8, seed: int = 0, n_rays: int = 512, n_radii: int = 48,
                      n_bisect: int = 30) -> dict:
    """Level at which each active chance margin first reaches zero under ``kappa_f``.

    The level is ``min V_f(z)`` over points with a nonnegative margin. Since
    that feasible set is the complement of a convex-looking region, a local
    solver started inside slides back to the set-point. The search therefore
    scans ``n_rays`` directions (P-metric unit sphere) on a radial grid up to
    ``V_f = gamma_max``, bisects each first crossing, and polishes the best
    ``starts`` boundary points with the NLP solver from those feasible starts.
    A side with no crossing is reported as unbounded with level ``gamma_max``.
    """
    cp = chance_params(spec, m.n_y)
    g0 = np.asarray(masked_margins(m.output_pdf(sp.z, sp.u), cp))
    if np.any(g0 >= 0):
        raise ContractError("chance margins must be strictly negative at the set-point")
    P = np.atleast_2d(P)
    K = np.atleast_2d(K)
    z_bar = np.asarray(sp.z, float)
    u_bar = np.atleast_1d(np.asarray(sp.u, float))
    Linv_t = np.linalg.inv(np.linalg.cholesky(P)).T  # z = z_bar + Linv_t s has V_f = |s|^2
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_rays, m.n_z))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs @ Linv_t.T
    radii = np.sqrt(gamma_max) * np.arange(1, n_radii + 1) / n_radii
    args = (m, jnp.asarray(K), jnp.asarray(z_bar), jnp.asarray(u_bar), cp)
    out = {}
    for side, name in ((0, "g_min"), (1, "g_max")):
        if cp["active"][side] == 0:
            continue
        pts = z_bar + radii[None, :, None] * dirs[:, None, :]
        g = np.asarray(_ray_margins(*args, jnp.asarray(pts.reshape(-1, m.n_z)), side)).reshape(n_rays, n_radii)
        hit = g >= 0
        rows = np.flatnonzero(hit.any(axis=1))
        if rows.size == 0:
            out[name] = ChanceBound(float(gamma_max), True)
            continue
        first = hit[rows].argmax(axis=1)
        lo = np.where(first > 0, radii[np.maximum(first - 1, 0)], 0.0)
        hi = radii[first]
        d = dirs[rows]
        for _ in range(n_bisect):
            mid = 0.5 * (lo + hi)
            gm = np.asarray(_ray_margins(*args, jnp.asarray(z_bar + mid[:, None] * d), side))
            lo, hi = np.where(gm >= 0, lo, mid), np.where(gm >= 0, mid, hi)
        order = np.argsort(hi)
        best_z = z_bar + hi[order[0]] * d[order[0]]
        best_v = float(hi[order[0]] ** 2)
        params = dict(model=m, P=P, K=K, z_bar=z_bar, u_bar=u_bar, chance=cp, side=side,
                      gamma_max=float(gamma_max))
        prob = NLPProblem(m.n_z, _chance_obj, None, _chance_boundary, None, params)
        for i in order[:starts]:
            sol = solve(prob, z_bar + hi[i] * d[i], NLPConfig(max_outer=30))
            if sol.ineq_violation <= 1e-9 and sol.objective < best_v:
                best_z, best_v = np.asarray(sol.x), float(sol.objective)
        out[name] = ChanceBound(best_v, False, best_z)
    return out


# ---------------------------------------------------------------------------
# sampled decrease check


def sample_ellipsoid(P, center, gamma: float, n: int, rng: np.random.Generator):
    """Uniform samples of ``{(z - c)' P (z - c) <= gamma}``."""
    P = np.atleast_2d(P)
    d = P.shape[0]
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.uniform(size=(n, 1)) ** (1.0 / d)
    L = np.linalg.cholesky(P)
    ball = g * r * np.sqrt(gamma)
    return np.asarray(center, float) + np.linalg.solve(L.T, ball.T).T


@jax.jit
def _decrease_terms(m, P, K, Q, R, z_bar, u_bar, H, h, cp, zs):
    def one(z):
        dz = z - z_bar
        u = u_bar + K @ dz
        du = u - u_bar
        zn = m.step(z, u)
        dn = zn - z_bar
        dec = dn @ P @ dn + dz @ Q @ dz + du @ R @ du - dz @ P @ dz
        inp = jnp.max(H @ u - h)
        cc = jnp.max(masked_margins(m.output_pdf(z, u), cp))
        return dec, inp, cc

    return jax.vmap(one)(zs)


def verify_decrease(m: MSSModel, design: TerminalDesign, sp: Setpoint, Q, R, n_samples: int = 10_000,
                    spec: ChanceSpec | None = None, U: Polytope | None = None, gamma: float | None = None,
                    seed: int = 0, tol: float = 1e-10):
    """Sampled check of the decrease condition and the constraints on the level set.

    Returns ``(passed, worst_violation)``; the worst violation is the largest
    of the three residuals over all samples (nonpositive when passing).
    """
    gamma = design.gamma if gamma is None else gamma
    rng = np.random.default_rng(seed)
    zs = sample_ellipsoid(design.P, sp.z, gamma, n_samples, rng)
    zs = np.vstack([np.asarray(sp.z, float)[None], zs])
    spec = spec or ChanceSpec()
    H = np.zeros((1, m.n_u)) if U is None else U.H
    h = np.ones(1) if U is None else U.h
    dec, inp, cc = _decrease_terms(m, jnp.asarray(design.P), jnp.asarray(np.atleast_2d(design.K)),
                                   jnp.asarray(np.atleast_2d(Q)), jnp.asarray(np.atleast_2d(R)),
                                   jnp.asarray(sp.z), jnp.asarray(np.atleast_1d(sp.u)), jnp.asarray(H),
                                   jnp.asarray(h), chance_params(spec, m.n_y), jnp.asarray(zs))
    worst = float(max(np.max(dec), np.max(inp), np.max(cc)))
    passed = bool(np.max(dec) <= tol and np.max(inp) <= tol and np.max(cc) <= tol)
    return passed, worst


# ---------------------------------------------------------------------------
# indicative analytic level


def indicative_gamma1(m: MSSModel, A, B, K, P, sp: Setpoint, eps: float, radius: float = 0.5,
                      n_samples: int = 2000, seed: int = 0) -> dict:
    """Lipschitz-style level with the remainder constant ``T`` estimated by sampling.

    ``T`` bounds ``||f(z, kappa_f(z)) - zb - (A + B K) dz|| / ((1 + ||K||^2) ||dz||^2)``
    over a ball of the given radius. The result is reported, never used as the level.
    """
    rng = np.random.default_rng(seed)
    K = np.atleast_2d(K)
    Acl = A + B @ K
    dz = rng.standard_normal((n_samples, m.n_z))
    dz *= (radius * rng.uniform(size=(n_samples, 1)) ** (1 / m.n_z)) / np.linalg.norm(dz, axis=1, keepdims=True)
    zs = sp.z + dz
    us = sp.u + dz @ K.T
    fz = np.asarray(m.step(jnp.asarray(zs), jnp.asarray(us)))
    err = np.linalg.norm(fz - sp.z - dz @ Acl.T, axis=1)
    kn = np.linalg.norm(K, 2)
    T = float(np.max(err / ((1 + kn**2) * np.sum(dz**2, axis=1))))
    lam_ak = float(np.max(np.linalg.eigvalsh(Acl.T @ P @ Acl)))
    ev = np.linalg.eigvalsh(P)
    c_f = (np.sqrt(lam_ak + eps) - np.sqrt(lam_ak)) / np.sqrt(ev[-1])
    gamma1 = float(ev[0] * c_f**2 / (T**2 * (1 + kn**2) ** 2)) if T > 0 else float("inf")
    return {"T": T, "c_f": float(c_f), "gamma1": gamma1}


# ---------------------------------------------------------------------------
# pipeline


def design(m: MSSModel, sp: Setpoint, Q, R, spec: ChanceSpec, U: Polytope, eps: float = EPS_DEFAULT,
           n_samples: int = 10_000, gamma_max: float = 10.0, max_halvings: int = 40, seed: int = 0):
    """Full terminal design: linearize, Riccati, level bounds, then halve until the samples pass."""
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    A, B = linearize(m, sp.z, sp.u)
    Qe = Q + eps * np.eye(Q.shape[0])
    P, K = solve_dare(A, B, Qe, R)
    rho = float(np.max(np.abs(np.linalg.eigvals(A + B @ K))))
    checks = {"dare_residual": dare_residual(P, A, B, Qe, R), "spectral_radius": rho}
    g_u = gamma_from_inputs(P, K, sp.u, U)
    chance = gamma_from_chance(m, P, K, sp, spec, gamma_max=gamma_max, seed=seed)
    checks["gamma_u"] = g_u if np.isfinite(g_u) else None
    for name, cb in chance.items():
        checks[f"gamma_{name}"] = cb.gamma
        checks[f"{name}_unbounded"] = cb.unbounded
    candidates = [g_u, gamma_max] + [cb.gamma for cb in chance.values()]
    gamma = float(min(candidates))
    checks["gamma_candidate"] = gamma
    checks["indicative"] = indicative_gamma1(m, A, B, K, P, sp, eps)
    td = TerminalDesign(A, B, K, P, eps, gamma, Q, R, np.asarray(sp.z, float), np.atleast_1d(sp.u), checks)
    trail = []
    for _ in range(max_halvings + 1):
        ok, worst = verify_decrease(m, td, sp, Q, R, n_samples, spec, U, gamma=gamma, seed=seed)
        trail.append({"gamma": gamma, "passed": ok, "worst": worst})
        if ok:
            break
        gamma *= 0.5
    else:
        checks["trail"] = trail
        raise ContractError(f"sampled decrease condition failed after {max_halvings} halvings")
    checks["trail"] = trail
    td.gamma = gamma
    return td
