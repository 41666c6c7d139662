"""Equilibrium set-points of an MSS model matching a reference output pdf or mean.

The search variable is ``(z, u)``. The equilibrium ``f(z, u) = z`` is a hard
equality, chance margins and the input polytope are inequalities, and the
objective is either a frozen-sample KL estimate or a moment error.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy import stats

from .diffnet import ContractError, jacobian_wrt_input
from .gmm import (LOG_DENSITY_FLOOR, ChanceSpec, DiagGMM, chance_params, log_pdf, masked_margins,
                  moments, sample)
from .mss_model import MSSModel
from .nlp import NLPConfig, NLPProblem, solve

DEFAULT_STARTS = 16
DEFAULT_M = 500
RELAX_STEPS = 200


class InfeasibleError(RuntimeError):
    """No start produced a point meeting all constraints."""

    def __init__(self, message, margins=None):
        super().__init__(message)
        self.margins = None if margins is None else np.asarray(margins, dtype=float)


@dataclass(frozen=True)
class Polytope:
    """Input set ``{u : H u - h <= 0}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        object.__setattr__(self, "h", np.atleast_1d(np.asarray(self.h, dtype=float)))
        if self.H.shape[0] != self.h.shape[0]:
            raise ContractError("H and h row counts differ")

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo, hi = np.atleast_1d(np.asarray(lo, float)), np.atleast_1d(np.asarray(hi, float))
        n = lo.size
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([hi, -lo]))

    @property
    def n_u(self) -> int:
        return int(self.H.shape[1])

    def residual(self, u):
        return self.H @ np.atleast_1d(u) - self.h

    def contains(self, u, tol: float = 1e-8) -> bool:
        return bool(np.all(self.residual(u) <= tol))

    def bounding_box(self):
        """Box bounds implied by axis-aligned rows (infinite where none)."""
        lo = np.full(self.n_u, -np.inf)
        hi = np.full(self.n_u, np.inf)
        for row, b in zip(self.H, self.h):
            nz = np.flatnonzero(row)
            if nz.size == 1:
                i = nz[0]
                if row[i] > 0:
                    hi[i] = min(hi[i], b / row[i])
                else:
                    lo[i] = max(lo[i], b / row[i])
        return lo, hi

    def project(self, u):
        """Clamp into the bounding box (exact for boxes)."""
        lo, hi = self.bounding_box()
        return np.clip(np.atleast_1d(np.asarray(u, float)), lo, hi)

    def midpoint(self):
        lo, hi = self.bounding_box()
        return 0.5 * (lo + hi)

    def to_json(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_json(cls, doc) -> "Polytope":
        return cls(doc["H"], doc["h"])


# ---------------------------------------------------------------------------
# references


def _seed_from(doc) -> int:
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ReferencePdf:
    """Scalar reference density with a frozen Monte-Carlo sample set.

    ``kind`` is ``"gmm"`` (``weights``, ``means``, ``stds``), ``"gamma"``
    (``shape``, ``scale``) or ``"beta"`` (``a``, ``b``, ``loc``, ``scale``).
    Samples are drawn once at construction; the default seed is a hash of the
    definition, so equal references always carry equal samples.
    """

    kind: str
    params: dict
    M: int = DEFAULT_M
    seed: int | None = None
    samples: np.ndarray = field(init=False, repr=False)
    log_p: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in ("gmm", "gamma", "beta"):
            raise ContractError(f"unknown reference kind {self.kind!r}")
        if self.M < 1:
            raise ContractError("M must be positive")
        if self.seed is None:
            self.seed = _seed_from({"kind": self.kind, "params": self.params, "M": self.M})
        rng = np.random.default_rng(self.seed)
        if self.kind == "gmm":
            g = self.gmm()
            g.check()
            self.samples = sample(g, self.M, rng)
        else:
            self.samples = self._dist().rvs(size=self.M, random_state=rng).reshape(-1, 1)
        self.samples.setflags(write=False)
        self.log_p = np.asarray(self.log_density(self.samples), dtype=float)
        self.log_p.setflags(write=False)

    def gmm(self) -> DiagGMM:
        if self.kind != "gmm":
            raise ContractError("not a mixture reference")
        w = np.asarray(self.params["weights"], float)
        return DiagGMM(w / w.sum(), np.asarray(self.params["means"], float).reshape(-1, 1),
                       np.asarray(self.params["stds"], float).reshape(-1, 1))

    def _dist(self):
        p = self.params
        if self.kind == "gamma":
            return stats.gamma(p["shape"], loc=p.get("loc", 0.0), scale=p["scale"])
        return stats.beta(p["a"], p["b"], loc=p.get("loc", 0.0), scale=p.get("scale", 1.0))

    def log_density(self, y):
        y = np.asarray(y, dtype=float).reshape(-1, 1)
        if self.kind == "gmm":
            return np.asarray(log_pdf(self.gmm(), y))
        return self._dist().logpdf(y[:, 0])

    def mean(self) -> float:
        if self.kind == "gmm":
            return float(np.asarray(moments(self.gmm())[0])[0])
        return float(self._dist().mean())

    def to_json(self, with_samples: bool = True) -> dict:
        doc = {"kind": self.kind, "params": self.params, "M": self.M, "seed": int(self.seed)}
        if with_samples:
            doc["samples"] = self.samples[:, 0].tolist()
        return doc

    @classmethod
    def from_json(cls, doc) -> "ReferencePdf":
        return cls(doc["kind"], doc["params"], doc.get("M", DEFAULT_M), doc.get("seed"))


def gmm_reference(weights, means, stds, M: int = DEFAULT_M, seed=None) -> ReferencePdf:
    return ReferencePdf("gmm", {"weights": list(map(float, weights)), "means": list(map(float, means)),
                                "stds": list(map(float, stds))}, M, seed)


# ---------------------------------------------------------------------------
# set-points


@dataclass
class Setpoint:
    z: np.ndarray
    u: np.ndarray
    residual: float
    cost: float
    controllable: bool = False
    rank: int = 0
    margins: np.ndarray = field(default_factory=lambda: np.zeros(2))
    mode: str = "pdf"
    reference: dict | None = None
    start_index: int = -1

    @property
    def kl_or_mean_cost(self) -> float:
        return self.cost

    def to_json(self) -> dict:
        return {"z": np.asarray(self.z).tolist(), "u": np.asarray(self.u).tolist(), "residual": self.residual,
                "cost": self.cost, "controllable": bool(self.controllable), "rank": int(self.rank),
                "margins": np.asarray(self.margins).tolist(), "mode": self.mode, "reference": self.reference,
                "start_index": self.start_index}

    @classmethod
    def from_json(cls, doc) -> "Setpoint":
        return cls(np.asarray(doc["z"], float), np.asarray(doc["u"], float), doc["residual"], doc["cost"],
                   doc.get("controllable", False), doc.get("rank", 0), np.asarray(doc.get("margins", [0, 0])),
                   doc.get("mode", "pdf"), doc.get("reference"), doc.get("start_index", -1))


@dataclass(frozen=True)
class Exclusion:
    """Ball ``||(z, u) - center|| < radius`` removed from the next search."""

    center: np.ndarray
    radius: float


def exclude_and_retry(prev: Setpoint, radius: float = 0.5) -> Exclusion:
    return Exclusion(np.concatenate([np.asarray(prev.z, float), np.asarray(prev.u, float)]), float(radius))


def _split(x, n_z):
    return x[:n_z], x[n_z:]


def _kl_objective(x, p):
    m = p["model"]
    z, u = _split(x, m.n_z)
    g = m.output_pdf(z, u)
    lq = log_pdf(g, p["samples"])
    return jnp.mean(p["log_p"] - jnp.maximum(lq, LOG_DENSITY_FLOOR))


def _mean_objective(x, p):
    m = p["model"]
    z, u = _split(x, m.n_z)
    mean, cov = moments(m.output_pdf(z, u))
    return jnp.sum((p["y_ref"] - mean) ** 2) + p["beta"] * jnp.sum(jnp.diag(cov) ** 2)


def _equilibrium(x, p):
    m = p["model"]
    z, u = _split(x, m.n_z)
    return m.step(z, u) - z


def _inequalities(x, p):
    m = p["model"]
    z, u = _split(x, m.n_z)
    g = m.output_pdf(z, u)
    parts = [masked_margins(g, p["chance"]), p["H"] @ u - p["h"]]
    d = x[None, :] - p["excl_c"]
    parts.append(p["excl_r"] ** 2 - jnp.sum(d * d, axis=1))
    return jnp.concatenate(parts)


@partial(jax.jit, static_argnames="n_steps")
def _relax(m: MSSModel, z, u, n_steps: int):
    return jax.lax.fori_loop(0, n_steps, lambda _, zz: m.step(zz, u), z)


def _starts(m: MSSModel, U: Polytope, starts: int, seed: int, relax_steps: int = RELAX_STEPS):
    """Random (z, u) starts; each z is then pushed ``relax_steps`` model steps under its own u.

    Relaxation moves the start next to the equilibrium branch of that input,
    so the local solver is not dominated by whichever basin contains the
    training meta-state mean.
    """
    rng = np.random.default_rng(seed)
    zm = np.zeros(m.n_z) if m.z_mean is None else np.asarray(m.z_mean)
    zs = np.ones(m.n_z) if m.z_std is None else np.asarray(m.z_std)
    lo, hi = U.bounding_box()
    lo_f = np.where(np.isfinite(lo), lo, -1.0)
    hi_f = np.where(np.isfinite(hi), hi, 1.0)
    for i in range(starts):
        z = zm + zs * rng.standard_normal(m.n_z)
        u = rng.uniform(lo_f, hi_f)
        if relax_steps > 0:
            z_rel = np.asarray(_relax(m, jnp.asarray(z), jnp.asarray(u), relax_steps))
            z = z_rel if np.all(np.isfinite(z_rel)) else z
        yield i, np.concatenate([z, u])


def _search(m: MSSModel, objective, extra: dict, spec: ChanceSpec, U: Polytope, starts: int, exclude,
            seed: int, mode: str, reference, cfg: NLPConfig):
    if U.n_u != m.n_u:
        raise ContractError("input polytope dimension does not match the model")
    excl = list(exclude or [])
    excl = [e for e in excl if e.radius > 0]
    dim = m.n_z + m.n_u
    params = dict(extra, model=m, chance=chance_params(spec, m.n_y), H=U.H, h=U.h,
                  excl_c=np.array([e.center for e in excl]).reshape(-1, dim),
                  excl_r=np.array([e.radius for e in excl], dtype=float))
    lo, hi = U.bounding_box()
    bounds = (np.concatenate([np.full(m.n_z, -np.inf), lo]), np.concatenate([np.full(m.n_z, np.inf), hi]))
    prob = NLPProblem(dim, objective, _equilibrium, _inequalities, bounds, params)
    best, best_violation = None, None
    for i, x0 in _starts(m, U, starts, seed):
        sol = solve(prob, x0, cfg)
        viol = max(sol.eq_residual, sol.ineq_violation)
        feasible = sol.eq_residual <= 1e-6 and sol.ineq_violation <= 1e-8
        if feasible and (best is None or sol.objective < best[1].objective - 1e-12):
            best = (i, sol)
        if best_violation is None or viol < best_violation[0]:
            best_violation = (viol, sol)
    if best is None:
        x = best_violation[1].x
        margins = np.asarray(_inequalities(jnp.asarray(x), params))
        raise InfeasibleError(f"no feasible set-point from {starts} starts "
                              f"(smallest violation {best_violation[0]:.3g})", margins)
    i, sol = best
    z, u = _split(sol.x, m.n_z)
    z, residual = polish_equilibrium(m, np.asarray(z), np.asarray(u), sol.eq_residual)
    if np.max(np.asarray(_inequalities(jnp.concatenate([jnp.asarray(z), jnp.asarray(u)]), params))) > 1e-8:
        z, residual = _split(sol.x, m.n_z)[0], sol.eq_residual
    g = m.output_pdf(z, u)
    sp = Setpoint(z=np.asarray(z), u=np.asarray(u), residual=residual, cost=float(objective(jnp.concatenate([jnp.asarray(z), jnp.asarray(u)]), params)),
                  margins=np.asarray(masked_margins(g, params["chance"])), mode=mode, reference=reference,
                  start_index=i)
    sp.controllable, sp.rank = check_controllability(m, sp)
    return sp


def polish_equilibrium(m: MSSModel, z, u, residual: float, iters: int = 5):
    """Newton steps on ``f(z, u) - z = 0`` at fixed ``u``; keeps the best iterate.

    The constrained solver stops at its equality tolerance; the terminal
    decrease check near the set-point is sensitive to that residual, so the
    equilibrium is refined to machine precision where the Jacobian allows.
    """
    uj = jnp.asarray(u)
    F = lambda zz: m.step(zz, uj) - zz  # noqa: E731
    best_z, best_r = np.asarray(z, float), float(residual)
    zk = best_z
    for _ in range(iters):
        J = np.asarray(jax.jacfwd(F)(jnp.asarray(zk)))
        try:
            zk = zk - np.linalg.solve(J, np.asarray(F(jnp.asarray(zk))))
        except np.linalg.LinAlgError:
            break
        r = float(np.max(np.abs(np.asarray(F(jnp.asarray(zk))))))
        if not np.isfinite(r):
            break
        if r < best_r:
            best_z, best_r = zk.copy(), r
    return best_z, best_r


def find_setpoint_pdf(m: MSSModel, ref: ReferencePdf, spec: ChanceSpec, U: Polytope,
                      starts: int = DEFAULT_STARTS, exclude=None, seed: int = 0,
                      cfg: NLPConfig = NLPConfig(max_outer=60)) -> Setpoint:
    """Equilibrium whose output pdf minimizes the frozen-sample KL to ``ref``."""
    if ref.M < 100:
        raise ContractError("KL set-point search needs at least 100 reference samples")
    extra = {"samples": jnp.asarray(ref.samples), "log_p": jnp.asarray(ref.log_p)}
    return _search(m, _kl_objective, extra, spec, U, starts, exclude, seed, "pdf", ref.to_json(), cfg)


def find_setpoint_mean(m: MSSModel, y_ref, beta: float, spec: ChanceSpec, U: Polytope,
                       starts: int = DEFAULT_STARTS, exclude=None, seed: int = 0,
                       cfg: NLPConfig = NLPConfig(max_outer=60)) -> Setpoint:
    """Equilibrium minimizing ``||y_ref - E y||^2 + beta ||Var y||^2``."""
    if beta < 0:
        raise ContractError("beta must be nonnegative")
    y_ref = np.atleast_1d(np.asarray(y_ref, dtype=float))
    extra = {"y_ref": y_ref, "beta": float(beta)}
    return _search(m, _mean_objective, extra, spec, U, starts, exclude, seed, "mean",
                   {"y_ref": y_ref.tolist(), "beta": beta}, cfg)


def linearize(m: MSSModel, z, u):
    """``A = df/dz`` and ``B = df/du`` at ``(z, u)``."""
    z = np.asarray(z, float)
    u = np.atleast_1d(np.asarray(u, float))
    A = jacobian_wrt_input(lambda zz: m.step(zz, u), z)
    B = jacobian_wrt_input(lambda uu: m.step(z, uu), u)
    return A, B


def controllability_rank(A, B, tol: float = 1e-8) -> int:
    A = np.atleast_2d(A)
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    blocks, M = [], B
    for _ in range(A.shape[0]):
        blocks.append(M)
        M = A @ M
    C = np.hstack(blocks)
    s = np.linalg.svd(C, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def check_controllability(m: MSSModel, s: Setpoint, tol: float = 1e-8):
    """Rank of the controllability matrix of the linearization at the set-point."""
    A, B = linearize(m, s.z, s.u)
    rank = controllability_rank(A, B, tol)
    return rank == m.n_z, rank
