"""Receding-horizon controllers on the MSS model.

Both controllers use single shooting: the decision vector holds the input
sequence (plus the artificial reference for tracking) and meta-states are
eliminated by rolling out the transition map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import ContractError
from .gmm import LOG_DENSITY_FLOOR, ChanceSpec, DiagGMM, chance_params, log_pdf, masked_margins, moments
from .mss_model import MSSModel
from .nlp import NLPConfig, NLPProblem, NLPSolution, OCPLayout, evaluate, is_feasible, solve, warm_start_shift
from .setpoint import Polytope, ReferencePdf, Setpoint
from .terminal import TerminalDesign

MPC_NLP = NLPConfig(tol=1e-6, feas_tol=1e-8, max_outer=25, max_inner=300)
CAP_NLP = NLPConfig(tol=1e-6, feas_tol=1e-8, max_outer=6, max_inner=300)
UNCAPPED = 1e12  # finite stand-in for an absent cost cap


@dataclass
class MPCStep:
    u_applied: np.ndarray
    u_seq: np.ndarray
    z0: np.ndarray
    z_pred: np.ndarray
    J: float
    status: str
    solve_time: float
    margins: np.ndarray
    fallback: bool = False
    used_candidate: bool = False
    r_star: np.ndarray | None = None
    offset: float | None = None
    iterations: int = 0

    def pdf_pred(self, m: MSSModel) -> DiagGMM:
        return m.rollout(self.z0, self.u_seq)[1]


# ---------------------------------------------------------------------------
# shared traced pieces


def _rollout_states(m, z0, us):
    def body(z, u):
        return m.step(z, u), z

    z_last, zs = jax.lax.scan(body, z0, us)
    return zs, z_last


def _stage_margins(m, zs, us, cp):
    return jax.vmap(lambda z, u: masked_margins(m.output_pdf(z, u), cp))(zs, us)


# ---------------------------------------------------------------------------
# set-point controller


def _sp_parts(x, p):
    m = p["model"]
    us = x.reshape(-1, m.n_u)
    zs, z_n = _rollout_states(m, p["z0"], us)
    return m, us, zs, z_n


def _sp_stage_cost(zs, us, p):
    dz = zs - p["z_bar"]
    du = us - p["u_bar"]
    return jnp.sum(jnp.einsum("ki,ij,kj->k", dz, p["Q"], dz) + jnp.einsum("ki,ij,kj->k", du, p["R"], du))


def _sp_objective(x, p):
    m, us, zs, z_n = _sp_parts(x, p)
    d = z_n - p["z_bar"]
    return _sp_stage_cost(zs, us, p) + d @ p["P"] @ d


def _sp_ineq(x, p):
    m, us, zs, z_n = _sp_parts(x, p)
    d = z_n - p["z_bar"]
    poly = us @ p["H"].T - p["h"]
    return jnp.concatenate([_stage_margins(m, zs, us, p["chance"]).ravel(), poly.ravel(),
                            jnp.atleast_1d(p["term_w"] * (d @ p["P"] @ d - p["gamma"]))])


def _sp_eq(x, p):
    m, us, zs, z_n = _sp_parts(x, p)
    return p["eq_w"] * (z_n - p["z_bar"])


@dataclass
class SetpointMPC:
    model: MSSModel
    setpoint: Setpoint
    terminal: TerminalDesign
    N: int
    Q: np.ndarray
    R: np.ndarray
    spec: ChanceSpec
    U: Polytope
    terminal_equality: bool = False
    nlp: NLPConfig = MPC_NLP
    warm: np.ndarray | None = field(default=None, repr=False)
    warm_sol: NLPSolution | None = field(default=None, repr=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, float))
        self.R = np.atleast_2d(np.asarray(self.R, float))
        if self.N < 1:
            raise ContractError("horizon must be >= 1")
        for M, name in ((self.Q, "Q"), (self.R, "R")):
            if not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) <= 0:
                raise ContractError(f"{name} must be symmetric positive definite")
        if not np.allclose(self.terminal.z_bar, self.setpoint.z):
            raise ContractError("terminal design belongs to a different set-point")
        self.layout = OCPLayout(self.N, self.model.n_u)

    @property
    def z_bar(self):
        return np.asarray(self.setpoint.z, float)

    @property
    def u_bar(self):
        return np.atleast_1d(np.asarray(self.setpoint.u, float))

    def kappa_f(self, z):
        return self.U.project(self.terminal.kappa(z))

    def problem(self, z0) -> NLPProblem:
        m = self.model
        lo, hi = self.U.bounding_box()
        params = dict(model=m, z0=jnp.asarray(z0, dtype=jnp.float64), z_bar=self.z_bar, u_bar=self.u_bar,
                      Q=self.Q, R=self.R, P=self.terminal.P, gamma=float(self.terminal.gamma),
                      chance=chance_params(self.spec, m.n_y), H=self.U.H, h=self.U.h,
                      term_w=0.0 if self.terminal_equality else 1.0,
                      eq_w=1.0 if self.terminal_equality else 0.0)
        return NLPProblem(self.layout.dim, _sp_objective, _sp_eq if self.terminal_equality else None, _sp_ineq,
                          (np.tile(lo, self.N), np.tile(hi, self.N)), params)

    def stage_cost(self, z, u) -> float:
        dz = np.asarray(z, float) - self.z_bar
        du = np.atleast_1d(u) - self.u_bar
        return float(dz @ self.Q @ dz + du @ self.R @ du)

    def candidate(self, z0) -> np.ndarray:
        """Shifted previous solution completed by the terminal controller."""
        if self.warm is None:
            return np.tile(self.u_bar, self.N)
        prev_u = self.warm.reshape(self.N, -1)
        z = np.asarray(z0, float)
        for u in prev_u[1:]:
            z = np.asarray(self.model.step(z, u))
        return warm_start_shift(self.warm, self.layout, fill=self.kappa_f(z))

    def reset(self):
        self.warm = None
        self.warm_sol = None


def ocp_setpoint(c: SetpointMPC, z0, x0=None) -> MPCStep:
    """Solve the set-point OCP from meta-state ``z0`` and return the first input."""
    z0 = np.asarray(z0, dtype=float)
    if not np.all(np.isfinite(z0)):
        raise ContractError("initial meta-state must be finite")
    t0 = time.perf_counter()
    prob = c.problem(z0)
    cand = c.candidate(z0) if x0 is None else np.asarray(x0, float)
    sol = solve(prob, cand, c.nlp, warm=c.warm_sol if x0 is None and c.warm is not None else None)
    x, status, J, used_cand = sol.x, sol.status, sol.objective, False
    # keep the shifted candidate if it is feasible and the solver did no better
    if is_feasible(prob, cand):
        f_c = evaluate(prob, cand)[0]
        if status != "optimal" or f_c < J - 1e-12:
            x, J, status, used_cand = cand, f_c, "optimal" if status == "optimal" else "candidate", True
    feasible = status in ("optimal", "candidate") or is_feasible(prob, x)
    us = x.reshape(c.N, -1)
    zs = np.asarray(c.model.rollout(z0, us)[0])
    margins = np.asarray(_stage_margins(c.model, jnp.asarray(zs[:-1]), jnp.asarray(us),
                                        chance_params(c.spec, c.model.n_y)))
    if feasible:
        u_apply = c.U.project(us[0])
        c.warm = x.copy()
        c.warm_sol = sol if sol.status == "optimal" else None
        fb = False
    else:
        u_apply = c.kappa_f(z0)
        c.warm = None
        c.warm_sol = None
        fb = True
        status = "fallback"
    return MPCStep(u_applied=u_apply, u_seq=us, z0=z0, z_pred=zs, J=float(J), status=status,
                   solve_time=time.perf_counter() - t0, margins=margins, fallback=fb, used_candidate=used_cand,
                   iterations=sol.iterations)


def control(c: SetpointMPC, u_hist, y_hist) -> MPCStep:
    """Encode the measured history, then solve the set-point OCP."""
    z0 = np.asarray(c.model.encode(u_hist, y_hist))
    return ocp_setpoint(c, z0)


# ---------------------------------------------------------------------------
# tracking controller


def _tr_parts(x, p):
    m = p["model"]
    N = p["H_stages"].shape[0]
    nu = m.n_u
    us = x[: N * nu].reshape(N, nu)
    z_r = x[N * nu: N * nu + m.n_z]
    u_r = x[N * nu + m.n_z:]
    zs, _ = _rollout_states(m, p["z0"], us)
    return m, us, zs, z_r, u_r


def _tr_stage(zs, us, z_r, u_r, p):
    dz = zs - z_r
    du = us - u_r
    return jnp.sum(jnp.einsum("ki,ij,kj->k", dz, p["Q"], dz) + jnp.einsum("ki,ij,kj->k", du, p["R"], du))


def _offset_kl(m, z_r, u_r, p):
    lq = log_pdf(m.output_pdf(z_r, u_r), p["samples"])
    r = jnp.concatenate([z_r, u_r])
    return jnp.mean(p["log_p"] - jnp.maximum(lq, LOG_DENSITY_FLOOR)) + p["lam"] * r @ r


def _offset_mean(m, z_r, u_r, p):
    mean, cov = moments(m.output_pdf(z_r, u_r))
    r = jnp.concatenate([z_r, u_r])
    return jnp.sum((p["y_ref"] - mean) ** 2) + p["beta"] * jnp.sum(jnp.diag(cov) ** 2) + p["lam"] * r @ r


_offset_kl_jit = jax.jit(_offset_kl)
_offset_mean_jit = jax.jit(_offset_mean)


def _tr_objective_kl(x, p):
    m, us, zs, z_r, u_r = _tr_parts(x, p)
    return _tr_stage(zs, us, z_r, u_r, p) + _offset_kl(m, z_r, u_r, p)


def _tr_objective_mean(x, p):
    m, us, zs, z_r, u_r = _tr_parts(x, p)
    return _tr_stage(zs, us, z_r, u_r, p) + _offset_mean(m, z_r, u_r, p)


def _tr_eq(x, p):
    m, us, zs, z_r, u_r = _tr_parts(x, p)
    return m.step(z_r, u_r) - z_r


def _tr_ineq(x, p):
    m, us, zs, z_r, u_r = _tr_parts(x, p)
    cp = p["chance"]
    poly = us @ p["H"].T - p["h"]
    return jnp.concatenate([
        _stage_margins(m, zs, us, cp).ravel(), poly.ravel(),
        masked_margins(m.output_pdf(z_r, u_r), cp), p["H"] @ u_r - p["h"],
        jnp.atleast_1d(_tr_stage(zs, us, z_r, u_r, p) - p["J_bar"]),
    ])


@dataclass
class TrackingMPC:
    model: MSSModel
    N: int
    Q: np.ndarray
    R: np.ndarray
    lam: float
    J_bar: float
    spec: ChanceSpec
    U: Polytope
    mode: str = "kl"
    beta: float = 0.0
    M: int = 100
    nlp: NLPConfig = MPC_NLP
    ref: object = None
    warm: np.ndarray | None = field(default=None, repr=False)
    warm_sol: NLPSolution | None = field(default=None, repr=False)
    last_u: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, float))
        self.R = np.atleast_2d(np.asarray(self.R, float))
        if self.lam <= 0:
            raise ContractError("lambda must be positive")
        if self.J_bar <= 0:
            raise ContractError("J_bar must be positive")
        if self.N < 1:
            raise ContractError("horizon must be >= 1")
        self.layout = OCPLayout(self.N, self.model.n_u, self.model.n_z + self.model.n_u)

    def problem(self, z0, capped: bool = True) -> NLPProblem:
        if self.ref is None:
            raise ContractError("no reference set")
        m = self.model
        lo, hi = self.U.bounding_box()
        params = dict(model=m, z0=jnp.asarray(z0, dtype=jnp.float64), Q=self.Q, R=self.R,
                      chance=chance_params(self.spec, m.n_y), H=self.U.H, h=self.U.h,
                      J_bar=float(self.J_bar) if capped else UNCAPPED,
                      lam=float(self.lam), H_stages=np.zeros((self.N, 0)))
        if self.mode == "kl":
            params.update(samples=jnp.asarray(self.ref.samples), log_p=jnp.asarray(self.ref.log_p))
            obj = _tr_objective_kl
        else:
            params.update(y_ref=np.atleast_1d(np.asarray(self.ref, float)), beta=float(self.beta))
            obj = _tr_objective_mean
        big = np.full(m.n_z, np.inf)
        lower = np.concatenate([np.tile(lo, self.N), -big, lo])
        upper = np.concatenate([np.tile(hi, self.N), big, hi])
        return NLPProblem(self.layout.dim, obj, _tr_eq, _tr_ineq, (lower, upper), params)

    def offset_value(self, r) -> float:
        """Offset cost of the current reference at ``r = (z_r, u_r)``."""
        m = self.model
        prob = self.problem(np.zeros(m.n_z))
        r = np.asarray(r, float)
        fn = _offset_kl_jit if self.mode == "kl" else _offset_mean_jit
        return float(fn(m, jnp.asarray(r[: m.n_z]), jnp.asarray(r[m.n_z:]), prob.params))

    def reset(self):
        self.warm = None
        self.warm_sol = None
        self.last_u = None


def set_reference(c: TrackingMPC, ref, mode: str | None = None, beta: float | None = None) -> None:
    """Swap the reference. KL mode takes a :class:`ReferencePdf` (re-frozen at ``c.M``
    samples), mean mode a target output mean. An invalid reference leaves ``c`` unchanged."""
    mode = mode or ("kl" if isinstance(ref, ReferencePdf) else "mean")
    if mode == "kl":
        if not isinstance(ref, ReferencePdf):
            raise ContractError("KL mode needs a ReferencePdf")
        if ref.M != c.M:
            ref = ReferencePdf(ref.kind, ref.params, c.M)
        new = ref
    elif mode == "mean":
        new = np.atleast_1d(np.asarray(ref, dtype=float))
        if new.size != c.model.n_y or not np.all(np.isfinite(new)):
            raise ContractError("mean reference has the wrong size or is not finite")
    else:
        raise ContractError(f"unknown offset mode {mode!r}")
    c.ref, c.mode = new, mode
    if beta is not None:
        c.beta = float(beta)


def _tracking_starts(c: TrackingMPC, z0):
    m = c.model
    mid = c.U.midpoint()
    if c.warm is not None:
        prev = c.warm
        u_r = prev[-m.n_u:]
        yield warm_start_shift(prev, c.layout, fill=u_r)
    zr = np.zeros(m.n_z) if m.z_mean is None else np.asarray(m.z_mean)
    for u in (mid, c.U.project(mid * 0.5), c.U.project(mid * 1.5)):
        z = np.asarray(zr, float)
        for _ in range(200):
            z = np.asarray(m.step(z, u))
        yield np.concatenate([np.tile(u, c.N), z, u])


def ocp_tracking(c: TrackingMPC, z0) -> MPCStep:
    """Solve the tracking OCP from ``z0``; returns the first input and the artificial reference.

    The cost cap ``J_bar`` is handled in two passes: the problem is first
    solved without it; if that optimum already meets the cap it is also the
    capped optimum. Otherwise the capped problem is solved from there, and if
    it has no solution the uncapped optimum is applied with status ``relaxed``.
    """
    z0 = np.asarray(z0, dtype=float)
    t0 = time.perf_counter()
    free = c.problem(z0, capped=False)
    m = c.model
    best, cand_used = None, False
    cand = None
    for k, x0 in enumerate(_tracking_starts(c, z0)):
        warm = None
        if k == 0 and c.warm is not None:
            cand = x0
            warm = c.warm_sol
        sol = solve(free, x0, c.nlp, warm=warm)
        if sol.status == "optimal":
            best = sol
            break
    x, status, H = (best.x, "optimal", best.objective) if best is not None else (None, "infeasible", None)
    if cand is not None and is_feasible(free, cand):
        f_c = evaluate(free, cand)[0]
        if x is None or f_c < H - 1e-12:
            x, H, status, cand_used = cand, f_c, "candidate" if x is None else "optimal", True
    nu = m.n_u
    c.warm_sol = best
    if x is None:
        u_apply = c.last_u if c.last_u is not None else c.U.midpoint()
        c.warm = None
        return MPCStep(u_applied=c.U.project(u_apply), u_seq=np.tile(u_apply, (c.N, 1)), z0=z0,
                       z_pred=np.zeros((c.N + 1, m.n_z)), J=float("nan"), status="fallback",
                       solve_time=time.perf_counter() - t0, margins=np.zeros((c.N, 2)), fallback=True)
    offset = c.offset_value(x[c.N * nu:])
    if H - offset > c.J_bar + c.nlp.feas_tol:
        capped = c.problem(z0, capped=True)
        sol = solve(capped, x, CAP_NLP)
        if sol.status == "optimal":
            x, H = sol.x, sol.objective
            offset = c.offset_value(x[c.N * nu:])
        else:
            status = "relaxed"
    us = x[: c.N * nu].reshape(c.N, nu)
    r = x[c.N * nu:]
    zs = np.asarray(m.rollout(z0, us)[0])
    margins = np.asarray(_stage_margins(m, jnp.asarray(zs[:-1]), jnp.asarray(us), chance_params(c.spec, m.n_y)))
    c.warm = x.copy()
    u_apply = c.U.project(us[0])
    c.last_u = u_apply
    return MPCStep(u_applied=u_apply, u_seq=us, z0=z0, z_pred=zs, J=float(H - offset), status=status,
                   solve_time=time.perf_counter() - t0, margins=margins, used_candidate=cand_used, r_star=r,
                   offset=offset)


def control_tracking(c: TrackingMPC, u_hist, y_hist) -> MPCStep:
    z0 = np.asarray(c.model.encode(u_hist, y_hist))
    return ocp_tracking(c, z0)
