"""Sampled inner approximation of the N-step backward reachable set.

A hyper-rectangle passes when the property function at its center is below a
margin built from local first and second differences plus a jump allowance
for corners where the OCP is infeasible. Failing rectangles are bisected
along their longest (relative) axis. The result is labeled "empirically
certified": the margin constants are sampled estimates, and
:func:`dense_grid_check` re-tests passed rectangles pointwise.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .diffnet import ContractError
from .smpc import SetpointMPC, ocp_setpoint

log = logging.getLogger(__name__)

RHO_C = 0.99


class NoCertifiedSetpoint(LookupError):
    pass


@dataclass
class HyperRect:
    center: np.ndarray
    half_widths: np.ndarray
    status: str = "pending"
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        self.center = np.asarray(self.center, float)
        self.half_widths = np.asarray(self.half_widths, float)
        if np.any(self.half_widths <= 0):
            raise ContractError("half widths must be positive")

    @property
    def lo(self):
        return self.center - self.half_widths

    @property
    def hi(self):
        return self.center + self.half_widths

    def contains(self, z, tol: float = 0.0) -> bool:
        z = np.asarray(z, float)
        return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))

    def corners(self):
        for signs in itertools.product((-1.0, 1.0), repeat=self.center.size):
            yield self.center + np.asarray(signs) * self.half_widths

    def split(self, scale=None):
        scale = np.ones_like(self.half_widths) if scale is None else np.asarray(scale, float)
        ax = int(np.argmax(self.half_widths / scale))
        hw = self.half_widths.copy()
        hw[ax] *= 0.5
        off = np.zeros_like(hw)
        off[ax] = hw[ax]
        return HyperRect(self.center - off, hw), HyperRect(self.center + off, hw.copy())

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "half_widths": self.half_widths.tolist(), "status": self.status,
                "record": self.record}

    @classmethod
    def from_json(cls, doc) -> "HyperRect":
        return cls(doc["center"], doc["half_widths"], doc.get("status", "pending"), doc.get("record", {}))


@dataclass
class ReachCertificate:
    roi_lo: np.ndarray
    roi_hi: np.ndarray
    passed: list
    failed: list
    delta_min: np.ndarray
    rho_c: float
    F_inf: float
    fingerprint: str
    complete: bool = True
    label: str = "empirically certified"
    evaluations: int = 0

    def contains(self, z) -> bool:
        return any(r.contains(z) for r in self.passed)

    def to_json(self) -> dict:
        return {"roi": {"lo": np.asarray(self.roi_lo).tolist(), "hi": np.asarray(self.roi_hi).tolist()},
                "passed": [r.to_json() for r in self.passed], "failed": [r.to_json() for r in self.failed],
                "delta_min": np.asarray(self.delta_min).tolist(), "rho_c": self.rho_c, "F_inf": self.F_inf,
                "fingerprint": self.fingerprint, "complete": self.complete, "label": self.label,
                "evaluations": self.evaluations}

    @classmethod
    def from_json(cls, doc) -> "ReachCertificate":
        return cls(np.asarray(doc["roi"]["lo"]), np.asarray(doc["roi"]["hi"]),
                   [HyperRect.from_json(r) for r in doc["passed"]], [HyperRect.from_json(r) for r in doc["failed"]],
                   np.asarray(doc["delta_min"]), doc["rho_c"], doc["F_inf"], doc["fingerprint"],
                   doc.get("complete", True), doc.get("label", "empirically certified"), doc.get("evaluations", 0))

    def boxes_csv(self, path) -> None:
        with open(path, "w") as fh:
            d = self.roi_lo.size
            fh.write(",".join(["status"] + [f"lo{i}" for i in range(d)] + [f"hi{i}" for i in range(d)]) + "\n")
            for r in self.passed + self.failed:
                fh.write(",".join([r.status] + [repr(float(v)) for v in np.concatenate([r.lo, r.hi])]) + "\n")


def fingerprint(ctrl: SetpointMPC) -> str:
    doc = {"z_bar": ctrl.z_bar.tolist(), "u_bar": ctrl.u_bar.tolist(), "N": ctrl.N, "Q": ctrl.Q.tolist(),
           "R": ctrl.R.tolist(), "P": np.asarray(ctrl.terminal.P).tolist(), "gamma": ctrl.terminal.gamma,
           "spec": ctrl.spec.to_json(), "U": ctrl.U.to_json(),
           "params": [float(v) for v in ctrl.model.params().flat[:64]]}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


class PropertyEvaluator:
    """Cached evaluation of the property function for one controller."""

    def __init__(self, ctrl: SetpointMPC, rho_c: float = RHO_C, F_inf: float = 1e3):
        self.ctrl = ctrl
        self.rho_c = rho_c
        self.F_inf = F_inf
        self.cache: dict = {}
        self.evaluations = 0

    def _solve(self, z, x0=None):
        saved = self.ctrl.warm, self.ctrl.warm_sol
        self.ctrl.warm, self.ctrl.warm_sol = None, None
        try:
            return ocp_setpoint(self.ctrl, z, x0=x0)
        finally:
            self.ctrl.warm, self.ctrl.warm_sol = saved

    def feasible(self, z) -> bool:
        return self.evaluate(z)["feasible"]

    def evaluate(self, z) -> dict:
        z = np.asarray(z, float)
        key = z.tobytes()
        if key in self.cache:
            return self.cache[key]
        self.evaluations += 1
        c = self.ctrl
        first = self._solve(z)
        if first.status not in ("optimal", "candidate"):
            out = {"F": self.F_inf, "feasible": False, "J": None, "J_next": None, "status": first.status}
        else:
            z1 = np.asarray(c.model.step(z, first.u_seq[0]))
            # shifted optimal sequence completed by the terminal controller
            z_end = first.z_pred[-1]
            shifted = np.concatenate([first.u_seq[1:].ravel(), c.kappa_f(z_end)])
            second = self._solve(z1, x0=shifted)
            if second.status not in ("optimal", "candidate"):
                out = {"F": self.F_inf, "feasible": False, "J": first.J, "J_next": None, "status": second.status}
            else:
                out = {"F": second.J - self.rho_c * first.J, "feasible": True, "J": first.J, "J_next": second.J,
                       "status": "ok"}
        self.cache[key] = out
        return out


def property_F(ctrl: SetpointMPC, z, rho_c: float = RHO_C, F_inf: float = 1e3) -> float:
    """``J*(f(z, kappa(z))) - rho_c J*(z)`` when the OCP is feasible at ``z``, else ``F_inf``."""
    return PropertyEvaluator(ctrl, rho_c, F_inf).evaluate(z)["F"]


def verify_rect(ev: PropertyEvaluator, r: HyperRect, terminal_shortcut: bool = True) -> tuple[bool, dict]:
    """Margin test for one rectangle; returns ``(passed, record)``."""
    c = ev.ctrl
    corners = list(r.corners())
    if terminal_shortcut and all(c.terminal.contains(z) for z in corners):
        return True, {"terminal": True}
    center = ev.evaluate(r.center)
    if not center["feasible"]:
        return False, {"F": ev.F_inf, "eta": None}
    eps_jump = 0.0
    for z in corners:
        if not ev.feasible(z):
            eps_jump = ev.F_inf
            break
    if eps_jump > 0:
        return False, {"F": center["F"], "eps_jump": eps_jump}
    d = r.center.size
    h = 0.5 * r.half_widths
    F0 = center["F"]
    grad = np.zeros(d)
    curv = np.zeros(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h[i]
        fp = ev.evaluate(r.center + e)["F"]
        fm = ev.evaluate(r.center - e)["F"]
        grad[i] = (fp - fm) / (2 * h[i])
        curv[i] = (fp - 2 * F0 + fm) / h[i] ** 2
    dmax = float(np.max(r.half_widths))
    a = 1.5 * float(np.sum(np.abs(grad)))
    b = 0.5 * dmax**2 * float(np.sum(np.abs(curv)))
    eta = a * dmax + b + eps_jump
    rec = {"F": F0, "a": a, "b": b, "eps_jump": eps_jump, "eta": eta}
    return bool(F0 <= -eta), rec


def certify_roi(ctrl: SetpointMPC, roi_lo, roi_hi, delta_min=None, rho_c: float = RHO_C, F_inf: float | None = None,
                max_rects: int = 4000, terminal_shortcut: bool = True, initial_splits: int = 0) -> ReachCertificate:
    """Refine the region of interest into passed and failed rectangles."""
    lo = np.asarray(roi_lo, float)
    hi = np.asarray(roi_hi, float)
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)) or np.any(hi <= lo):
        raise ContractError("region of interest must be a bounded, nonempty box")
    width = hi - lo
    delta_min = width / 2**6 if delta_min is None else np.broadcast_to(np.asarray(delta_min, float), lo.shape)
    if F_inf is None:
        P = np.asarray(ctrl.terminal.P)
        corners = HyperRect(0.5 * (lo + hi), 0.5 * width).corners()
        F_inf = 10.0 * max(float((z - ctrl.z_bar) @ P @ (z - ctrl.z_bar)) for z in corners)
    ev = PropertyEvaluator(ctrl, rho_c, F_inf)
    queue = deque([HyperRect(0.5 * (lo + hi), 0.5 * width)])
    for _ in range(initial_splits):
        queue = deque(child for r in queue for child in r.split(width))
    passed, failed = [], []
    processed = 0
    complete = True
    while queue:
        if processed >= max_rects:
            complete = False
            for r in queue:
                r.status = "fail"
                r.record = {"unprocessed": True}
                failed.append(r)
            break
        r = queue.popleft()
        processed += 1
        ok, rec = verify_rect(ev, r, terminal_shortcut)
        r.record = rec
        if ok:
            r.status = "pass"
            passed.append(r)
        elif np.all(2 * r.half_widths <= delta_min * (1 + 1e-12)):
            r.status = "fail"
            failed.append(r)
        else:
            r.status = "refined"
            queue.extend(r.split(width))
    cert = ReachCertificate(lo, hi, passed, failed, np.asarray(delta_min), rho_c, float(F_inf), fingerprint(ctrl),
                            complete, evaluations=ev.evaluations)
    cert._evaluator = ev  # kept for dense-grid re-checks in the same session
    return cert


def dense_grid_check(ctrl: SetpointMPC, r: HyperRect, rho_c: float = RHO_C, per_axis: int = 5,
                     evaluator: PropertyEvaluator | None = None) -> list:
    """Points of a ``per_axis``-per-axis grid over ``r`` that are infeasible or violate F <= 0."""
    ev = evaluator or PropertyEvaluator(ctrl, rho_c)
    axes = [np.linspace(a, b, per_axis) for a, b in zip(r.lo, r.hi)]
    bad = []
    for z in itertools.product(*axes):
        out = ev.evaluate(np.asarray(z))
        if not out["feasible"] or out["F"] > 0:
            bad.append((np.asarray(z), out))
    return bad


def select_setpoint(certs, z0) -> int:
    """Index of the first certificate whose passed rectangles contain ``z0``."""
    if not certs:
        raise ContractError("at least one certificate is required")
    for i, cert in enumerate(certs):
        if cert.contains(z0):
            return i
    raise NoCertifiedSetpoint("no certified set-point covers the given meta-state")
