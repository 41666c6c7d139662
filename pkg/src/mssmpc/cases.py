"""Benchmark case studies for set-point control and reference tracking.

Each builder returns the objects a closed-loop run needs. Settings are the
standard benchmark ones. Quantities without a standard value are set here and
recorded in the controller configuration that the harness writes next to
each run.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .gmm import ChanceSpec
from .mss_model import MSSModel
from .setpoint import (InfeasibleError, Polytope, ReferencePdf, Setpoint, exclude_and_retry, find_setpoint_mean,
                       find_setpoint_pdf, gmm_reference)
from .smpc import SetpointMPC, TrackingMPC, control, control_tracking, set_reference
from .terminal import TerminalDesign, design

log = logging.getLogger(__name__)

U_BOX = Polytope.box([0.0], [5.0])
MODEL_ENV = "MSSMPC_MODEL"


def benchmark_model_path() -> str:
    env = os.environ.get(MODEL_ENV)
    if env:
        return env
    return str(resources.files("mssmpc") / "data" / "benchmark_model.json")


def load_benchmark_model(path: str | None = None) -> MSSModel:
    return MSSModel.load(path or benchmark_model_path())


# ---------------------------------------------------------------------------
# set-point cases


@dataclass
class SetpointCase:
    name: str
    setpoint: Setpoint
    terminal: TerminalDesign
    controller: SetpointMPC
    spec: ChanceSpec
    config: dict

    def policy(self):
        ctrl = self.controller
        ctrl.reset()
        return lambda k, u_hist, y_hist: control(ctrl, u_hist, y_hist)


CASE1 = dict(weights=[0.5, 0.5], means=[2.5, 2.9], stds=[0.1, 0.1], M=500, y_max=3.5, p_max=0.9, N=25,
             Q=[10.0, 25.0, 30.0], R=0.25)
CASE2 = dict(y_ref=1.0, beta=0.0, y_max=1.4, p_max=0.8, N=10, Q=[1.5, 15.0, 2.5], R=1.0)


def case1(m: MSSModel, seed: int = 0, starts: int = 16, n_samples: int = 10_000, **over) -> SetpointCase:
    cfg = dict(CASE1, **over)
    ref = gmm_reference(cfg["weights"], cfg["means"], cfg["stds"], M=cfg["M"])
    spec = ChanceSpec(y_max=cfg["y_max"], p_max=cfg["p_max"])
    sp = find_setpoint_pdf(m, ref, spec, U_BOX, starts=starts, seed=seed)
    Q, R = np.diag(cfg["Q"]), np.atleast_2d(cfg["R"])
    td = design(m, sp, Q, R, spec, U_BOX, n_samples=n_samples, seed=seed)
    ctrl = SetpointMPC(m, sp, td, cfg["N"], Q, R, spec, U_BOX)
    return SetpointCase("1", sp, td, ctrl, spec, cfg)


def case2(m: MSSModel, seed: int = 0, starts: int = 16, n_samples: int = 10_000, exclude=None,
          **over) -> SetpointCase:
    cfg = dict(CASE2, **over)
    spec = ChanceSpec(y_max=cfg["y_max"], p_max=cfg["p_max"])
    sp = find_setpoint_mean(m, cfg["y_ref"], cfg["beta"], spec, U_BOX, starts=starts, seed=seed, exclude=exclude)
    Q, R = np.diag(cfg["Q"]), np.atleast_2d(cfg["R"])
    td = design(m, sp, Q, R, spec, U_BOX, n_samples=n_samples, seed=seed)
    ctrl = SetpointMPC(m, sp, td, cfg["N"], Q, R, spec, U_BOX)
    return SetpointCase("2", sp, td, ctrl, spec, cfg)


def case2_second(m: MSSModel, first: SetpointCase, radius: float = 0.5, seed: int = 1, **kw) -> SetpointCase | None:
    """A second set-point for the same mean target, away from the first one."""
    try:
        return case2(m, seed=seed, exclude=[exclude_and_retry(first.setpoint, radius)], **kw)
    except InfeasibleError:
        return None


# ---------------------------------------------------------------------------
# tracking cases


TRACKING = dict(N=60, J_bar=0.15, lam=1e-6, Q=[1.0, 1.0, 1.0], R=1.0, M=100)
CASE3_REFS = (
    ("gamma", {"shape": 9.0, "scale": 0.1}),
    ("beta", {"a": 2.0, "b": 5.0, "loc": 0.0, "scale": 2.0}),
)
CASE3_SWITCH = 1000
CASE3_STEPS = 2000
CASE3_DISCARD = 50
CASE4_Y_MAX = 3.0
CASE4_P_MAX = 0.9
CASE4_STEPS = 1200
CASE4_INFEASIBLE = (800, 1000)


def case4_schedule(k: int) -> float:
    """Piecewise-constant mean reference; the segment on 800..999 lies above the bound."""
    if k < 200:
        return 0.8
    if k < 400:
        return 1.2
    if k < 600:
        return 0.5
    if k < CASE4_INFEASIBLE[0]:
        return 1.0
    if k < CASE4_INFEASIBLE[1]:
        return 3.4
    return 0.8


@dataclass
class TrackingCase:
    name: str
    controller: TrackingMPC
    schedule: callable
    steps: int
    config: dict

    def policy(self):
        ctrl = self.controller
        ctrl.reset()
        state = {"ref": None}

        def run(k, u_hist, y_hist):
            ref = self.schedule(k)
            if state["ref"] is None or not _same_ref(ref, state["ref"]):
                set_reference(ctrl, ref)
                state["ref"] = ref
            return control_tracking(ctrl, u_hist, y_hist)

        return run


def _same_ref(a, b) -> bool:
    if isinstance(a, ReferencePdf) and isinstance(b, ReferencePdf):
        return a is b
    if isinstance(a, ReferencePdf) or isinstance(b, ReferencePdf):
        return False
    return bool(np.all(np.asarray(a) == np.asarray(b)))


def case3(m: MSSModel, steps: int = CASE3_STEPS, switch: int = CASE3_SWITCH, refs=CASE3_REFS, **over) -> TrackingCase:
    cfg = dict(TRACKING, **over)
    r1 = ReferencePdf(refs[0][0], dict(refs[0][1]), cfg["M"])
    r2 = ReferencePdf(refs[1][0], dict(refs[1][1]), cfg["M"])
    ctrl = TrackingMPC(m, cfg["N"], np.diag(cfg["Q"]), np.atleast_2d(cfg["R"]), cfg["lam"], cfg["J_bar"],
                       ChanceSpec(), U_BOX, mode="kl", M=cfg["M"])
    sched = lambda k: r1 if k < switch else r2  # noqa: E731
    cfg.update(refs=[list(r) for r in refs], switch=switch, steps=steps)
    return TrackingCase("3", ctrl, sched, steps, cfg)


def case4(m: MSSModel, steps: int = CASE4_STEPS, schedule=case4_schedule, **over) -> TrackingCase:
    cfg = dict(TRACKING, **over)
    spec = ChanceSpec(y_max=CASE4_Y_MAX, p_max=CASE4_P_MAX)
    ctrl = TrackingMPC(m, cfg["N"], np.diag(cfg["Q"]), np.atleast_2d(cfg["R"]), cfg["lam"], cfg["J_bar"],
                       spec, U_BOX, mode="mean", M=cfg["M"])
    cfg.update(y_max=CASE4_Y_MAX, p_max=CASE4_P_MAX, steps=steps, infeasible=list(CASE4_INFEASIBLE))
    return TrackingCase("4", ctrl, schedule, steps, cfg)
