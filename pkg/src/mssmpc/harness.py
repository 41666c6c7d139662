"""Closed-loop experiments against the true plant and their analysis."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.signal import find_peaks
from scipy.stats import gaussian_kde

from .diffnet import ContractError
from .plant import initial_states, make_rng, output, plant_step

log = logging.getLogger(__name__)

MMD_WINDOW = 50
MMD_PERMUTATIONS = 200


@dataclass
class ExperimentConfig:
    case: str
    seed: int = 0
    runs: int = 10
    steps: int = 500
    model_path: str | None = None
    controller: dict = field(default_factory=dict)
    schedule: list = field(default_factory=list)
    out: str | None = None
    x0_low: float = 0.0
    x0_high: float = 1.0

    def __post_init__(self):
        if self.runs < 1:
            raise ContractError("runs must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    u: np.ndarray
    y: np.ndarray
    J: np.ndarray
    status: list
    solve_time: np.ndarray
    margins: np.ndarray
    offset: np.ndarray
    seed: int
    lag: int
    cutoff: int | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return int(self.y.size)

    def steady(self) -> np.ndarray:
        if self.cutoff is None:
            raise ContractError("transient cutoff not computed")
        return self.y[self.cutoff:]

    def to_json(self) -> dict:
        arr = lambda a: np.asarray(a, dtype=float).tolist()  # noqa: E731
        return {"u": arr(self.u), "y": arr(self.y), "J": arr(self.J), "status": list(self.status),
                "solve_time": arr(self.solve_time), "margins": arr(self.margins), "offset": arr(self.offset),
                "seed": self.seed, "lag": self.lag, "cutoff": self.cutoff, "error": self.error}


class PlantSim:
    """Benchmark plant with its own noise stream."""

    def __init__(self, seed, x0=None, frozen_noise: bool = False, low: float = 0.0, high: float = 1.0):
        self.rng = make_rng(seed)
        self.x = (self.rng.uniform(low, high, size=2) if x0 is None else np.asarray(x0, float))
        self.frozen = frozen_noise

    def output(self) -> float:
        return float(output(self.x))

    def step(self, u: float) -> None:
        self.x = plant_step(self.x, u, self.rng, noise=(0.0, 0.0) if self.frozen else None)


def closed_loop(policy: Callable, lag: int, steps: int, seed, plant=None, bootstrap_u: float = 2.5,
                on_step: Callable | None = None) -> RunRecord:
    """Simulate the closed loop between ``policy`` and the plant for ``steps`` samples.

    ``policy(k, u_hist, y_hist)`` returns an object with ``u_applied``, ``J``,
    ``status``, ``solve_time``, ``margins`` and optionally ``offset``. The
    first ``lag`` inputs are ``bootstrap_u``.
    """
    if steps <= lag:
        raise ContractError("steps must exceed the encoder lag")
    plant = plant or PlantSim(seed)
    u = np.zeros(steps)
    y = np.zeros(steps)
    J = np.full(steps, np.nan)
    tim = np.zeros(steps)
    marg = np.full(steps, np.nan)
    off = np.full(steps, np.nan)
    status = ["bootstrap"] * steps
    for k in range(steps):
        y[k] = plant.output()
        if k < lag:
            u[k] = bootstrap_u
        else:
            st = policy(k, u[k - lag:k], y[k - lag:k])
            u[k] = float(np.atleast_1d(st.u_applied)[0])
            J[k] = st.J
            status[k] = st.status
            tim[k] = st.solve_time
            if st.margins is not None and np.size(st.margins):
                marg[k] = float(np.max(np.asarray(st.margins)[0]))
            if getattr(st, "offset", None) is not None:
                off[k] = st.offset
            if on_step is not None:
                on_step(k, st)
        plant.step(u[k])
    return RunRecord(u, y, J, status, tim, marg, off, seed=seed if isinstance(seed, int) else -1, lag=lag)


def monte_carlo(make_policy: Callable, lag: int, runs: int, steps: int, seed: int, plant_kw=None,
                **loop_kw) -> list:
    """Independent runs with spawned seeds; a failing run is recorded, not raised."""
    children = np.random.SeedSequence(seed).spawn(runs)
    records = []
    for i, ss in enumerate(children):
        try:
            policy = make_policy(i)
            rec = closed_loop(policy, lag, steps, ss, plant=PlantSim(ss, **(plant_kw or {})), **loop_kw)
            rec.seed = i
        except Exception as exc:  # isolate the failure, keep the battery going
            log.exception("run %d failed", i)
            rec = RunRecord(np.zeros(0), np.zeros(0), np.zeros(0), [], np.zeros(0), np.zeros(0), np.zeros(0),
                            seed=i, lag=lag, error=repr(exc))
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# transient detection


def _gauss_kernel(a, b, bw):
    d = a[:, None] - b[None, :]
    return np.exp(-(d * d) / (2 * bw * bw))


def mmd2(x, y, bw) -> float:
    """Biased squared maximum mean discrepancy with a Gaussian kernel."""
    return float(_gauss_kernel(x, x, bw).mean() + _gauss_kernel(y, y, bw).mean() - 2 * _gauss_kernel(x, y, bw).mean())


def median_bandwidth(z) -> float:
    d = np.abs(z[:, None] - z[None, :])
    med = np.median(d[np.triu_indices(z.size, 1)])
    return float(med) if med > 0 else 1.0


def mmd_test(x, y, n_perm: int = MMD_PERMUTATIONS, alpha: float = 0.05, rng=None):
    """Permutation test; returns ``(mmd2, threshold)``."""
    rng = rng or np.random.default_rng(0)
    pooled = np.concatenate([x, y])
    bw = median_bandwidth(pooled)
    K = _gauss_kernel(pooled, pooled, bw)
    n = x.size

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return K[np.ix_(a, a)].mean() + K[np.ix_(b, b)].mean() - 2 * K[np.ix_(a, b)].mean()

    base = stat(np.arange(pooled.size))
    perms = np.array([stat(rng.permutation(pooled.size)) for _ in range(n_perm)])
    return float(base), float(np.quantile(perms, 1 - alpha))


def detect_transient(y, window: int = MMD_WINDOW, n_perm: int = MMD_PERMUTATIONS, alpha: float = 0.05,
                     stride: int = 5, seed: int = 0) -> int:
    """Earliest window whose samples are indistinguishable from the final quarter.

    The cutoff is the middle of the first accepted window.
    """
    y = np.asarray(y, float)
    T = y.size
    if T < 2 * window:
        raise ContractError(f"sequence of length {T} shorter than two windows")
    ref_len = max(window, T // 4)
    ref = y[T - ref_len:]
    rng = np.random.default_rng(seed)
    for k in range(0, T - ref_len - window + 1, stride):
        stat, thr = mmd_test(y[k:k + window], ref, n_perm, alpha, rng)
        if stat <= thr:
            return k + window // 2
    log.warning("no stationary window detected; using half the sequence")
    return T // 2


# ---------------------------------------------------------------------------
# steady-state analysis


@dataclass
class SteadyState:
    samples: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    hist: np.ndarray
    edges: np.ndarray
    summary: dict


def kde_modes(samples, grid=None, bandwidth=None, rel_prominence: float = 0.05):
    samples = np.asarray(samples, float)
    kde = gaussian_kde(samples, bw_method=bandwidth)
    if grid is None:
        pad = 3 * samples.std()
        grid = np.linspace(samples.min() - pad, samples.max() + pad, 2001)
    dens = kde(grid)
    peaks, _ = find_peaks(dens, prominence=rel_prominence * dens.max())
    return grid, dens, grid[peaks]


def steady_state_pdf(records, y_min=None, y_max=None, bandwidth=None, bins: int = 60,
                     fixed_cutoff: int | None = None) -> SteadyState:
    """Pool the post-transient samples of all runs and estimate their density."""
    chunks, cutoffs = [], []
    for r in records:
        if r.error is not None or r.y.size == 0:
            continue
        if fixed_cutoff is not None:
            r.cutoff = fixed_cutoff
        elif r.cutoff is None:
            r.cutoff = detect_transient(r.y[r.lag:]) + r.lag
        cutoffs.append(r.cutoff)
        chunks.append(r.y[r.cutoff:])
    samples = np.concatenate(chunks) if chunks else np.zeros(0)
    if samples.size < 100:
        raise ContractError(f"only {samples.size} pooled steady-state samples (need >= 100)")
    grid, dens, modes = kde_modes(samples, bandwidth=bandwidth)
    hist, edges = np.histogram(samples, bins=bins, density=True)
    summary = {"n_samples": int(samples.size), "cutoffs": cutoffs, "mean": float(samples.mean()),
               "var": float(samples.var()), "modes": modes.tolist()}
    if y_max is not None:
        summary["p_leq_y_max"] = float(np.mean(samples <= y_max))
    if y_min is not None:
        summary["p_geq_y_min"] = float(np.mean(samples >= y_min))
    return SteadyState(samples, grid, dens, hist, edges, summary)


# ---------------------------------------------------------------------------
# report bundle


def report(case: str, records, out_dir, config: dict | None = None, steady: SteadyState | None = None,
           extra_csv: dict | None = None) -> str:
    """Write run CSVs, summary JSON, plot data and a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    config = config or {}
    cfg_hash = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]
    files = []
    for i, r in enumerate(records):
        name = f"run_{i:03d}.csv"
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "u", "y", "J", "status", "solve_time", "max_margin", "offset"])
            for k in range(r.y.size):
                wr.writerow([k, repr(float(r.u[k])), repr(float(r.y[k])), repr(float(r.J[k])), r.status[k],
                             repr(float(r.solve_time[k])), repr(float(r.margins[k])), repr(float(r.offset[k]))])
        files.append(name)
    if steady is not None:
        with open(os.path.join(out_dir, "steady_pdf.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["y", "kde"])
            wr.writerows([repr(float(a)), repr(float(b))] for a, b in zip(steady.grid, steady.density))
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(dict(steady.summary, case=case, config_hash=cfg_hash), fh, indent=1, sort_keys=True)
        files += ["steady_pdf.csv", "summary.json"]
    for name, rows in (extra_csv or {}).items():
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        files.append(name)
    manifest = {"case": case, "config_hash": cfg_hash, "files": files, "runs": len(records)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0


__all__ = ["ExperimentConfig", "RunRecord", "PlantSim", "closed_loop", "monte_carlo", "detect_transient",
           "mmd2", "mmd_test", "steady_state_pdf", "kde_modes", "report", "initial_states"]
