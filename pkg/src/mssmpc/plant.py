"""Benchmark stochastic plant and data generation.

    x1' = (0.2 + 0.8 exp(-(x2 + v)^2)) x1 + 0.3 sin(x2) u
    x2' = -0.4 x1 + (0.7 + 0.3 sin(w)) x2
    y   = x1,   v ~ U(-0.1, 0.1),  w ~ U(-pi, pi)
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

V_BOUND = 0.1
W_BOUND = np.pi


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; ``seed`` may be an int or a SeedSequence."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def spawn_rngs(seed, n: int) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]


def draw_noise(rng: np.random.Generator, size=None):
    v = rng.uniform(-V_BOUND, V_BOUND, size=size)
    w = rng.uniform(-W_BOUND, W_BOUND, size=size)
    return v, w


def step_with_noise(x, u, v, w):
    """Deterministic part of the plant with the noise samples given explicitly."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    x1n = (0.2 + 0.8 * np.exp(-((x2 + v) ** 2))) * x1 + 0.3 * np.sin(x2) * u
    x2n = -0.4 * x1 + (0.7 + 0.3 * np.sin(w)) * x2
    return np.stack([x1n, x2n], axis=-1)


def plant_step(x, u, rng: np.random.Generator | None = None, noise=None):
    """One plant transition. ``noise=(v, w)`` freezes the disturbances."""
    x = np.asarray(x, dtype=float)
    if noise is None:
        if rng is None:
            raise ValueError("either rng or frozen noise is required")
        v, w = draw_noise(rng, size=x.shape[:-1] or None)
    else:
        v, w = noise
    return step_with_noise(x, u, v, w)


def output(x):
    return np.asarray(x)[..., 0]


def initial_states(rng: np.random.Generator, size=None):
    shape = (2,) if size is None else (size, 2)
    return rng.uniform(0.0, 1.0, size=shape)


@dataclass
class Dataset:
    """One shared input sequence ``u`` (T,) and output realizations ``y`` (reps, T)."""

    u: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return int(self.y.shape[0])

    @property
    def length(self) -> int:
        return int(self.u.shape[0])

    def save(self, directory) -> str:
        os.makedirs(directory, exist_ok=True)
        files = []
        for r in range(self.reps):
            name = f"realization_{r:04d}.csv"
            with open(os.path.join(directory, name), "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["k", "u", "y"])
                for k in range(self.length):
                    wr.writerow([k, repr(float(self.u[k])), repr(float(self.y[r, k]))])
            files.append(name)
        manifest = dict(self.meta, files=files, reps=self.reps, length=self.length)
        path = os.path.join(directory, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, indent=2)
        return path

    @classmethod
    def load(cls, manifest_path) -> "Dataset":
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        base = os.path.dirname(manifest_path)
        ys, u = [], None
        for name in manifest["files"]:
            with open(os.path.join(base, name), newline="") as fh:
                rows = list(csv.reader(fh))[1:]
            arr = np.asarray([[float(a) for a in r[1:]] for r in rows])
            u = arr[:, 0] if u is None else u
            ys.append(arr[:, 1])
        meta = {k: v for k, v in manifest.items() if k not in ("files",)}
        return cls(u=u, y=np.asarray(ys), meta=meta)


def simulate_ensemble(u, x0, noise_rngs=None, frozen_noise: bool = False):
    """Apply one input sequence to several realizations; returns y (reps, T)."""
    u = np.asarray(u, dtype=float)
    x = np.array(x0, dtype=float)
    reps, T = x.shape[0], u.shape[0]
    if frozen_noise:
        v = np.zeros((reps, T))
        w = np.zeros((reps, T))
    else:
        draws = [draw_noise(r, size=T) for r in noise_rngs]
        v = np.stack([d[0] for d in draws])
        w = np.stack([d[1] for d in draws])
    y = np.empty((reps, T))
    for k in range(T):
        y[:, k] = x[:, 0]
        x = step_with_noise(x, u[k], v[:, k], w[:, k])
    return y


def _ensemble(seed, length, reps, u_low, u_high, kind, frozen_noise=False) -> Dataset:
    root = np.random.SeedSequence(seed)
    u_seq, *children = root.spawn(reps + 1)
    u = make_rng(u_seq).uniform(u_low, u_high, size=length)
    rngs = [make_rng(c) for c in children]
    x0 = np.stack([initial_states(r) for r in rngs])
    y = simulate_ensemble(u, x0, rngs, frozen_noise=frozen_noise)
    meta = dict(kind=kind, seed=seed, u_low=u_low, u_high=u_high, frozen_noise=frozen_noise)
    return Dataset(u=u, y=y, meta=meta)


def generate_training_data(seed: int, length: int = 8000, reps: int = 10, u_low: float = 0.0,
                           u_high: float = 5.0, lag: int = 15, frozen_noise: bool = False) -> Dataset:
    """One uniform input sequence applied ``reps`` times from U(0,1)^2 initial states."""
    if length < lag + 2:
        raise ValueError(f"length {length} too short for encoder lag {lag}")
    return _ensemble(seed, length, reps, u_low, u_high, "train", frozen_noise)


def generate_test_ensemble(seed: int, horizon: int, S: int = 1000, u_low: float = 0.0,
                           u_high: float = 5.0) -> Dataset:
    """One input sequence of length ``horizon`` (= lag + N_bar) and S realizations."""
    return _ensemble(seed, horizon, S, u_low, u_high, "test")
