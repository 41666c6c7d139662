"""Identification of the MSS model by multi-step negative log-likelihood.

Training windows are overlapping slices of the realizations: ``lag`` samples
of history feed the encoder, then the transition is rolled out for ``T_sub``
steps and the mixture head is scored against the measured outputs. Adam runs
first on random minibatches, then an optional full-batch L-BFGS-B phase on a
fixed window subsample. The parameters with the best validation NLL are kept.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import jax
import jax.numpy as jnp
from jax.scipy.special import logsumexp
import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma

from .diffnet import ContractError, ParamVector
from .gmm import LOG_DENSITY_FLOOR, DiagGMM, log_pdf
from .mss_model import MSSModel, build_model
from .plant import Dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs_adam: int = 2000
    epochs_quasi_newton: int = 2000
    lr: float = 2e-3
    lr_final: float = 2e-4
    batch: int = 256
    T_sub: int = 50
    l2: float = 1e-6
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 25
    qn_windows: int = 1024
    val_windows: int = 512
    active_threshold: float = 1e-3

    def __post_init__(self):
        if self.T_sub < 1:
            raise ContractError("T_sub must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.epochs_adam < 0 or self.epochs_quasi_newton < 0:
            raise ContractError("epoch counts must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc) -> "TrainConfig":
        return cls(**doc)


@dataclass
class FitReport:
    loss_curve: list
    val_curve: list
    initial_val_nll: float
    best_val_nll: float
    final_train_nll: float
    final_val_nll: float
    wall_clock: float
    epochs_adam_run: int
    epochs_quasi_newton_run: int
    aborted: bool
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc) -> "FitReport":
        return cls(**doc)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "FitReport":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# windows and loss


@dataclass(frozen=True)
class Windows:
    """Window index set: realization index ``r`` and start ``s`` per window."""

    r: np.ndarray
    s: np.ndarray

    def __len__(self):
        return int(self.r.size)

    def take(self, idx) -> "Windows":
        return Windows(self.r[idx], self.s[idx])


def split_windows(data: Dataset, lag: int, T_sub: int, val_fraction: float = 0.1):
    """Training windows from the first part, validation from the last part of each realization."""
    T = data.length
    n_val = int(round(val_fraction * T))
    width = lag + T_sub
    train_end = T - n_val
    if train_end < width:
        raise ContractError(f"realizations of length {T} too short for windows of {width} samples")
    tr_s = np.arange(0, train_end - width + 1)
    va_s = np.arange(train_end, T - width + 1) if n_val >= width else np.zeros(0, int)
    reps = np.arange(data.reps)
    tr = Windows(np.repeat(reps, tr_s.size), np.tile(tr_s, data.reps))
    va = Windows(np.repeat(reps, va_s.size), np.tile(va_s, data.reps))
    return tr, va


def active_windows(data: Dataset, w: Windows, lag: int, threshold: float) -> Windows:
    """Windows whose encoder history has some ``|y| > threshold``.

    The benchmark plant has an absorbing fixed point at the origin; histories
    that sit on it carry no information about the input response, while their
    near-zero outputs earn unbounded log-density up to the sigma floor.
    """
    if threshold <= 0 or len(w) == 0:
        return w
    hist = np.abs(data.y)
    idx = w.s[:, None] + np.arange(lag)
    keep = np.max(hist[w.r[:, None], idx], axis=1) > threshold
    return w.take(np.flatnonzero(keep))


def _window_arrays(u, y, r, s, width):
    idx = s[:, None] + jnp.arange(width)
    return u[idx], y[r[:, None], idx]


def window_nll(m: MSSModel, u_win, y_win):
    """Mean -log p over windows (B, lag+T) of scalar inputs/outputs."""
    n = m.lag
    u_win = u_win.reshape(*u_win.shape[:2], m.n_u)
    y_win = y_win.reshape(*y_win.shape[:2], m.n_y)
    z0 = m.encode_batch(u_win[:, :n], y_win[:, :n])

    def body(z, uy):
        u_k, y_k = uy
        w, mu, sigma = m.head(z, u_k)
        lp = jax.vmap(lambda w_, mu_, s_, y_: log_pdf(DiagGMM(w_, mu_, s_), y_))(w, mu, sigma, y_k)
        return m.step(z, u_k), jnp.maximum(lp, LOG_DENSITY_FLOOR)

    us = jnp.swapaxes(u_win[:, n:], 0, 1)
    ys = jnp.swapaxes(y_win[:, n:], 0, 1)
    _, lps = jax.lax.scan(body, z0, (us, ys))
    return -jnp.mean(lps)


def nll_loss(m: MSSModel, u_win, y_win, l2: float = 0.0):
    """Multi-step NLL of a window batch plus ``l2 * ||theta||^2``."""
    reg = sum(jnp.sum(leaf**2) for leaf in jax.tree_util.tree_leaves(m))
    return window_nll(m, jnp.asarray(u_win), jnp.asarray(y_win)) + l2 * reg


def _make_loss(m: MSSModel, data: Dataset, T_sub: int, l2: float):
    pv = m.params()
    u = jnp.asarray(data.u, dtype=jnp.float64)
    y = jnp.asarray(data.y, dtype=jnp.float64)
    width = m.lag + T_sub

    def nll(flat, r, s):
        mm = replace(m, nets=pv.to_nets(flat))
        uw, yw = _window_arrays(u, y, r, s, width)
        return window_nll(mm, uw, yw)

    def loss(flat, r, s):
        return nll(flat, r, s) + l2 * jnp.sum(flat**2)

    return pv, jax.jit(nll), jax.jit(jax.value_and_grad(loss))


# ---------------------------------------------------------------------------
# training


def init_model(data: Dataset, seed: int = 0, **kw) -> MSSModel:
    """Benchmark-sized random model with input/output scaling taken from ``data``."""
    scaling = {"u_mean": (float(np.mean(data.u)),), "u_std": (float(np.std(data.u)),),
               "y_mean": (float(np.mean(data.y)),), "y_std": (float(np.std(data.y)),)}
    return build_model(np.random.default_rng(seed), scaling=scaling, **kw)


def meta_state_stats(m: MSSModel, data: Dataset, max_windows: int = 4000, seed: int = 0):
    """Mean and std of encoded meta-states over the data (used for multi-start seeding)."""
    n = m.lag
    r = np.repeat(np.arange(data.reps), data.length - n + 1)
    s = np.tile(np.arange(data.length - n + 1), data.reps)
    if r.size > max_windows:
        pick = np.random.default_rng(seed).choice(r.size, max_windows, replace=False)
        r, s = r[pick], s[pick]
    uw, yw = _window_arrays(jnp.asarray(data.u), jnp.asarray(data.y), r, s, n)
    z = np.asarray(m.encode_batch(uw[..., None], yw[..., None]))
    return tuple(z.mean(0).tolist()), tuple((z.std(0) + 1e-12).tolist())


def train(m: MSSModel, data: Dataset, cfg: TrainConfig = TrainConfig(), progress: bool = False):
    """Fit ``m`` to ``data``; returns the best-validation model and a :class:`FitReport`."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    tr, va = split_windows(data, m.lag, cfg.T_sub, cfg.val_fraction)
    tr = active_windows(data, tr, m.lag, cfg.active_threshold)
    va = active_windows(data, va, m.lag, cfg.active_threshold)
    if len(tr) == 0:
        raise ContractError("no training window with an active history")
    if len(va) == 0:
        va = tr
    if len(va) > cfg.val_windows:
        va = va.take(np.sort(rng.choice(len(va), cfg.val_windows, replace=False)))
    pv, nll, vg = _make_loss(m, data, cfg.T_sub, cfg.l2)
    va_r, va_s = jnp.asarray(va.r), jnp.asarray(va.s)

    def val(flat):
        return float(nll(jnp.asarray(flat), va_r, va_s))

    theta = np.array(pv.flat)
    best = theta.copy()
    best_val = val(theta)
    initial_val = best_val
    loss_curve, val_curve = [], [(0, best_val)]
    aborted = False

    # Adam
    mom = np.zeros_like(theta)
    sec = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    n_adam = 0
    for it in range(1, cfg.epochs_adam + 1):
        pick = rng.choice(len(tr), size=min(cfg.batch, len(tr)), replace=False)
        value, g = vg(jnp.asarray(theta), jnp.asarray(tr.r[pick]), jnp.asarray(tr.s[pick]))
        value, g = float(value), np.asarray(g)
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            log.warning("non-finite loss at Adam step %d, keeping last finite checkpoint", it)
            aborted = True
            break
        loss_curve.append(value)
        frac = (it - 1) / max(cfg.epochs_adam - 1, 1)
        lr = cfg.lr * (cfg.lr_final / cfg.lr) ** frac
        mom = b1 * mom + (1 - b1) * g
        sec = b2 * sec + (1 - b2) * g * g
        theta = theta - lr * (mom / (1 - b1**it)) / (np.sqrt(sec / (1 - b2**it)) + eps)
        n_adam = it
        if it % cfg.eval_every == 0 or it == cfg.epochs_adam:
            v = val(theta)
            val_curve.append((it, v))
            if np.isfinite(v) and v < best_val:
                best_val, best = v, theta.copy()
            if progress:
                log.info("adam %5d  train %.4f  val %.4f", it, value, v)

    # L-BFGS-B on a fixed subsample, starting from the best Adam iterate
    n_qn = 0
    if cfg.epochs_quasi_newton > 0 and not aborted:
        pick = np.sort(rng.choice(len(tr), size=min(cfg.qn_windows, len(tr)), replace=False))
        qr, qs = jnp.asarray(tr.r[pick]), jnp.asarray(tr.s[pick])
        state = {"it": 0, "bad": False}

        def fun(x):
            value, g = vg(jnp.asarray(x), qr, qs)
            value, g = float(value), np.asarray(g)
            if not (np.isfinite(value) and np.all(np.isfinite(g))):
                state["bad"] = True
                return 1e10, np.zeros_like(x)
            return value, g

        def callback(xk):
            nonlocal best, best_val
            state["it"] += 1
            it = state["it"]
            if it % cfg.eval_every == 0:
                f_k = float(vg(jnp.asarray(xk), qr, qs)[0])
                loss_curve.append(f_k)
                v = val(xk)
                val_curve.append((cfg.epochs_adam + it, v))
                if np.isfinite(v) and v < best_val:
                    best_val, best = v, np.array(xk)
                if progress:
                    log.info("lbfgs %5d  train %.4f  val %.4f", it, f_k, v)

        res = minimize(fun, best.copy(), jac=True, method="L-BFGS-B", callback=callback,
                       options={"maxiter": cfg.epochs_quasi_newton, "maxfun": 2 * cfg.epochs_quasi_newton,
                                "maxcor": 20})
        n_qn = state["it"]
        aborted = state["bad"]
        v = val(res.x)
        val_curve.append((cfg.epochs_adam + n_qn, v))
        if np.isfinite(v) and v < best_val:
            best_val, best = v, np.array(res.x)

    model = m.with_params(jnp.asarray(best))
    model = replace(model, nets={k: v for k, v in model.nets.items()})
    z_mean, z_std = meta_state_stats(model, data)
    model = replace(model, z_mean=z_mean, z_std=z_std)
    final_train = float(nll(jnp.asarray(best), jnp.asarray(tr.r[: cfg.val_windows]),
                            jnp.asarray(tr.s[: cfg.val_windows])))
    report = FitReport(
        loss_curve=[float(v) for v in loss_curve],
        val_curve=[[int(a), float(b)] for a, b in val_curve],
        initial_val_nll=float(initial_val),
        best_val_nll=float(best_val),
        final_train_nll=final_train,
        final_val_nll=float(best_val),
        wall_clock=time.perf_counter() - t0,
        epochs_adam_run=n_adam,
        epochs_quasi_newton_run=n_qn,
        aborted=aborted,
        config=cfg.to_json(),
    )
    return model, report


# ---------------------------------------------------------------------------
# evaluation


@jax.jit
def _ensemble_loglik(m: MSSModel, u, y):
    """Per-realization log-densities (N_bar, S) and log-densities under the pooled prediction."""
    n = m.lag
    S = y.shape[0]
    z0 = m.encode_batch(jnp.broadcast_to(u[:n, None], (S, n, 1)), y[:, :n, None])

    def body(z, uy):
        u_k, y_k = uy
        w, mu, sigma = m.head(z, jnp.full((S, 1), u_k))
        own = jax.vmap(lambda w_, mu_, s_, y_: log_pdf(DiagGMM(w_, mu_, s_), y_[None]))(w, mu, sigma, y_k)
        # marginal prediction: equal-weight mixture of all S predicted pdfs, scored at every sample
        d = (y_k[:, None, None] - mu[None, :, :, 0]) / sigma[None, :, :, 0]
        lc = jnp.log(w)[None] - 0.5 * d * d - jnp.log(sigma[None, :, :, 0]) - 0.5 * jnp.log(2 * jnp.pi)
        pooled = logsumexp(lc.reshape(S, -1), axis=1) - jnp.log(S)
        return m.step(z, jnp.full((S, 1), u_k)), (own, pooled)

    _, lps = jax.lax.scan(body, z0, (u[n:], y[:, n:].T))
    return lps


def mean_log_likelihood(m: MSSModel, ensemble: Dataset, n_bar: int, pooled: bool = True) -> float:
    """Average log-density of the ensemble outputs under a pure model rollout.

    Each realization is encoded from its own first ``lag`` samples and rolled
    out for ``n_bar`` steps without re-encoding. With ``pooled`` (default) every
    output at step k is scored under one predicted pdf, the equal-weight mixture
    of the S rollouts, so the score is bounded by the negative output entropy.
    Otherwise each output is scored under its own rollout's pdf.
    """
    n = m.lag
    if ensemble.length < n + n_bar:
        raise ContractError(f"ensemble horizon {ensemble.length} < lag + N_bar = {n + n_bar}")
    u = jnp.asarray(ensemble.u[: n + n_bar], dtype=jnp.float64)
    y = jnp.asarray(ensemble.y[:, : n + n_bar], dtype=jnp.float64)
    own, pool = _ensemble_loglik(m, u, y)
    return float(jnp.mean(pool if pooled else own))


def vasicek_entropy(x, m: int | None = None, bias_correct: bool = True) -> float:
    """Spacing estimate of differential entropy for 1-D samples.

    Window ``m`` defaults to floor(sqrt(S)); the correction term removes the
    small-sample bias of the raw spacing estimate.
    """
    x = np.sort(np.asarray(x, dtype=float).ravel())
    S = x.size
    if S < 2:
        raise ContractError("need at least two samples")
    if np.any(np.diff(x) <= 0):
        x = x + 1e-12 * np.arange(S)
    m = int(np.floor(np.sqrt(S))) if m is None else int(m)
    m = max(1, min(m, S // 2))
    i = np.arange(S)
    hi = x[np.minimum(i + m, S - 1)]
    lo = x[np.maximum(i - m, 0)]
    h = float(np.mean(np.log(S / (2.0 * m) * (hi - lo))))
    if bias_correct:
        h += (-np.log(S) + np.log(2 * m) - (1 - 2 * m / S) * digamma(2 * m) + digamma(S + 1)
              - 2.0 / S * np.sum(digamma(np.arange(1, m + 1) + m - 1)))
    return h


def entropy_upper_limit(ensemble: Dataset, n_bar: int | None = None, lag: int = 15) -> float:
    """Negative mean per-step output entropy over the scored horizon."""
    if ensemble.reps < 100:
        raise ContractError("entropy estimate needs at least 100 realizations per step")
    end = ensemble.length if n_bar is None else lag + n_bar
    if end > ensemble.length:
        raise ContractError("ensemble horizon too short")
    return -float(np.mean([vasicek_entropy(ensemble.y[:, k]) for k in range(lag, end)]))


def train_benchmark(seed: int = 0, cfg: TrainConfig | None = None, progress: bool = False):
    """Full-scale identification run (8000 samples, 10 realizations) on fresh benchmark data."""
    from .plant import generate_training_data

    cfg = cfg or TrainConfig(seed=seed)
    data = generate_training_data(seed)
    m0 = init_model(data, seed)
    return train(m0, data, cfg, progress=progress)
