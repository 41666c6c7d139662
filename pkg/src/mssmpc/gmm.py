"""Diagonal-covariance Gaussian mixtures: density, CDF, chance margins, KL.

Every evaluation routine is written with ``jax.numpy`` so it can sit inside a
differentiated objective; numpy inputs work as well.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from .diffnet import ContractError, norm_cdf

SIGMA_FLOOR = 1e-4
LOG_DENSITY_FLOOR = float(np.log(1e-300))
_LOG_2PI = float(np.log(2.0 * np.pi))


class DiagGMM(NamedTuple):
    """``w`` (n_G,), ``mu`` (n_G, n_y), ``sigma`` (n_G, n_y)."""

    w: object
    mu: object
    sigma: object

    @property
    def n_components(self) -> int:
        return int(np.shape(self.w)[0])

    @property
    def n_y(self) -> int:
        return int(np.shape(self.mu)[1])

    def check(self, tol: float = 1e-10, sigma_floor: float = SIGMA_FLOOR) -> "DiagGMM":
        w, mu, sigma = (np.asarray(a, dtype=float) for a in self)
        if w.ndim != 1 or mu.ndim != 2 or sigma.shape != mu.shape or mu.shape[0] != w.shape[0]:
            raise ContractError(f"inconsistent shapes w{w.shape} mu{mu.shape} sigma{sigma.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ContractError("non-finite mixture parameters")
        if abs(w.sum() - 1.0) > tol or np.any(w <= 0):
            raise ContractError(f"weights not on the simplex (sum={w.sum():.12g}, min={w.min():.3g})")
        if np.any(sigma < sigma_floor * (1 - 1e-12)):
            raise ContractError(f"standard deviation below floor {sigma_floor}")
        return self

    def to_json(self) -> dict:
        return {
            "w": np.asarray(self.w, dtype=float).tolist(),
            "mu": np.asarray(self.mu, dtype=float).tolist(),
            "sigma": np.asarray(self.sigma, dtype=float).tolist(),
        }

    @classmethod
    def from_json(cls, doc) -> "DiagGMM":
        return cls(np.asarray(doc["w"], float), np.asarray(doc["mu"], float), np.asarray(doc["sigma"], float))

    def numpy(self) -> "DiagGMM":
        return DiagGMM(*(np.asarray(a, dtype=float) for a in self))


def scalar_gmm(weights, means, stds) -> DiagGMM:
    """Convenience constructor for a one-dimensional mixture."""
    w = np.asarray(weights, dtype=float)
    return DiagGMM(w / w.sum(), np.asarray(means, float).reshape(-1, 1), np.asarray(stds, float).reshape(-1, 1))


@dataclass(frozen=True)
class ChanceSpec:
    """Output chance constraints P{y >= y_min} >= p_min and P{y <= y_max} >= p_max.

    Either side may be ``None``.
    """

    y_min: Optional[np.ndarray] = None
    y_max: Optional[np.ndarray] = None
    p_min: float = 0.0
    p_max: float = 0.0

    def __post_init__(self):
        if self.y_min is not None:
            object.__setattr__(self, "y_min", np.atleast_1d(np.asarray(self.y_min, dtype=float)))
        if self.y_max is not None:
            object.__setattr__(self, "y_max", np.atleast_1d(np.asarray(self.y_max, dtype=float)))
        for p in (self.p_min, self.p_max):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"probability level {p} outside [0, 1]")
        if self.y_min is not None and self.y_max is not None and np.any(self.y_min >= self.y_max):
            raise ContractError("y_min must be below y_max element-wise")

    @property
    def has_lower(self) -> bool:
        return self.y_min is not None and self.p_min > 0.0

    @property
    def has_upper(self) -> bool:
        return self.y_max is not None and self.p_max > 0.0

    @property
    def n_active(self) -> int:
        return int(self.has_lower) + int(self.has_upper)

    def to_json(self) -> dict:
        return {
            "y_min": None if self.y_min is None else self.y_min.tolist(),
            "y_max": None if self.y_max is None else self.y_max.tolist(),
            "p_min": self.p_min,
            "p_max": self.p_max,
        }

    @classmethod
    def from_json(cls, doc) -> "ChanceSpec":
        return cls(doc.get("y_min"), doc.get("y_max"), doc.get("p_min", 0.0), doc.get("p_max", 0.0))


def log_pdf(g: DiagGMM, y):
    """Mixture log-density; ``y`` is (n_y,) or (m, n_y)."""
    y = jnp.asarray(y)
    yb = y[..., None, :]  # (..., 1, n_y)
    z = (yb - g.mu) / g.sigma
    comp = -0.5 * jnp.sum(z * z, axis=-1) - jnp.sum(jnp.log(g.sigma), axis=-1) - 0.5 * g.mu.shape[-1] * _LOG_2PI
    return logsumexp(comp + jnp.log(g.w), axis=-1)


def pdf(g: DiagGMM, y):
    return jnp.exp(log_pdf(g, y))


def prob_leq(g: DiagGMM, y_max):
    """Joint CDF P{y <= y_max} of a diagonal mixture."""
    z = (jnp.asarray(y_max) - g.mu) / g.sigma
    return jnp.sum(g.w * jnp.prod(norm_cdf(z), axis=-1))


def prob_geq(g: DiagGMM, y_min):
    """P{y >= y_min}, taken as the complement of the CDF at ``y_min``."""
    return 1.0 - prob_leq(g, y_min)


def chance_margins(g: DiagGMM, spec: ChanceSpec):
    """``(p_min - P{y >= y_min}, p_max - P{y <= y_max})``; feasible iff both <= 0.

    An absent side is reported as ``None``.
    """
    g_min = None if spec.y_min is None else spec.p_min - prob_geq(g, spec.y_min)
    g_max = None if spec.y_max is None else spec.p_max - prob_leq(g, spec.y_max)
    return g_min, g_max


def margin_vector(g: DiagGMM, spec: ChanceSpec):
    """Active chance margins stacked as an array (possibly empty)."""
    out = []
    if spec.has_lower:
        out.append(spec.p_min - prob_geq(g, spec.y_min))
    if spec.has_upper:
        out.append(spec.p_max - prob_leq(g, spec.y_max))
    return jnp.stack(out) if out else jnp.zeros(0)


def moments(g: DiagGMM):
    """Mixture mean (n_y,) and covariance (n_y, n_y)."""
    mean = jnp.sum(g.w[:, None] * g.mu, axis=0)
    d = g.mu - mean
    var = jnp.diag(jnp.sum(g.w[:, None] * g.sigma**2, axis=0)) + jnp.einsum("i,ij,ik->jk", g.w, d, d)
    return mean, var


def sample(g: DiagGMM, m: int, rng: np.random.Generator, return_labels: bool = False):
    """Draw ``m`` points: a component by weight, then independent normals."""
    if m < 1:
        raise ContractError("sample count must be >= 1")
    w, mu, sigma = g.numpy()
    labels = rng.choice(w.size, size=m, p=w / w.sum())
    y = mu[labels] + sigma[labels] * rng.standard_normal((m, mu.shape[1]))
    return (y, labels) if return_labels else y


class KLEstimate(NamedTuple):
    value: float
    n_clamped: int


def kl_terms(log_pref_values, q: DiagGMM, samples):
    """Differentiable core: mean(log p_ref - log q) with log q floored."""
    log_q = log_pdf(q, samples)
    return jnp.mean(log_pref_values - jnp.maximum(log_q, LOG_DENSITY_FLOOR))


def kl_mc(samples, log_pref, q: DiagGMM) -> KLEstimate:
    """Monte-Carlo KL(p_ref || q) on a caller-owned sample set.

    ``log_pref`` is a callable returning log p_ref at the samples, or the
    precomputed values. Samples where q falls below 1e-300 are counted.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    lp = np.asarray(log_pref(samples) if callable(log_pref) else log_pref, dtype=float)
    log_q = np.asarray(log_pdf(q, samples))
    n_clamped = int(np.sum(log_q < LOG_DENSITY_FLOOR))
    value = float(np.mean(lp - np.maximum(log_q, LOG_DENSITY_FLOOR)))
    return KLEstimate(value, n_clamped)


def gmm_log_density(g: DiagGMM) -> Callable:
    """Reference log-density callable for :func:`kl_mc`."""
    return lambda y: np.asarray(log_pdf(g, y))


def save_samples_csv(path, samples) -> None:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"y{j}" for j in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(float(v)) for v in row])


def load_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.asarray([[float(v) for v in r] for r in rows[1:]], dtype=float)


def dumps(g: DiagGMM) -> str:
    return json.dumps(g.to_json())


def chance_params(spec: ChanceSpec, n_y: int = 1) -> dict:
    """Array form of a :class:`ChanceSpec` with fixed shapes (for traced code)."""
    return {
        "y_min": np.zeros(n_y) if spec.y_min is None else np.asarray(spec.y_min, float),
        "y_max": np.zeros(n_y) if spec.y_max is None else np.asarray(spec.y_max, float),
        "p_min": float(spec.p_min),
        "p_max": float(spec.p_max),
        "active": np.array([spec.has_lower, spec.has_upper], dtype=float),
    }


def masked_margins(g: DiagGMM, cp: dict):
    """Both chance margins as a length-2 array; an inactive side reads -1."""
    m = jnp.stack([cp["p_min"] - prob_geq(g, cp["y_min"]), cp["p_max"] - prob_leq(g, cp["y_max"])])
    return jnp.where(cp["active"] > 0, m, -1.0)
