"""Meta-state-space model: an encoder and a deterministic transition with a GMM output head.

Inputs and outputs are standardized internally with constants stored in the
model; the meta-state itself is unscaled. The heads map ``xi = (z, u)`` to the
mixture parameters (weight logits, component means, log standard deviations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import jax
import jax.numpy as jnp
import numpy as np

from .diffnet import ContractError, Mlp, NumericError, ParamVector, init_mlp, mlp_forward
from .gmm import SIGMA_FLOOR, DiagGMM

FORMAT_TAG = "mss-model/1"
SIGMA_CEIL = 1e3
HEADS = ("w", "mu", "sigma")


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class MSSModel:
    """Networks are the pytree leaves; dimensions and scaling are static."""

    nets: dict
    n_z: int
    n_u: int
    n_y: int
    n_g: int
    lag: int
    u_mean: tuple = (0.0,)
    u_std: tuple = (1.0,)
    y_mean: tuple = (0.0,)
    y_std: tuple = (1.0,)
    sigma_floor: float = SIGMA_FLOOR
    z_mean: tuple | None = None
    z_std: tuple | None = None

    # -- pytree plumbing -------------------------------------------------
    def tree_flatten(self):
        names = tuple(sorted(self.nets))
        aux = (names, self.n_z, self.n_u, self.n_y, self.n_g, self.lag, self.u_mean, self.u_std,
               self.y_mean, self.y_std, self.sigma_floor, self.z_mean, self.z_std)
        return [self.nets[n] for n in names], aux

    @classmethod
    def tree_unflatten(cls, aux, children):
        names, *rest = aux
        return cls(dict(zip(names, children)), *rest)

    # -- dimensions ------------------------------------------------------
    @property
    def xi_dim(self) -> int:
        return self.n_z + self.n_u

    def check(self) -> "MSSModel":
        expect = {
            "f": (self.xi_dim, self.n_z),
            "enc": (self.lag * (self.n_u + self.n_y), self.n_z),
            "w": (self.xi_dim, self.n_g),
            "mu": (self.xi_dim, self.n_g * self.n_y),
            "sigma": (self.xi_dim, self.n_g * self.n_y),
        }
        for name, (i, o) in expect.items():
            net = self.nets.get(name)
            if net is None:
                raise ContractError(f"missing network {name!r}")
            net.check()
            if (net.in_dim, net.out_dim) != (i, o):
                raise ContractError(f"network {name!r} is {net.in_dim}->{net.out_dim}, expected {i}->{o}")
        return self

    def params(self) -> ParamVector:
        return ParamVector.from_nets(self.nets)

    def with_params(self, theta) -> "MSSModel":
        pv = self.params()
        flat = theta.flat if isinstance(theta, ParamVector) else theta
        return replace(self, nets=pv.to_nets(flat))

    # -- scaling helpers -------------------------------------------------
    def _un(self, u):
        return (u - jnp.asarray(self.u_mean)) / jnp.asarray(self.u_std)

    def _yn(self, y):
        return (y - jnp.asarray(self.y_mean)) / jnp.asarray(self.y_std)

    # -- model maps ------------------------------------------------------
    def encode(self, u_hist, y_hist):
        """Meta-state from the last ``lag`` inputs and outputs (oldest first)."""
        u_hist = jnp.asarray(u_hist, dtype=jnp.float64).reshape(-1, self.n_u)
        y_hist = jnp.asarray(y_hist, dtype=jnp.float64).reshape(-1, self.n_y)
        if u_hist.shape[0] != self.lag or y_hist.shape[0] != self.lag:
            raise ContractError(
                f"encoder needs {self.lag} samples of history, got u:{u_hist.shape[0]} y:{y_hist.shape[0]}")
        return self.encode_batch(u_hist, y_hist)

    def encode_batch(self, u_hist, y_hist):
        """``u_hist`` (..., lag, n_u), ``y_hist`` (..., lag, n_y) -> (..., n_z)."""
        un = self._un(u_hist)
        yn = self._yn(y_hist)
        flat = jnp.concatenate([un.reshape(*un.shape[:-2], -1), yn.reshape(*yn.shape[:-2], -1)], axis=-1)
        return mlp_forward(self.nets["enc"], flat)

    def _xi(self, z, u):
        u = jnp.asarray(u, dtype=jnp.float64)
        u = jnp.broadcast_to(u.reshape(u.shape if u.ndim else (1,)), z.shape[:-1] + (self.n_u,))
        return jnp.concatenate([z, self._un(u)], axis=-1)

    def step(self, z, u):
        """Next meta-state; no randomness."""
        z = jnp.asarray(z, dtype=jnp.float64)
        return mlp_forward(self.nets["f"], self._xi(z, u))

    def head(self, z, u):
        """Raw mixture arrays ``(w, mu, sigma)`` with batch axes in front."""
        z = jnp.asarray(z, dtype=jnp.float64)
        xi = self._xi(z, u)
        batch = xi.shape[:-1]
        w = jax.nn.softmax(mlp_forward(self.nets["w"], xi), axis=-1)
        mu_n = mlp_forward(self.nets["mu"], xi).reshape(*batch, self.n_g, self.n_y)
        s_n = mlp_forward(self.nets["sigma"], xi).reshape(*batch, self.n_g, self.n_y)
        y_std = jnp.asarray(self.y_std)
        mu = jnp.asarray(self.y_mean) + y_std * mu_n
        sigma = jnp.clip(y_std * jnp.exp(s_n), self.sigma_floor, SIGMA_CEIL)
        return w, mu, sigma

    def output_pdf(self, z, u) -> DiagGMM:
        """Predicted output distribution at ``(z, u)``."""
        return DiagGMM(*self.head(z, u))

    def rollout(self, z0, u_seq):
        """Meta-states (T+1, n_z) and stacked pdf arrays for T inputs."""
        u_seq = jnp.asarray(u_seq, dtype=jnp.float64).reshape(-1, self.n_u)
        if u_seq.shape[0] < 1:
            raise ContractError("rollout needs at least one input")
        zs, pdfs = _rollout(self, jnp.asarray(z0, dtype=jnp.float64), u_seq)
        zs_np = np.asarray(zs)
        if not np.all(np.isfinite(zs_np)):
            bad = int(np.argmax(~np.all(np.isfinite(zs_np), axis=1)))
            raise NumericError(f"non-finite meta-state at rollout step {bad}")
        return zs, DiagGMM(*pdfs)

    # -- serialization ---------------------------------------------------
    def to_json(self) -> dict:
        pv = self.params()
        doc = pv.to_json()
        return {
            "format": FORMAT_TAG,
            "dims": {"n_z": self.n_z, "n_u": self.n_u, "n_y": self.n_y, "n_g": self.n_g},
            "lag": self.lag,
            "param_layouts": doc["layout"],
            "param_values": doc["values"],
            "sigma_floor": self.sigma_floor,
            "scaling": {"u_mean": list(self.u_mean), "u_std": list(self.u_std),
                        "y_mean": list(self.y_mean), "y_std": list(self.y_std)},
            "meta_state_stats": None if self.z_mean is None else
            {"mean": list(self.z_mean), "std": list(self.z_std)},
        }

    @classmethod
    def from_json(cls, doc) -> "MSSModel":
        if doc.get("format") != FORMAT_TAG:
            raise ContractError(f"unknown model format {doc.get('format')!r}")
        pv = ParamVector.from_json({"layout": doc["param_layouts"], "values": doc["param_values"]})
        nets = {k: Mlp(tuple((jnp.asarray(w), jnp.asarray(b)) for w, b in v.layers))
                for k, v in pv.to_nets().items()}
        sc = doc["scaling"]
        stats = doc.get("meta_state_stats")
        d = doc["dims"]
        model = cls(nets, d["n_z"], d["n_u"], d["n_y"], d["n_g"], doc["lag"],
                    tuple(sc["u_mean"]), tuple(sc["u_std"]), tuple(sc["y_mean"]), tuple(sc["y_std"]),
                    doc["sigma_floor"],
                    None if stats is None else tuple(stats["mean"]),
                    None if stats is None else tuple(stats["std"]))
        return model.check()

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "MSSModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@jax.jit
def _rollout(model: MSSModel, z0, u_seq):
    def body(z, u):
        return model.step(z, u), (z, model.head(z, u))

    z_last, (zs, pdfs) = jax.lax.scan(body, z0, u_seq)
    return jnp.concatenate([zs, z_last[None]], axis=0), pdfs


def build_model(rng: np.random.Generator, n_z: int = 3, n_u: int = 1, n_y: int = 1, n_g: int = 12,
                lag: int = 15, enc_hidden=(32, 32), f_hidden=(8, 8), head_hidden=(32, 32),
                scaling: dict | None = None) -> MSSModel:
    """Randomly initialized model with the benchmark network sizes by default."""
    xi = n_z + n_u
    nets = {
        "enc": init_mlp(rng, [lag * (n_u + n_y), *enc_hidden, n_z]),
        "f": init_mlp(rng, [xi, *f_hidden, n_z]),
        "w": init_mlp(rng, [xi, *head_hidden, n_g], out_scale=0.1),
        "mu": init_mlp(rng, [xi, *head_hidden, n_g * n_y]),
        "sigma": init_mlp(rng, [xi, *head_hidden, n_g * n_y], out_scale=0.1),
    }
    sc = scaling or {}
    model = MSSModel(nets, n_z, n_u, n_y, n_g, lag,
                     tuple(sc.get("u_mean", (0.0,) * n_u)), tuple(sc.get("u_std", (1.0,) * n_u)),
                     tuple(sc.get("y_mean", (0.0,) * n_y)), tuple(sc.get("y_std", (1.0,) * n_y)))
    return model.check()


def constant_model(n_z=3, n_u=1, n_y=1, n_g=2, lag=3, f_bias=None, enc_bias=None,
                   mu_bias=None, log_sigma_bias=None) -> MSSModel:
    """All-zero weights: every map returns its output bias (test fixture helper)."""
    def zero_net(n_in, n_out, bias):
        b = jnp.zeros(n_out) if bias is None else jnp.asarray(bias, dtype=jnp.float64)
        return Mlp(((jnp.zeros((n_in, n_out)), b),))

    xi = n_z + n_u
    nets = {
        "enc": zero_net(lag * (n_u + n_y), n_z, enc_bias),
        "f": zero_net(xi, n_z, f_bias),
        "w": zero_net(xi, n_g, None),
        "mu": zero_net(xi, n_g * n_y, mu_bias),
        "sigma": zero_net(xi, n_g * n_y, log_sigma_bias),
    }
    return MSSModel(nets, n_z, n_u, n_y, n_g, lag, (0.0,) * n_u, (1.0,) * n_u, (0.0,) * n_y, (1.0,) * n_y)


def linear_model(A, B, C, sigma: float = 0.1, lag: int = 3, enc_bias=None) -> MSSModel:
    """Single-component model with ``z+ = A z + B u`` and mean ``C [z; u]`` (test fixture helper).

    Every network is one affine layer, so the dynamics are exactly linear.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    n_z, n_u = B.shape
    C = np.asarray(C, float).reshape(1, n_z + n_u)
    xi = n_z + n_u

    def affine(W, b):
        return Mlp(((jnp.asarray(W, dtype=jnp.float64), jnp.asarray(b, dtype=jnp.float64)),))

    enc_b = np.zeros(n_z) if enc_bias is None else np.asarray(enc_bias, float)
    nets = {
        "enc": affine(np.zeros((lag * (n_u + 1), n_z)), enc_b),
        "f": affine(np.vstack([A.T, B.T]), np.zeros(n_z)),
        "w": affine(np.zeros((xi, 1)), np.zeros(1)),
        "mu": affine(C.T, np.zeros(1)),
        "sigma": affine(np.zeros((xi, 1)), np.full(1, np.log(sigma))),
    }
    return MSSModel(nets, n_z, n_u, 1, 1, lag, (0.0,) * n_u, (1.0,) * n_u, (0.0,), (1.0,)).check()


# module-level conveniences mirroring the operation names


def encode(m: MSSModel, u_hist, y_hist):
    return m.encode(u_hist, y_hist)


def step(m: MSSModel, z, u):
    return m.step(z, u)


def output_pdf(m: MSSModel, z, u) -> DiagGMM:
    return m.output_pdf(z, u)


def rollout(m: MSSModel, z0, u_seq):
    return m.rollout(z0, u_seq)
