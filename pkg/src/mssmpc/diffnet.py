"""Feedforward tanh networks with flat parameter vectors and exact derivatives.

Reverse-mode accumulation is delegated to JAX. This module fixes the small
surface the rest of the package relies on: network evaluation and parameter
flattening with an explicit layout, plus gradients and input Jacobians that
report where a non-finite value first appears.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import erf as _erf


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared while evaluating or differentiating."""


@jax.tree_util.register_pytree_node_class
@dataclass(frozen=True)
class Mlp:
    """Dense network, tanh on every hidden layer and a linear output layer.

    ``layers`` is a tuple of ``(weight, bias)`` with weight shaped
    ``(in_dim, out_dim)`` so that a layer maps ``x @ W + b``.
    """

    layers: tuple

    def tree_flatten(self):
        leaves = []
        for w, b in self.layers:
            leaves.extend((w, b))
        return leaves, len(self.layers)

    @classmethod
    def tree_unflatten(cls, n_layers, leaves):
        return cls(tuple((leaves[2 * i], leaves[2 * i + 1]) for i in range(n_layers)))

    @property
    def in_dim(self) -> int:
        return int(np.shape(self.layers[0][0])[0])

    @property
    def out_dim(self) -> int:
        return int(np.shape(self.layers[-1][0])[1])

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [int(np.shape(w)[1]) for w, _ in self.layers]

    def check(self) -> None:
        for i, (w, b) in enumerate(self.layers):
            if np.ndim(w) != 2 or np.ndim(b) != 1 or np.shape(w)[1] != np.shape(b)[0]:
                raise ContractError(f"layer {i}: weight/bias shapes do not match")
            if i > 0 and np.shape(w)[0] != np.shape(self.layers[i - 1][0])[1]:
                raise ContractError(f"layer {i}: input dim does not chain with layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {i}: non-finite parameters")


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], out_scale: float = 1.0) -> Mlp:
    """Glorot-uniform weights, zero biases; ``out_scale`` shrinks the last layer."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-lim, lim, size=(n_in, n_out))
        if i == len(sizes) - 2:
            w = w * out_scale
        layers.append((jnp.asarray(w), jnp.zeros(n_out)))
    return Mlp(tuple(layers))


def mlp_forward(net: Mlp, x):
    """Evaluate ``net`` at ``x``; leading batch axes are allowed."""
    if np.shape(x)[-1] != net.in_dim:
        raise ContractError(f"input has length {np.shape(x)[-1]}, network expects {net.in_dim}")
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        h = h @ w + b
        if i < last:
            h = jnp.tanh(h)
    return h


def erf(x):
    return _erf(x)


def norm_cdf(x):
    """Standard normal CDF written through erf."""
    return 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))


# ---------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class ParamVector:
    """All trainable parameters as one float64 vector plus its layout.

    The layout is a list of ``(net_name, layer_index, kind, shape)`` entries in
    storage order, ``kind`` being ``"W"`` or ``"b"``.
    """

    flat: np.ndarray
    layout: tuple

    @classmethod
    def from_nets(cls, nets: Mapping[str, Mlp]) -> "ParamVector":
        chunks, layout = [], []
        for name in sorted(nets):
            for i, (w, b) in enumerate(nets[name].layers):
                for kind, arr in (("W", w), ("b", b)):
                    a = np.asarray(arr, dtype=np.float64)
                    layout.append((name, i, kind, tuple(a.shape)))
                    chunks.append(a.ravel())
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, tuple(layout))

    def to_nets(self, flat=None) -> dict[str, Mlp]:
        """Rebuild the networks; ``flat`` may be a traced array."""
        flat = self.flat if flat is None else flat
        if np.shape(flat) != np.shape(self.flat):
            raise ContractError(f"flat vector has shape {np.shape(flat)}, layout needs {np.shape(self.flat)}")
        pieces: dict[str, dict[int, dict[str, object]]] = {}
        pos = 0
        for name, i, kind, shape in self.layout:
            size = int(np.prod(shape))
            pieces.setdefault(name, {}).setdefault(i, {})[kind] = flat[pos:pos + size].reshape(shape)
            pos += size
        return {
            name: Mlp(tuple((layers[i]["W"], layers[i]["b"]) for i in sorted(layers)))
            for name, layers in pieces.items()
        }

    def __len__(self) -> int:
        return int(self.flat.size)

    def to_json(self) -> dict:
        return {
            "layout": [[n, i, k, list(s)] for n, i, k, s in self.layout],
            # repr() of a Python float round-trips exactly
            "values": [float(v) for v in self.flat],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ParamVector":
        layout = tuple((n, int(i), k, tuple(int(d) for d in s)) for n, i, k, s in doc["layout"])
        flat = np.asarray(doc["values"], dtype=np.float64)
        expected = sum(int(np.prod(s)) for *_, s in layout)
        if flat.size != expected:
            raise ContractError(f"values has {flat.size} entries, layout needs {expected}")
        return cls(flat, layout)

    def dumps(self) -> str:
        return json.dumps(self.to_json())


# ---------------------------------------------------------------------------
# derivatives


@dataclass(frozen=True)
class GradResult:
    value: float
    grad: np.ndarray


def _locate_nonfinite(fn: Callable, *args) -> str:
    """Re-run ``fn`` with JAX's NaN/Inf checks on to name the first bad primitive."""
    try:
        with jax.debug_nans(True), jax.debug_infs(True):
            jax.block_until_ready(fn(*args))
    except FloatingPointError as exc:
        msg = str(exc).splitlines()[0]
        return msg
    return "non-finite output (primitive not isolated)"


def grad_wrt_params(f: Callable, theta) -> GradResult:
    """Value and reverse-mode gradient of scalar ``f`` at ``theta``.

    ``theta`` is a :class:`ParamVector` (``f`` then receives the flat vector)
    or any 1-D array.
    """
    x = jnp.asarray(theta.flat if isinstance(theta, ParamVector) else theta, dtype=jnp.float64)
    vg = jax.value_and_grad(f)
    value, grad = vg(x)
    value = float(value)
    grad = np.asarray(grad)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise NumericError(_locate_nonfinite(vg, x))
    return GradResult(value, grad)


def jacobian_wrt_input(f: Callable, x) -> np.ndarray:
    """Dense Jacobian ``J[i, j] = d f_i / d x_j`` by reverse accumulation."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if not np.all(np.isfinite(np.asarray(x))):
        raise ContractError("jacobian requested at a non-finite point")
    jac = jax.jacrev(f)
    out = np.atleast_2d(np.asarray(jac(x)))
    if not np.all(np.isfinite(out)):
        raise NumericError(_locate_nonfinite(jac, x))
    return out
