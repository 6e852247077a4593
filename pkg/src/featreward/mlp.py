"""Small feed-forward network with hand-written backprop, in float64.

Inputs are affinely normalized from the schema bounds to [0, 1] before the
first layer when the parameters carry a schema. Hidden layers use tanh or
relu, the output layer is the identity and has width 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_types import FeatureSchema

ACTIVATIONS = ("tanh", "relu")


@dataclass
class MLPParams:
    layer_dims: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]  # W[k] has shape (out, in)
    biases: list[np.ndarray]
    schema: FeatureSchema | None = None

    def __post_init__(self) -> None:
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"bad layer_dims {self.layer_dims}")
        if self.layer_dims[-1] != 1:
            raise ValueError("last layer must have width 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.schema is not None and len(self.schema) != self.layer_dims[0]:
            raise ValueError(
                f"input dim {self.layer_dims[0]} does not match schema length {len(self.schema)}"
            )
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[k + 1], self.layer_dims[k])
            if w.shape != want or b.shape != (want[0],):
                raise ValueError(f"layer {k}: expected W{want}, b({want[0]},)")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MLPParams":
        return MLPParams(
            self.layer_dims,
            self.activation,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.schema,
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameters in canonical order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "MLPParams":
        p = self.copy()
        i = 0
        for a in p.arrays():
            a[...] = np.reshape(flat[i : i + a.size], a.shape)
            i += a.size
        if i != flat.size:
            raise ValueError("flat vector has wrong length")
        return p

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "params": self.flatten().tolist(),
            "schema": None if self.schema is None else self.schema.to_dict(),
            "schema_fingerprint": None if self.schema is None else self.schema.fingerprint(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPParams":
        schema = FeatureSchema.from_dict(d["schema"]) if d.get("schema") else None
        if schema is not None and d.get("schema_fingerprint") not in (None, schema.fingerprint()):
            raise ValueError("schema fingerprint mismatch in checkpoint")
        shell = zeros(d["layer_dims"], d["activation"], schema)
        return shell.with_flat(np.asarray(d["params"], dtype=float))


def zeros(layer_dims: Sequence[int], activation: str = "tanh", schema: FeatureSchema | None = None) -> MLPParams:
    dims = tuple(layer_dims)
    ws = [np.zeros((dims[k + 1], dims[k])) for k in range(len(dims) - 1)]
    bs = [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)]
    return MLPParams(dims, activation, ws, bs, schema)


def init_params(
    layer_dims: Sequence[int],
    activation: str = "tanh",
    seed: int = 0,
    schema: FeatureSchema | None = None,
) -> MLPParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    p = zeros(layer_dims, activation, schema)
    for w in p.weights:
        fan_out, fan_in = w.shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-a, a, size=w.shape)
    return p


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(float)


def prepare_inputs(params: MLPParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ValueError(f"dimension mismatch: expected {params.layer_dims[0]} inputs, got {x.shape[-1]}")
    if params.schema is not None:
        x = params.schema.normalize(x)
    return x


def forward_cache(params: MLPParams, x) -> tuple[np.ndarray, list]:
    """Forward pass keeping (pre-activation, activation) per layer for backprop."""
    h = prepare_inputs(params, x)
    cache = [(None, h)]
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if k == last else _act(z, params.activation)
        cache.append((z, h))
    return h[:, 0], cache


def forward(params: MLPParams, x) -> np.ndarray:
    """Batched scalar outputs, shape (n,)."""
    return forward_cache(params, x)[0]


def backward(params: MLPParams, cache: list, dout: np.ndarray) -> MLPParams:
    """Gradient of sum_i dout[i] * f(x_i) with respect to every parameter."""
    grad = zeros(params.layer_dims, params.activation, params.schema)
    delta = np.asarray(dout, dtype=float)[:, None]
    for k in range(params.n_layers - 1, -1, -1):
        h_prev = cache[k][1]
        grad.weights[k][...] = delta.T @ h_prev
        grad.biases[k][...] = delta.sum(axis=0)
        if k > 0:
            z, a = cache[k]
            delta = (delta @ params.weights[k]) * _act_grad(z, a, params.activation)
    return grad


def save(params: MLPParams, path, extra: dict | None = None) -> None:
    d = {"format": "featreward-mlp/1", **params.to_dict()}
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=1)
        fh.write("\n")


def load(path) -> tuple[MLPParams, dict]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return MLPParams.from_dict(d), d
