"""Minimal dense feed-forward network engine with reverse-mode gradients.

Double precision throughout; parameter initialisation is fully determined by
the spec seed so training trajectories are reproducible bit-for-bit on one
platform.  Gradients follow the convention that the caller supplies the loss
gradient per output row already scaled (e.g. by 1/batch for a mean loss);
``backward`` then sums over the batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

__all__ = [
    "Activation",
    "NetworkSpec",
    "Parameters",
    "ForwardCache",
    "Network",
    "OptimizerConfig",
    "Sgd",
    "Adam",
    "make_optimizer",
    "bce_loss",
    "serialize_parameters",
    "deserialize_parameters",
]

Activation = Literal["relu", "tanh", "sigmoid", "linear"]

_ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable]] = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a**2),
    "sigmoid": (lambda z: 1.0 / (1.0 + np.exp(-z)), lambda z, a: a * (1.0 - a)),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes plus activation choices; at least one layer transition."""

    layer_sizes: tuple[int, ...]
    hidden_activation: Activation = "tanh"
    output_activation: Activation = "linear"
    seed: int = 0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least one layer transition")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive: {self.layer_sizes}")
        for name in (self.hidden_activation, self.output_activation):
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def activation_at(self, layer: int) -> str:
        return self.output_activation if layer == self.n_layers - 1 else self.hidden_activation


class Parameters:
    """Per-layer weight matrices (out, in) and bias vectors (out,)."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        if len(weights) != len(biases):
            raise ValueError("weights and biases must pair up")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")

    @classmethod
    def zeros_like(cls, other: "Parameters") -> "Parameters":
        return cls(
            [np.zeros_like(w) for w in other.weights],
            [np.zeros_like(b) for b in other.biases],
        )

    def copy(self) -> "Parameters":
        return Parameters([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = values[pos : pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = values[pos : pos + b.size]
            pos += b.size
        if pos != values.size:
            raise ValueError(f"flat vector has {values.size} entries, expected {pos}")

    def matches(self, spec: NetworkSpec) -> bool:
        if len(self.weights) != spec.n_layers:
            return False
        return all(
            w.shape == (spec.layer_sizes[i + 1], spec.layer_sizes[i])
            for i, w in enumerate(self.weights)
        )


def init_parameters(spec: NetworkSpec) -> Parameters:
    """Glorot-uniform weights, zero biases, seeded from the spec."""

    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Parameters(weights, biases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]


class Network:
    """Feed-forward network bound to a parameter set."""

    def __init__(self, spec: NetworkSpec, params: Parameters | None = None) -> None:
        self.spec = spec
        self.params = params if params is not None else init_parameters(spec)
        if not self.params.matches(spec):
            raise ValueError("parameters do not match the network spec")

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.spec.layer_sizes[0]:
            raise ValueError(
                f"input has {a.shape[1]} features, network expects {self.spec.layer_sizes[0]}"
            )
        cache = ForwardCache(a, [], [])
        for layer, (w, b) in enumerate(zip(self.params.weights, self.params.biases)):
            z = a @ w.T + b
            act, _ = _ACTIVATIONS[self.spec.activation_at(layer)]
            a = act(z)
            cache.pre_activations.append(z)
            cache.activations.append(a)
        out = a[0] if squeeze else a
        return out, cache

    def predict(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def backward(
        self,
        cache: ForwardCache,
        grad_output: np.ndarray,
        *,
        grad_is_preactivation: bool = False,
    ) -> tuple[Parameters, np.ndarray]:
        """Chain the output gradient back to parameter and input gradients.

        ``grad_output`` has the shape of the forward output.  With
        ``grad_is_preactivation`` the gradient is taken with respect to the
        final pre-activation instead (the numerically stable route for
        sigmoid + cross-entropy).
        """

        g = np.asarray(grad_output, dtype=float)
        squeeze = g.ndim == 1
        if squeeze:
            g = g[None, :]
        if g.shape != cache.activations[-1].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match forward output "
                f"{cache.activations[-1].shape}"
            )
        grads = Parameters.zeros_like(self.params)
        n_layers = self.spec.n_layers
        delta = g
        for layer in range(n_layers - 1, -1, -1):
            if not (layer == n_layers - 1 and grad_is_preactivation):
                _, dact = _ACTIVATIONS[self.spec.activation_at(layer)]
                delta = delta * dact(cache.pre_activations[layer], cache.activations[layer])
            below = cache.activations[layer - 1] if layer > 0 else cache.inputs
            grads.weights[layer][...] = delta.T @ below
            grads.biases[layer][...] = delta.sum(axis=0)
            delta = delta @ self.params.weights[layer]
        grad_input = delta[0] if squeeze else delta
        return grads, grad_input


@dataclass(frozen=True)
class OptimizerConfig:
    kind: Literal["sgd", "adam"] = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")


class Sgd:
    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config

    def step(self, params: Parameters, grads: Parameters) -> None:
        lr = self.config.learning_rate
        for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
            p -= lr * g


class Adam:
    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config
        self._m: Parameters | None = None
        self._v: Parameters | None = None
        self._t = 0

    def step(self, params: Parameters, grads: Parameters) -> None:
        cfg = self.config
        if self._m is None:
            self._m = Parameters.zeros_like(params)
            self._v = Parameters.zeros_like(params)
        self._t += 1
        correction1 = 1.0 - cfg.beta1**self._t
        correction2 = 1.0 - cfg.beta2**self._t
        for p, g, m, v in zip(
            params.weights + params.biases,
            grads.weights + grads.biases,
            self._m.weights + self._m.biases,
            self._v.weights + self._v.biases,
        ):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
            m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g**2
            p -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.epsilon)


def make_optimizer(config: OptimizerConfig) -> Sgd | Adam:
    return Sgd(config) if config.kind == "sgd" else Adam(config)


def bce_loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy with probability clipping."""

    p = np.clip(np.asarray(probabilities, dtype=float).reshape(-1), 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=float).reshape(-1)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def serialize_parameters(spec: NetworkSpec, params: Parameters) -> str:
    """Textual snapshot: spec header plus the flat parameter vector."""

    payload = {
        "layer_sizes": list(spec.layer_sizes),
        "hidden_activation": spec.hidden_activation,
        "output_activation": spec.output_activation,
        "seed": spec.seed,
        "values": [float(v) for v in params.flat()],
    }
    return json.dumps(payload)


def deserialize_parameters(text: str) -> tuple[NetworkSpec, Parameters]:
    payload = json.loads(text)
    spec = NetworkSpec(
        tuple(payload["layer_sizes"]),
        payload["hidden_activation"],
        payload["output_activation"],
        payload["seed"],
    )
    params = init_parameters(spec)
    params.set_flat(np.asarray(payload["values"], dtype=float))
    return spec, params
