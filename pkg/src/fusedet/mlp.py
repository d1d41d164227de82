"""Small dense networks with hand-written forward/backward passes.

Parameters live in plain float64 numpy arrays. Every forward returns the
output plus a cache; the matching backward consumes an upstream gradient,
accumulates parameter gradients into a name-keyed dict, and returns the
input gradient. No general autodiff, just affine layers and ReLU.
"""

from __future__ import annotations

import numpy as np

RELU = "relu"
IDENTITY = "identity"


class Mlp:
    """Stack of affine layers with per-layer ReLU or identity activation.

    ``input_scale`` is a fixed (non-learned) multiplier applied to the input
    before the first layer; wide pooled-feature inputs use it to keep the
    first layer's effective curvature independent of fan-in.
    """

    def __init__(self, weights, biases, activations, input_scale=1.0):
        if not (len(weights) == len(biases) == len(activations)):
            raise ValueError("layer count mismatch")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} expects input width {weights[i].shape[1]}, "
                    f"previous layer outputs {weights[i - 1].shape[0]}"
                )
        for act in activations:
            if act not in (RELU, IDENTITY):
                raise ValueError(f"unknown activation {act!r}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in biases]
        self.activations = list(activations)
        self.input_scale = float(input_scale)

    @classmethod
    def create(cls, widths, rng, hidden_act=RELU, out_act=IDENTITY, input_scale=1.0):
        """He-style seeded initialization for the given layer widths.

        Biases get small nonzero values so degenerate all-zero inputs never
        park a ReLU pre-activation exactly on its kink.
        """
        weights, biases, acts = [], [], []
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(widths[i + 1], fan_in)))
            biases.append(rng.uniform(-0.1, 0.1, size=widths[i + 1]))
            acts.append(hidden_act if i < len(widths) - 2 else out_act)
        return cls(weights, biases, acts, input_scale=input_scale)

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_width(self) -> int:
        return self.weights[-1].shape[0]

    def forward(self, x: np.ndarray):
        """Run the net on (D,) or (N, D) input; returns (y, cache)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x.reshape(1, -1) if squeeze else x
        if a.shape[1] != self.in_width:
            raise ValueError(f"input width {a.shape[1]} != expected {self.in_width}")
        if self.input_scale != 1.0:
            a = a * self.input_scale
        inputs, pre_acts = [], []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w.T + b
            pre_acts.append(z)
            a = np.maximum(z, 0.0) if act == RELU else z
        cache = (inputs, pre_acts, squeeze)
        return (a[0] if squeeze else a), cache

    def backward(self, cache, dy: np.ndarray, grads: dict, prefix: str) -> np.ndarray:
        """Backprop dy through the net; accumulates dW/db into `grads`."""
        inputs, pre_acts, squeeze = cache
        d = np.asarray(dy, dtype=np.float64)
        if squeeze:
            d = d.reshape(1, -1)
        for i in range(len(self.weights) - 1, -1, -1):
            if self.activations[i] == RELU:
                d = d * (pre_acts[i] > 0)
            _accumulate(grads, f"{prefix}.w{i}", d.T @ inputs[i])
            _accumulate(grads, f"{prefix}.b{i}", d.sum(axis=0))
            d = d @ self.weights[i]
        if self.input_scale != 1.0:
            d = d * self.input_scale
        return d[0] if squeeze else d

    def named_params(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b

    def set_param(self, name: str, value: np.ndarray):
        kind, idx = name[0], int(name[1:])
        target = self.weights if kind == "w" else self.biases
        if value.shape != target[idx].shape:
            raise ValueError(f"shape mismatch for {name}")
        target[idx] = value.astype(np.float64)


def _accumulate(grads: dict, name: str, value: np.ndarray):
    # backward passes hand over freshly allocated arrays; take ownership
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


def mlp_apply(net: Mlp, x: np.ndarray):
    """Forward pass returning (y, gradient closure).

    The closure maps an upstream gradient dL/dy to (dL/dx, param_grads)
    where param_grads is keyed `w0, b0, w1, ...`.
    """
    y, cache = net.forward(x)

    def grad(dy):
        grads: dict = {}
        dx = net.backward(cache, dy, grads, "p")
        return dx, {k.split(".", 1)[1]: v for k, v in grads.items()}

    return y, grad


def sigmoid(z):
    """Numerically stable logistic function, scalar or array."""
    z = np.asarray(z, dtype=np.float64)
    scalar = z.ndim == 0
    z1 = np.atleast_1d(z)
    out = np.empty_like(z1)
    pos = z1 >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z1[pos]))
    ez = np.exp(z1[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out[0]) if scalar else out.reshape(z.shape)
