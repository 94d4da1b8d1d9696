"""Minimal dense networks with hand-written backpropagation.

Activations are column-major like feature matrices: ``(width, batch)``.
"""
from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .errors import ValidationError


class Dense:
    """Affine map ``W @ x + b``."""

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        if self.bias.shape != (self.weight.shape[0],):
            raise ValidationError(f"bias shape {self.bias.shape} does not fit weight {self.weight.shape}")
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @classmethod
    def init(cls, n_in, n_out, rng):
        return cls(rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), np.zeros(n_out))

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def forward(self, x):
        self._x = x
        return self.weight @ x + self.bias[:, None]

    def backward(self, g):
        self.grad_weight = g @ self._x.T
        self.grad_bias = g.sum(axis=1)
        return self.weight.T @ g


class Tanh:
    def __init__(self):
        self._y = None

    def params(self):
        return []

    def grads(self):
        return []

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, g):
        return g * (1.0 - self._y**2)


class MLP:
    """Dense layers with tanh between consecutive pairs (none after the last)."""

    def __init__(self, dense_layers: Sequence[Dense]):
        if not dense_layers:
            raise ValidationError("an MLP needs at least one dense layer")
        for a, b in zip(dense_layers, dense_layers[1:]):
            if a.n_out != b.n_in:
                raise ValidationError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        self.dense = list(dense_layers)
        self.layers: List = []
        for i, layer in enumerate(self.dense):
            self.layers.append(layer)
            if i < len(self.dense) - 1:
                self.layers.append(Tanh())

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator) -> "MLP":
        return cls([Dense.init(a, b, rng) for a, b in zip(sizes, sizes[1:])])

    @property
    def n_in(self):
        return self.dense[0].n_in

    @property
    def n_out(self):
        return self.dense[-1].n_out

    @property
    def sizes(self):
        return [self.n_in] + [layer.n_out for layer in self.dense]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[0] != self.n_in:
            raise ValidationError(f"network expects {self.n_in} input rows, got shape {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def params(self):
        return [p for layer in self.dense for p in layer.params()]

    def grads(self):
        return [g for layer in self.dense for g in layer.grads()]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta):
        offset = 0
        for p in self.params():
            p[...] = np.reshape(theta[offset:offset + p.size], p.shape)
            offset += p.size

    def copy(self) -> "MLP":
        return MLP([Dense(layer.weight.copy(), layer.bias.copy()) for layer in self.dense])

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "layers": [
                {"shape": list(layer.weight.shape), "weight": layer.weight.tolist(),
                 "bias": layer.bias.tolist()}
                for layer in self.dense
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MLP":
        return cls([Dense(layer["weight"], layer["bias"]) for layer in payload["layers"]])


class Adam:
    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def log_softmax(logits):
    """Column-wise log-softmax of a ``(C, batch)`` logit matrix."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to ``logits``."""
    logp = log_softmax(logits)
    n = logits.shape[1]
    cols = np.arange(n)
    loss = -logp[labels, cols].mean()
    grad = np.exp(logp)
    grad[labels, cols] -= 1.0
    return loss, grad / n


def induced_inf_norm(matrix):
    """Operator norm induced by the vector infinity-norm (max absolute row sum)."""
    return float(np.abs(matrix).sum(axis=1).max())
