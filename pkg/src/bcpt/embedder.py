"""Per-pixel multi-layer perceptron with a hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError


@dataclass
class EmbedderParams:
    """Layer weights (out x in) and biases; ReLU between layers, none after the last."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise StructuralError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise StructuralError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise StructuralError(f"layer {i} input does not chain to layer {i - 1} output")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self):
        """Flat list of parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "EmbedderParams":
        return EmbedderParams.from_arrays([a.copy() for a in self.arrays()])


def init_params(sizes, seed=0) -> EmbedderParams:
    """He-normal weights and zero biases for layer widths ``sizes``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return EmbedderParams(weights, biases)


def forward(params: EmbedderParams, x):
    """Embed the columns of ``x`` (in_dim x N); returns ``(out, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != params.in_dim:
        raise StructuralError(f"input of shape {x.shape} does not match input dim {params.in_dim}")
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ h + b[:, None]
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return h, (acts, pre)


def backward(params: EmbedderParams, cache, grad_out):
    """Parameter gradients (same order as :meth:`EmbedderParams.arrays`)."""
    acts, pre = cache
    grads = [None] * (2 * len(params.weights))
    delta = grad_out
    for i in reversed(range(len(params.weights))):
        if i < len(params.weights) - 1:
            delta = delta * (pre[i] > 0)
        grads[2 * i] = delta @ acts[i].T
        grads[2 * i + 1] = delta.sum(axis=1)
        if i:
            delta = params.weights[i].T @ delta
    return grads
