"""Small fully connected networks with hand-written backprop and Adam.

Parameters of a network live in one flat float64 vector; per-layer weight
and bias arrays are views into it, so optimiser steps and Polyak averaging
are single vector operations.

Checkpoint layout (``save``/``load``): an ASCII header line
``MLP1 <json>\\n`` holding ``sizes`` and ``output``, followed by the flat
parameter vector as little-endian float64. Parameter order is layer by
layer, each weight matrix (shape ``(fan_in, fan_out)``, row-major) followed
by its bias.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sim import ContractViolation

_MAGIC = b"MLP1 "


class Mlp:
    """ReLU hidden layers; ``output`` is ``"tanh"`` or ``"identity"``."""

    def __init__(self, sizes, output="identity", rng=None, final_scale=1.0, params=None):
        if len(sizes) < 2:
            raise ContractViolation("need at least input and output sizes")
        if output not in ("tanh", "identity"):
            raise ContractViolation(f"unknown output activation {output!r}")
        self.sizes = [int(s) for s in sizes]
        self.output = output
        self.n_params = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = np.empty(self.n_params)
            self.params = params
            self._bind()
            for i, (W, b) in enumerate(zip(self.W, self.b)):
                bound = 1.0 / np.sqrt(W.shape[0])
                scale = final_scale if i == len(self.W) - 1 else 1.0
                W[...] = scale * rng.uniform(-bound, bound, size=W.shape)
                b[...] = scale * rng.uniform(-bound, bound, size=b.shape)
        else:
            params = np.array(params, dtype=np.float64)
            if params.shape != (self.n_params,):
                raise ContractViolation(f"expected {self.n_params} parameters, got {params.shape}")
            self.params = params
            self._bind()
        self._cache = None

    def _bind(self):
        self.W, self.b = [], []
        offset = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.W.append(self.params[offset : offset + a * b].reshape(a, b))
            offset += a * b
            self.b.append(self.params[offset : offset + b])
            offset += b

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, self.output, params=self.params.copy())

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ContractViolation(f"input has {h.shape[1]} features, expected {self.sizes[0]}")
        inputs, pre = [], []
        last = len(self.W) - 1
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            inputs.append(h)
            z = h @ W + b
            pre.append(z)
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.output == "tanh":
                h = np.tanh(z)
            else:
                h = z
        self._cache = (inputs, pre, h, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Gradients for the last ``forward``: ``(flat parameter grads, input grads)``."""
        if self._cache is None:
            raise ContractViolation("backward called before forward")
        inputs, pre, out, single = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != out.shape:
            raise ContractViolation(f"upstream gradient shape {g.shape} != output shape {out.shape}")
        grads = np.empty(self.n_params)
        offset = self.n_params
        if self.output == "tanh":
            g = g * (1.0 - out * out)
        for i in range(len(self.W) - 1, -1, -1):
            if i < len(self.W) - 1:
                g = g * (pre[i] > 0.0)
            W = self.W[i]
            n_b = W.shape[1]
            n_w = W.size
            grads[offset - n_b : offset] = g.sum(axis=0)
            offset -= n_b
            grads[offset - n_w : offset] = (inputs[i].T @ g).reshape(-1)
            offset -= n_w
            g = g @ W.T
        return grads, (g[0] if single else g)

    def save(self, path) -> None:
        header = json.dumps({"sizes": self.sizes, "output": self.output})
        with open(path, "wb") as fh:
            fh.write(_MAGIC + header.encode("ascii") + b"\n")
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        raw = Path(path).read_bytes()
        if not raw.startswith(_MAGIC):
            raise ContractViolation(f"{path}: not an MLP checkpoint")
        newline = raw.index(b"\n")
        header = json.loads(raw[len(_MAGIC) : newline].decode("ascii"))
        params = np.frombuffer(raw[newline + 1 :], dtype="<f8").astype(np.float64)
        return cls(header["sizes"], header["output"], params=params)


class Adam:
    """Bias-corrected Adam on a flat parameter vector, updated in place."""

    def __init__(self, n_params: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        if params.shape != grads.shape or params.shape != self.m.shape:
            raise ContractViolation("parameter / gradient / moment shapes differ")
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: Adam) -> np.ndarray:
    state.step(params, grads)
    return params


def polyak_update(target: Mlp, source: Mlp, rate: float) -> None:
    """``target <- (1 - rate) * target + rate * source``."""
    target.params *= 1.0 - rate
    target.params += rate * source.params
