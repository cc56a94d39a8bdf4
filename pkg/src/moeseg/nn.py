"""Shared layer primitives: linear, layernorm, single-head attention, MLP.

Each layer owns its parameter tensors and exposes them through
``named_params()`` as a flat dict of dot-separated names, which is how the
checkpoint format and the freeze machinery address them.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def prefixed(prefix: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{name}": p for name, p in params.items()}


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor.zeros((n_out,), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def named_params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Tensor.ones((width,), requires_grad=True)
        self.bias = Tensor.zeros((width,), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return x.layernorm(self.gain, self.bias, eps=self.eps)

    def named_params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Attention:
    """Single-head scaled dot-product attention over width-C features."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)
        self.scale = 1.0 / np.sqrt(width)

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        scores = (self.wq(query) @ self.wk(context).transpose()) * self.scale
        weights = scores.softmax(axis=-1)
        return self.wo(weights @ self.wv(context))

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.update(prefixed(name, layer.named_params()))
        return out


class Mlp:
    def __init__(self, rng: np.random.Generator, width: int, hidden: int):
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefixed("fc1", self.fc1.named_params()))
        out.update(prefixed("fc2", self.fc2.named_params()))
        return out


class TransformerBlock:
    """Post-norm residual block: attention then MLP, each followed by layernorm."""

    def __init__(self, rng: np.random.Generator, width: int):
        self.attn = Attention(rng, width)
        self.norm1 = LayerNorm(width)
        self.mlp = Mlp(rng, width, 4 * width)
        self.norm2 = LayerNorm(width)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x))
        return self.norm2(x + self.mlp(x))

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(prefixed("attn", self.attn.named_params()))
        out.update(prefixed("norm1", self.norm1.named_params()))
        out.update(prefixed("mlp", self.mlp.named_params()))
        out.update(prefixed("norm2", self.norm2.named_params()))
        return out
