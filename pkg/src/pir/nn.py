"""Small network layers on top of :mod:`pir.tensor`."""

from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Initializer:
    """Seeded parameter factory; each parameter name gets its own stream.

    Streams are keyed by name, so adding or reordering layers does not change
    the values of unrelated parameters.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def uniform(self, name: str, shape: tuple, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        data = self.rng(name).uniform(-bound, bound, size=shape)
        return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)

    @staticmethod
    def constant(name: str, shape: tuple, value: float) -> Tensor:
        return Tensor(np.full(shape, float(value)), requires_grad=True, name=name)


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for value in vars(self).values():
            if isinstance(value, Tensor) and value.requires_grad:
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        out.update(item.parameters())
        return out

    def load_parameters(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(values))
            if missing:
                raise KeyError(f"missing parameters: {missing}")
        for name, p in params.items():
            if name not in values:
                continue
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr


class Linear(Module):
    def __init__(self, init: Initializer, name: str, d_in: int, d_out: int,
                 bias: bool = True, zero: bool = False):
        if zero:
            self.weight = Initializer.constant(f"{name}.weight", (d_in, d_out), 0.0)
            self.bias = Initializer.constant(f"{name}.bias", (d_out,), 0.0) if bias else None
        else:
            self.weight = init.uniform(f"{name}.weight", (d_in, d_out), d_in)
            self.bias = init.uniform(f"{name}.bias", (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        self.gain = Initializer.constant(f"{name}.gain", (dim,), 1.0)
        self.shift = Initializer.constant(f"{name}.shift", (dim,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x) * self.gain + self.shift


class MLP(Module):
    """Two affine layers with GELU in between."""

    def __init__(self, init: Initializer, name: str, d_in: int, hidden: int, d_out: int):
        self.fc1 = Linear(init, f"{name}.fc1", d_in, hidden)
        self.fc2 = Linear(init, f"{name}.fc2", hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention composed from primitive ops.

    The key projection has no bias: under the row softmax a key bias only
    shifts every logit of a query row by the same amount.
    """

    def __init__(self, init: Initializer, name: str, d_model: int, heads: int):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(init, f"{name}.q", d_model, d_model)
        self.wk = Linear(init, f"{name}.k", d_model, d_model, bias=False)
        self.wv = Linear(init, f"{name}.v", d_model, d_model)
        self.wo = Linear(init, f"{name}.o", d_model, d_model)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d_head).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        q = self._split(self.wq(x))
        k = self._split(self.wk(x))
        v = self._split(self.wv(x))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.d_head))
        weights = T.softmax(scores)
        self.last_weights = weights.data
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.wo(ctx)


class EncoderLayer(Module):
    """Post-norm Transformer encoder block: attention then feed-forward."""

    def __init__(self, init: Initializer, name: str, d_model: int, heads: int, d_ff: int):
        self.attn = MultiHeadAttention(init, f"{name}.attn", d_model, heads)
        self.norm1 = LayerNorm(f"{name}.norm1", d_model)
        self.ff = MLP(init, f"{name}.ff", d_model, d_ff, d_model)
        self.norm2 = LayerNorm(f"{name}.norm2", d_model)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm1(x + self.attn(x))
        return self.norm2(h + self.ff(h))
