"""Local revision: attention over per-variate forecast tokens plus one exogenous token."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import EncoderLayer, Initializer, Linear, Module
from .tensor import ShapeError, Tensor


class LocalReviser(Module):
    """Encoder over ``N + 1`` tokens with a linear head on the first ``N``.

    Token ``i < N`` embeds channel ``i`` of the backbone forecast; token ``N``
    embeds the flattened calendar matrix of the target horizon.  There is no
    positional encoding, so the map is equivariant to channel permutations.
    """

    def __init__(self, init: Initializer, n_channels: int, lout: int, n_exo: int = 5,
                 d_model: int = 64, heads: int = 4, layers: int = 1, d_ff: int = 128,
                 zero_head: bool = True, prefix: str = "local"):
        self.n_channels, self.lout, self.n_exo = n_channels, lout, n_exo
        self.co_embed = Linear(init, f"{prefix}.co_embed", lout, d_model)
        self.exo_embed = Linear(init, f"{prefix}.exo_embed", lout * n_exo, d_model)
        self.encoder = [EncoderLayer(init, f"{prefix}.enc{i}", d_model, heads, d_ff)
                        for i in range(layers)]
        # zero head: y_local is exactly 0 until training moves it
        self.head = Linear(init, f"{prefix}.head", d_model, lout, zero=zero_head)

    def _check(self, ybar: Tensor, exo: Tensor) -> None:
        if ybar.ndim != 3 or ybar.shape[2] != self.lout:
            raise ShapeError(f"local: y_bar must be (B, N, {self.lout}), got {ybar.shape}")
        if exo.ndim != 3 or exo.shape[1:] != (self.lout, self.n_exo) or exo.shape[0] != ybar.shape[0]:
            raise ShapeError(f"local: exo must be (B, {self.lout}, {self.n_exo}), got {exo.shape}")

    def embed_tokens(self, ybar: Tensor, exo: Tensor) -> Tensor:
        self._check(ybar, exo)
        b = ybar.shape[0]
        h_co = self.co_embed(ybar)
        h_exo = self.exo_embed(exo.reshape(b, 1, self.lout * self.n_exo))
        return T.concat([h_co, h_exo], axis=1)

    def __call__(self, ybar: Tensor, exo: Tensor) -> Tensor:
        h = self.embed_tokens(ybar, exo)
        for layer in self.encoder:
            h = layer(h)
        n = ybar.shape[1]
        return self.head(h[:, :n, :])

    def attention_weights(self) -> list[np.ndarray]:
        """Softmax weights recorded by the most recent forward pass, per layer."""
        return [layer.attn.last_weights for layer in self.encoder]


def _batched(ybar, exo):
    ybar, exo = np.asarray(ybar, dtype=np.float64), np.asarray(exo, dtype=np.float64)
    single = ybar.ndim == 2
    if single:
        ybar, exo = ybar[None], exo[None]
    return Tensor(ybar), Tensor(exo), single


def embed_tokens(ybar: np.ndarray, exo: np.ndarray, model: LocalReviser) -> np.ndarray:
    yt, et, single = _batched(ybar, exo)
    with T.no_grad():
        out = model.embed_tokens(yt, et).data
    return out[0] if single else out


def local_revise(ybar: np.ndarray, exo: np.ndarray, model: LocalReviser) -> np.ndarray:
    yt, et, single = _batched(ybar, exo)
    with T.no_grad():
        out = model(yt, et).data
    return out[0] if single else out
