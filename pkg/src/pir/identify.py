"""Failure identification: predict each channel's forecast MSE from (x, y_bar)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, Initializer, Module
from .tensor import ShapeError, Tensor


class UncertaintyNet(Module):
    """Channel-shared two-layer network fed ``[x_i | y_bar_i | e_i]``.

    ``e_i`` is row ``i`` of a learned channel embedding matrix.  The output is
    unconstrained; the MAE target keeps it near the (nonnegative) MSE.
    """

    def __init__(self, init: Initializer, n_channels: int, lin: int, lout: int,
                 d_embed: int = 32, hidden: int = 128, prefix: str = "ue"):
        self.n_channels, self.lin, self.lout = n_channels, lin, lout
        self.embedding = init.uniform(f"{prefix}.embedding", (n_channels, d_embed), d_embed)
        self.mlp = MLP(init, f"{prefix}.mlp", lin + lout + d_embed, hidden, 1)

    def __call__(self, x: Tensor, ybar: Tensor) -> Tensor:
        if x.ndim != 3 or ybar.ndim != 3:
            raise ShapeError(f"uncertainty: expected (B, N, L) inputs, got {x.shape} and {ybar.shape}")
        b, n, _ = x.shape
        if n != self.n_channels or ybar.shape[:2] != (b, n):
            raise ShapeError(f"uncertainty: {n} channels in x, {ybar.shape[1]} in y_bar, "
                             f"{self.n_channels} embedding rows")
        if x.shape[2] != self.lin or ybar.shape[2] != self.lout:
            raise ShapeError(f"uncertainty: lengths {x.shape[2]}/{ybar.shape[2]}, "
                             f"expected {self.lin}/{self.lout}")
        emb = T.broadcast_to(self.embedding, (b, n, self.embedding.shape[1]))
        feats = T.concat([x, ybar, emb], axis=-1)
        return self.mlp(feats).reshape(b, n)


def estimate_uncertainty(x: np.ndarray, ybar: np.ndarray, net: UncertaintyNet) -> np.ndarray:
    """delta for one instance (N x L arrays) or a batch (B x N x L)."""
    x, ybar = np.asarray(x, dtype=np.float64), np.asarray(ybar, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x, ybar = x[None], ybar[None]
    with T.no_grad():
        delta = net(Tensor(x), Tensor(ybar)).data
    return delta[0] if single else delta


def channel_mse(ybar: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-channel mean of squared error over the horizon."""
    ybar, y = np.asarray(ybar), np.asarray(y)
    if ybar.shape != y.shape:
        raise ShapeError(f"channel_mse: {ybar.shape} vs {y.shape}")
    d = ybar - y
    return (d * d).mean(axis=-1)


def uncertainty_loss(delta, ybar, y) -> Tensor:
    """Mean absolute gap between delta and the realised per-channel MSE."""
    delta = delta if isinstance(delta, Tensor) else Tensor(delta)
    target = channel_mse(ybar, y)
    if delta.shape != target.shape:
        raise ShapeError(f"uncertainty_loss: delta {delta.shape} vs target {target.shape}")
    return T.mae_loss(delta, target)
