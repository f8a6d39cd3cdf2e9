"""The PIR model: uncertainty net, local reviser, gates and residual combination."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .identify import UncertaintyNet, uncertainty_loss
from .local_rev import LocalReviser
from .nn import MLP, Initializer, Module
from .optim import CheckpointError, load_checkpoint, save_checkpoint
from .tensor import ShapeError, Tensor

VARIANTS = ("full", "no_local", "no_global", "none")
BETA_INIT_BIAS = -2.0


@dataclass
class PirConfig:
    n_channels: int
    lin: int
    lout: int
    n_exo: int = 5
    k: int = 10
    lam: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 50
    patience: int = 5
    seed: int = 0
    d_embed: int = 32
    ue_hidden: int = 128
    d_model: int = 64
    heads: int = 4
    layers: int = 1
    d_ff: int = 128
    beta_hidden: int = 32
    variant: str = "full"
    temperature: float = 1.0
    granularity: str = "channel"
    rescale_by_query_stats: bool = False
    joint_backbone: bool = False
    zero_head: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: dict) -> "PirConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in blob.items() if k in names})


class GateParams(Module):
    """alpha = sigmoid(a * delta + b); beta = sigmoid(MLP([delta | w]))."""

    def __init__(self, init: Initializer, k: int, hidden: int = 32):
        self.alpha_weight = Initializer.constant("gate.alpha.weight", (1,), 1.0)
        self.alpha_bias = Initializer.constant("gate.alpha.bias", (1,), 0.0)
        self.beta = MLP(init, "gate.beta", 1 + k, hidden, 1)
        self.beta.fc2.bias.data[...] = BETA_INIT_BIAS

    def alpha_gate(self, delta: Tensor) -> Tensor:
        return T.sigmoid(delta * self.alpha_weight + self.alpha_bias)

    def beta_gate(self, delta: Tensor, w: Tensor) -> Tensor:
        b, n = delta.shape
        feats = T.concat([delta.reshape(b, n, 1), w], axis=-1)
        return T.sigmoid(self.beta(feats).reshape(b, n))


def combine(ybar, y_local, y_global, delta, w, gates: GateParams, *, use_local: bool = True,
            use_global: bool = True, global_scale: float = 1.0, force_zero: bool = False
            ) -> tuple[Tensor, Tensor, Tensor]:
    """Residual combination ``y_bar + alpha*y_local + beta*y_global``.

    Gates are per channel and broadcast over the horizon.  ``global_scale``
    multiplies the global branch (0 during warm-up); ``force_zero`` pins both
    gates to zero.  Returns ``(y_pred, alpha, beta)``.
    """
    ybar, y_local, y_global = (v if isinstance(v, Tensor) else Tensor(v) for v in (ybar, y_local, y_global))
    delta = delta if isinstance(delta, Tensor) else Tensor(delta)
    w = w if isinstance(w, Tensor) else Tensor(w)
    if not (ybar.shape == y_local.shape == y_global.shape):
        raise ShapeError(f"combine: y_bar {ybar.shape}, y_local {y_local.shape}, y_global {y_global.shape}")
    if delta.shape != ybar.shape[:2] or w.shape[:2] != ybar.shape[:2]:
        raise ShapeError(f"combine: delta {delta.shape} / w {w.shape} do not match {ybar.shape[:2]}")

    alpha = gates.alpha_gate(delta)
    beta = gates.beta_gate(delta, w)
    if force_zero:
        alpha = alpha * 0.0
        beta = beta * 0.0
    b, n = delta.shape
    y_pred = ybar
    if use_local:
        y_pred = y_pred + alpha.reshape(b, n, 1) * y_local
    if use_global:
        y_pred = y_pred + (beta * global_scale).reshape(b, n, 1) * y_global
    return y_pred, alpha, beta


def prediction_loss(y_pred, y) -> Tensor:
    """Mean over channels of the horizon-mean squared error (averaged over a batch)."""
    return T.mse_loss(y_pred, y)


def total_loss(l_pr, l_ue, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return l_pr + lam * l_ue


class PirModel(Module):
    def __init__(self, config: PirConfig, backbone=None):
        c = config
        self.config = c
        init = Initializer(c.seed)
        self.ue = UncertaintyNet(init, c.n_channels, c.lin, c.lout, c.d_embed, c.ue_hidden)
        self.local = LocalReviser(init, c.n_channels, c.lout, c.n_exo, c.d_model, c.heads,
                                  c.layers, c.d_ff, zero_head=c.zero_head)
        self.gates = GateParams(init, c.k, c.beta_hidden)
        # epoch-0 warm-up: global branch contributes nothing until it is cleared
        self.warmup = True
        self.backbone_weight = self.backbone_bias = None
        if c.joint_backbone:
            if backbone is None:
                raise ValueError("joint_backbone requires a fitted linear backbone")
            self.backbone_weight = Tensor(np.ascontiguousarray(backbone.weight.transpose(0, 2, 1)),
                                          requires_grad=True, name="backbone.weight")
            self.backbone_bias = Tensor(backbone.bias.copy(), requires_grad=True, name="backbone.bias")

    @property
    def use_local(self) -> bool:
        return self.config.variant in ("full", "no_global")

    @property
    def use_global(self) -> bool:
        return self.config.variant in ("full", "no_local")

    def backbone_forecast(self, x: Tensor) -> Tensor:
        b, n, lin = x.shape
        out = x.reshape(b, n, 1, lin) @ self.backbone_weight
        return out.reshape(b, n, self.config.lout) + self.backbone_bias

    def forward(self, x, ybar, exo, y_global, w, force_zero: bool = False) -> dict[str, Tensor]:
        x, ybar, exo, y_global, w = (v if isinstance(v, Tensor) else Tensor(v)
                                     for v in (x, ybar, exo, y_global, w))
        if self.backbone_weight is not None:
            ybar = self.backbone_forecast(x)
        delta = self.ue(x, ybar)
        if self.use_local:
            y_local = self.local(ybar, exo)
        else:
            y_local = Tensor(np.zeros(ybar.shape))
        y_pred, alpha, beta = combine(
            ybar, y_local, y_global, delta, w, self.gates,
            use_local=self.use_local, use_global=self.use_global,
            global_scale=0.0 if self.warmup else 1.0, force_zero=force_zero,
        )
        return {"y_pred": y_pred, "delta": delta, "alpha": alpha, "beta": beta,
                "y_local": y_local, "ybar": ybar}

    def losses(self, outputs: dict[str, Tensor], y: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        l_pr = prediction_loss(outputs["y_pred"], Tensor(y))
        l_ue = uncertainty_loss(outputs["delta"], outputs["ybar"].data, y)
        return total_loss(l_pr, l_ue, self.config.lam), l_pr, l_ue


def save_model(model: PirModel, path: str | Path, db_fingerprint: str | None = None, **extra) -> None:
    save_checkpoint(path, model.parameters(), config=model.config.to_dict(),
                    warmup=model.warmup, db_fingerprint=db_fingerprint, **extra)


def load_model(path: str | Path, db_fingerprint: str | None = None) -> tuple[PirModel, dict]:
    """Rebuild a model from a checkpoint; ``db_fingerprint`` guards against stale databases."""
    params, extra = load_checkpoint(path)
    try:
        config = PirConfig.from_dict(extra["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    saved_fp = extra.get("db_fingerprint")
    if db_fingerprint is not None and saved_fp is not None and saved_fp != db_fingerprint:
        raise CheckpointError("retrieval database does not match the one used in training "
                              f"(checkpoint {saved_fp[:12]}, current {db_fingerprint[:12]})")
    shell = None
    if config.joint_backbone:
        from .backbones import LinearBackbone
        w = params["backbone.weight"].transpose(0, 2, 1)
        shell = LinearBackbone(w, params["backbone.bias"], 0.0)
    model = PirModel(config, backbone=shell)
    try:
        model.load_parameters(params)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint parameters invalid: {exc}") from None
    model.warmup = bool(extra.get("warmup", False))
    return model, extra
