"""Mini-batch multi-task training with early stopping on validation MSE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataio import WindowBatch
from .global_rev import RetrievalDatabase, global_context
from .model import PirModel
from .optim import Adam

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class RevisionInputs:
    """Everything the model consumes for one split, aligned by row."""
    ids: np.ndarray
    x: np.ndarray         # (M, N, L_in)
    ybar: np.ndarray      # (M, N, L_out)
    exo: np.ndarray       # (M, L_out, F)
    y_global: np.ndarray  # (M, N, L_out)
    w: np.ndarray         # (M, N, K)
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, rows: np.ndarray) -> "RevisionInputs":
        return RevisionInputs(self.ids[rows], self.x[rows], self.ybar[rows], self.exo[rows],
                              self.y_global[rows], self.w[rows],
                              None if self.y is None else self.y[rows])


def prepare_inputs(batch: WindowBatch, ybar: np.ndarray, db: RetrievalDatabase, config,
                   exclude: bool, with_targets: bool = True) -> RevisionInputs:
    """Attach backbone forecasts and retrieval context to a split.

    ``exclude`` removes database windows overlapping each query (use it for
    training-split queries so no window retrieves itself).
    """
    ybar = np.asarray(ybar, dtype=np.float64)
    if ybar.shape != batch.y.shape:
        raise ValueError(f"backbone forecasts {ybar.shape} do not match targets {batch.y.shape}")
    y_global, w = global_context(db, batch, config.k, exclude=exclude,
                                 temperature=config.temperature,
                                 rescale_by_query_stats=config.rescale_by_query_stats)
    return RevisionInputs(batch.ids, batch.x, ybar, batch.exo, y_global, w,
                          batch.y if with_targets else None)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_l_ue: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    val_l_ue: list[float] = field(default_factory=list)
    initial_val_mse: float = math.nan
    initial_val_l_ue: float = math.nan
    best_epoch: int = -1    # -1: the untrained (no-op) model was best

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_l_ue": self.train_l_ue,
            "val_mse": self.val_mse,
            "val_l_ue": self.val_l_ue,
            "initial_val_mse": self.initial_val_mse,
            "initial_val_l_ue": self.initial_val_l_ue,
            "best_epoch": self.best_epoch,
        }


def _forward(model: PirModel, data: RevisionInputs, force_zero: bool = False):
    return model.forward(data.x, data.ybar, data.exo, data.y_global, data.w, force_zero=force_zero)


def predict(model: PirModel, data: RevisionInputs, batch_size: int = 512) -> dict[str, np.ndarray]:
    """Revised forecasts plus delta/alpha/beta for every row, without recording a graph."""
    keys = ("y_pred", "delta", "alpha", "beta", "y_local")
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in keys}
    with T.no_grad():
        for start in range(0, len(data), batch_size):
            part = data.take(np.arange(start, min(start + batch_size, len(data))))
            out = _forward(model, part)
            for k in keys:
                chunks[k].append(out[k].data)
    return {k: np.concatenate(v) for k, v in chunks.items()}


def evaluate_split(model: PirModel, data: RevisionInputs) -> tuple[float, float]:
    """(MSE of revised forecasts, L_ue) on a split with targets."""
    out = predict(model, data)
    err = out["y_pred"] - data.y
    m = ((data.ybar - data.y) ** 2).mean(axis=-1)
    return float((err * err).mean()), float(np.abs(out["delta"] - m).mean())


def _snapshot(model: PirModel) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.parameters().items()}


def train(model: PirModel, train_data: RevisionInputs, val_data: RevisionInputs,
          config=None) -> tuple[PirModel, TrainHistory]:
    """Adam on ``L_pr + lambda * L_ue``; keeps the best-validation parameters.

    Epoch 0 runs with the global branch muted (warm-up); the state before any
    update is a candidate too, so the result is never worse on validation than
    the backbone.
    """
    cfg = config or model.config
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    hist = TrainHistory()

    hist.initial_val_mse, hist.initial_val_l_ue = evaluate_split(model, val_data)
    best = (hist.initial_val_mse, _snapshot(model), True)
    since_best = 0
    n = len(train_data)

    for epoch in range(cfg.epochs):
        model.warmup = epoch == 0
        order = rng.permutation(n)
        tot, ue, seen = 0.0, 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start:start + cfg.batch_size]
            part = train_data.take(rows)
            opt.zero_grad()
            out = _forward(model, part)
            loss, _, l_ue = model.losses(out, part.y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            tot += value * len(rows)
            ue += l_ue.item() * len(rows)
            seen += len(rows)
        model.warmup = False
        val_mse, val_ue = evaluate_split(model, val_data)
        hist.train_loss.append(tot / seen)
        hist.train_l_ue.append(ue / seen)
        hist.val_mse.append(val_mse)
        hist.val_l_ue.append(val_ue)
        log.info("epoch %d: train %.5f  L_ue %.5f  val mse %.5f", epoch, tot / seen, ue / seen, val_mse)
        if val_mse < best[0]:
            best = (val_mse, _snapshot(model), False)
            hist.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    model.load_parameters(best[1])
    model.warmup = best[2]
    return model, hist
