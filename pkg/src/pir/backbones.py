"""Native baseline forecasters and the external-forecast loader."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import (ForecastRecord, JoinError, WindowInstance, read_forecasts,
                     stack_windows)

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-3


def seasonal_naive(x: np.ndarray, period: int, lout: int) -> np.ndarray:
    """Repeat the last ``period`` input steps; works on any leading shape."""
    x = np.asarray(x, dtype=np.float64)
    lin = x.shape[-1]
    if not 1 <= period <= lin:
        raise ValueError(f"period must lie in [1, {lin}], got {period}")
    idx = lin - period + (np.arange(lout) % period)
    return x[..., idx]


@dataclass(frozen=True)
class LinearBackbone:
    """Channel-independent linear map from input window to target window."""
    weight: np.ndarray  # (N, L_out, L_in)
    bias: np.ndarray    # (N, L_out)
    ridge: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        # x: (..., N, L_in) -> (..., N, L_out)
        return np.einsum("...ni,noi->...no", x, self.weight) + self.bias


def fit_linear(train_windows: Sequence[WindowInstance], ridge: float = DEFAULT_RIDGE) -> LinearBackbone:
    """Closed-form ridge regression per channel; the bias is not penalised.

    With ``ridge=0`` and a rank-deficient design the minimum-norm least-squares
    solution is returned.
    """
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    batch = stack_windows(list(train_windows))
    n_ch, lin = batch.x.shape[1], batch.x.shape[2]
    lout = batch.y.shape[2]
    weights = np.empty((n_ch, lout, lin))
    biases = np.empty((n_ch, lout))
    for c in range(n_ch):
        X = batch.x[:, c, :]
        Y = batch.y[:, c, :]
        xm, ym = X.mean(axis=0), Y.mean(axis=0)
        Xc, Yc = X - xm, Y - ym
        if ridge > 0:
            W = np.linalg.solve(Xc.T @ Xc + ridge * np.eye(lin), Xc.T @ Yc)
        else:
            W, _, rank, _ = np.linalg.lstsq(Xc, Yc, rcond=None)
            if rank < lin:
                log.warning("channel %d: singular design (rank %d < %d); using minimum-norm solution",
                            c, rank, lin)
        weights[c] = W.T
        biases[c] = ym - xm @ W
    return LinearBackbone(weights, biases, float(ridge))


def predict(model: LinearBackbone, x: np.ndarray) -> np.ndarray:
    return model.predict(x)


def load_external_forecasts(path: str | Path, instances: Sequence[WindowInstance]
                            ) -> dict[int, ForecastRecord]:
    """Load a forecast-exchange file and check it covers ``instances`` exactly."""
    records = {r.instance_id: r for r in read_forecasts(path)}
    wanted = {w.id: w for w in instances}
    missing = sorted(set(wanted) - set(records))
    if missing:
        raise JoinError(f"missing ids: {missing}")
    unknown = sorted(set(records) - set(wanted))
    if unknown:
        raise JoinError(f"forecasts reference unknown instance ids: {unknown}")
    for iid, rec in records.items():
        if rec.values.shape != wanted[iid].y.shape:
            raise ValueError(f"instance {iid}: forecast shape {rec.values.shape} "
                             f"!= target shape {wanted[iid].y.shape}")
    return {iid: records[iid] for iid in sorted(records)}
