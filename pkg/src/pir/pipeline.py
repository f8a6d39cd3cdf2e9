"""End-to-end helpers: prepare splits, produce backbone forecasts, fit and apply PIR."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbones import LinearBackbone, fit_linear, seasonal_naive
from .dataio import (ChannelStats, TimeSeriesDataset, WindowBatch, WindowInstance, load_csv,
                     make_windows, split_chronological, stack_windows, standardize, write_csv)
from .global_rev import RetrievalDatabase, build_database
from .model import PirConfig, PirModel
from .train import RevisionInputs, TrainHistory, predict, prepare_inputs, train

SPLITS = ("train", "val", "test")


@dataclass
class PreparedData:
    stats: ChannelStats
    splits: dict[str, TimeSeriesDataset]
    windows: dict[str, list[WindowInstance]]
    batches: dict[str, WindowBatch]
    lin: int
    lout: int

    @property
    def n_channels(self) -> int:
        return self.stats.mean.shape[0]


def prepare(dataset: TimeSeriesDataset, ratios, lin: int, lout: int, stride: int = 1) -> PreparedData:
    """Split chronologically, standardise with train statistics, cut windows per split."""
    raw = dict(zip(SPLITS, split_chronological(dataset, ratios)))
    train_std, stats = standardize(raw["train"])
    splits = {"train": train_std}
    for name in ("val", "test"):
        splits[name] = standardize(raw[name], stats)[0]
    return from_splits(splits, stats, lin, lout, stride)


def from_splits(splits: dict[str, TimeSeriesDataset], stats: ChannelStats, lin: int, lout: int,
                stride: int = 1) -> PreparedData:
    windows = {name: make_windows(ds, lin, lout, stride) for name, ds in splits.items()}
    batches = {name: stack_windows(w) for name, w in windows.items()}
    return PreparedData(stats, splits, windows, batches, lin, lout)


@dataclass
class BackboneRun:
    forecasts: dict[str, np.ndarray]
    model: LinearBackbone | None = None
    train_rows: np.ndarray | None = None   # rows of the train split PIR may train on


def backbone_forecasts(data: PreparedData, kind: str = "seasonal", period: int = 24,
                       ridge: float = 1e-3, holdout_refit: bool = False) -> BackboneRun:
    """Forecasts for every split from a native backbone fit on the training split.

    With ``holdout_refit`` the linear model is fit on the first 80% of training
    windows and PIR should train only on the remaining rows.
    """
    if kind == "seasonal":
        return BackboneRun({name: seasonal_naive(b.x, period, data.lout) for name, b in data.batches.items()})
    if kind != "linear":
        raise ValueError(f"unknown backbone kind {kind!r}")
    train_w = data.windows["train"]
    rows = None
    fit_on = train_w
    if holdout_refit:
        cut = int(0.8 * len(train_w))
        fit_on, rows = train_w[:cut], np.arange(cut, len(train_w))
    model = fit_linear(fit_on, ridge)
    return BackboneRun({name: model.predict(b.x) for name, b in data.batches.items()}, model, rows)


def build_db(data: PreparedData, config: PirConfig) -> RetrievalDatabase:
    return build_database(data.batches["train"], config.granularity)


def split_inputs(data: PreparedData, forecasts: dict[str, np.ndarray], db: RetrievalDatabase,
                 config: PirConfig, split: str) -> RevisionInputs:
    return prepare_inputs(data.batches[split], forecasts[split], db, config, exclude=(split == "train"))


def fit_pir(data: PreparedData, run: BackboneRun, config: PirConfig,
            db: RetrievalDatabase | None = None) -> tuple[PirModel, TrainHistory, RetrievalDatabase]:
    db = db or build_db(data, config)
    train_in = split_inputs(data, run.forecasts, db, config, "train")
    if run.train_rows is not None:
        train_in = train_in.take(run.train_rows)
    val_in = split_inputs(data, run.forecasts, db, config, "val")
    model = PirModel(config, backbone=run.model)
    if config.variant == "none":
        return model, TrainHistory(), db
    model, hist = train(model, train_in, val_in)
    return model, hist, db


def default_config(data: PreparedData, **overrides) -> PirConfig:
    cfg = PirConfig(n_channels=data.n_channels, lin=data.lin, lout=data.lout)
    return replace(cfg, **overrides)


def revise(model: PirModel, inputs: RevisionInputs) -> dict[str, np.ndarray]:
    return predict(model, inputs)


def run_ablation(data: PreparedData, run: BackboneRun, config: PirConfig,
                 variants=("full", "no_local", "no_global", "none"), split: str = "test") -> list[dict]:
    """Retrain each variant from scratch and score it on ``split``."""
    db = build_db(data, config)
    rows = []
    for variant in variants:
        cfg = replace(config, variant=variant)
        model, hist, _ = fit_pir(data, run, cfg, db)
        out = revise(model, split_inputs(data, run.forecasts, db, cfg, split))
        err = out["y_pred"] - data.batches[split].y
        rows.append({"variant": variant, "mse": float((err * err).mean()),
                     "mae": float(np.abs(err).mean()), "best_epoch": hist.best_epoch})
    return rows


# ---------------------------------------------------------------------------
# prepared-data directories


def save_prepared(directory, data: PreparedData, **meta) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, ds in data.splits.items():
        write_csv(ds, d / f"{name}.csv")
    data.stats.save(d / "stats.json")
    doc = {"lin": data.lin, "lout": data.lout,
           "offsets": {name: ds.offset for name, ds in data.splits.items()}, **meta}
    (d / "meta.json").write_text(json.dumps(doc, indent=2))


def load_prepared(directory) -> PreparedData:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    splits = {}
    for name in SPLITS:
        ds = load_csv(d / f"{name}.csv")
        splits[name] = TimeSeriesDataset(ds.values, ds.timestamps, ds.channel_names, meta["offsets"][name])
    stats = ChannelStats.load(d / "stats.json")
    return from_splits(splits, stats, meta["lin"], meta["lout"], meta.get("stride", 1))
