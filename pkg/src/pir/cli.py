"""Command-line entry point: ``pir <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON object keyed by option
name); flags given on the command line override values from the file.  Each
run writes the effective options next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbones import load_external_forecasts
from .dataio import (IngestionError, JoinError, WindowError, forecasts_to_records, load_csv,
                     parse_ratios, read_forecasts, write_csv, write_forecasts)
from .evaluate import errors_from_arrays, write_report
from .global_rev import RetrievalError
from .model import VARIANTS, PirConfig, load_model, save_model
from .optim import CheckpointError
from .pipeline import (SPLITS, BackboneRun, backbone_forecasts, build_db, default_config, fit_pir,
                       load_prepared, prepare, revise, run_ablation, save_prepared, split_inputs)
from .synthetic import SynthConfig, generate_synthetic_benchmark
from .train import TrainingDiverged

log = logging.getLogger("pir")

# PirConfig fields exposed as training flags: (flag, field, type)
TRAIN_FLAGS = (
    ("--k", "k", int), ("--lambda", "lam", float), ("--seed", "seed", int),
    ("--lr", "lr", float), ("--batch-size", "batch_size", int), ("--epochs", "epochs", int),
    ("--patience", "patience", int), ("--d-embed", "d_embed", int), ("--ue-hidden", "ue_hidden", int),
    ("--d-model", "d_model", int), ("--heads", "heads", int), ("--layers", "layers", int),
    ("--d-ff", "d_ff", int), ("--beta-hidden", "beta_hidden", int),
    ("--temperature", "temperature", float), ("--granularity", "granularity", str),
)
BOOL_FLAGS = (("--rescale-by-query-stats", "rescale_by_query_stats"),
              ("--joint-backbone", "joint_backbone"))


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# file helpers


def forecast_path(base: str | Path, split: str) -> Path:
    """Resolve the per-split exchange file for ``base``.

    ``base`` may contain ``{split}``; otherwise ``<stem>.<split><suffix>`` is
    used when it exists, else ``base`` itself.
    """
    text = str(base)
    if "{split}" in text:
        return Path(text.format(split=split))
    base = Path(base)
    sibling = base.with_name(f"{base.stem}.{split}{base.suffix}")
    return sibling if sibling.exists() else base


def _sibling(path: str | Path, tag: str, suffix: str | None = None) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{suffix if suffix is not None else p.suffix}")


def _snapshot(args: argparse.Namespace, path: Path, **extra) -> None:
    doc = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _load_split_forecasts(path, data, split: str, allow_subset: bool = False
                          ) -> tuple[np.ndarray, np.ndarray | None]:
    """Aligned (M, N, L_out) forecasts for a split, plus the covered rows when partial."""
    file = forecast_path(path, split)
    if not file.exists():
        raise CliError(f"no forecasts for split {split!r} at {file}")
    windows = data.windows[split]
    if not allow_subset:
        recs = load_external_forecasts(file, windows)
        return np.stack([recs[w.id].values for w in windows]), None
    recs = {r.instance_id: r for r in read_forecasts(file)}
    unknown = sorted(set(recs) - {w.id for w in windows})
    if unknown:
        raise JoinError(f"forecasts reference unknown instance ids: {unknown}")
    rows = np.array([i for i, w in enumerate(windows) if w.id in recs], dtype=np.int64)
    if rows.size == 0:
        raise CliError(f"{file} covers no {split} instances")
    ybar = np.zeros(data.batches[split].y.shape)
    for i in rows:
        vals = recs[windows[i].id].values
        if vals.shape != ybar.shape[1:]:
            raise ValueError(f"instance {windows[i].id}: forecast shape {vals.shape} != {ybar.shape[1:]}")
        ybar[i] = vals
    return ybar, (None if rows.size == len(windows) else rows)


def _config_from_args(args, data) -> PirConfig:
    overrides = {f: getattr(args, f) for _, f, _ in TRAIN_FLAGS if getattr(args, f, None) is not None}
    for _, f in BOOL_FLAGS:
        overrides[f] = bool(getattr(args, f, False))
    if getattr(args, "variant", None) and isinstance(args.variant, str) and args.variant in VARIANTS:
        overrides["variant"] = args.variant
    return default_config(data, **overrides)


def _load_run(args, data, config: PirConfig) -> BackboneRun:
    forecasts, train_rows = {}, None
    for split in SPLITS:
        ybar, rows = _load_split_forecasts(args.forecasts, data, split, allow_subset=(split == "train"))
        forecasts[split] = ybar
        if split == "train":
            train_rows = rows
    model = None
    if config.joint_backbone:
        model = backbone_forecasts(data, "linear", ridge=args.ridge).model
    return BackboneRun(forecasts, model, train_rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    cfg = SynthConfig(motifs=not args.no_motifs)
    if args.length is not None:
        cfg.length = args.length
    result = generate_synthetic_benchmark(cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result.dataset, out / "data.csv")
    result.save_log(out / "motifs.json", cfg, args.seed)
    _snapshot(args, out / "effective_config.json")
    log.info("wrote %s (%d rows, %d motifs)", out / "data.csv", result.dataset.length, len(result.motif_log))


def cmd_ingest(args) -> None:
    dataset = load_csv(args.data)
    ratios = parse_ratios(args.splits)
    data = prepare(dataset, ratios, args.lin, args.lout, args.stride)
    save_prepared(args.out, data, stride=args.stride, source=str(args.data),
                  splits=[str(r) for r in ratios],
                  windows={s: len(data.windows[s]) for s in SPLITS})
    _snapshot(args, Path(args.out) / "effective_config.json")
    log.info("windows: %s", {s: len(data.windows[s]) for s in SPLITS})


def cmd_backbone(args) -> None:
    data = load_prepared(args.data)
    splits = [args.split] if args.split else list(SPLITS)
    if args.external:
        values = {s: _load_split_forecasts(args.external, data, s)[0] for s in splits}
        source = Path(args.external).stem
    else:
        run = backbone_forecasts(data, args.kind, args.period, args.ridge, args.holdout_refit)
        values = run.forecasts
        source = args.kind
        if run.train_rows is not None and "train" in splits:
            rows = run.train_rows
            ids = data.batches["train"].ids[rows]
            write_forecasts(forecasts_to_records(ids, values["train"][rows], source),
                            _out_for_split(args, "train"))
            splits = [s for s in splits if s != "train"]
    for split in splits:
        b = data.batches[split]
        write_forecasts(forecasts_to_records(b.ids, values[split], source), _out_for_split(args, split))
    _snapshot(args, _sibling(args.out, "config", ".json"))


def _out_for_split(args, split: str) -> Path:
    if args.split:
        return Path(args.out)
    if "{split}" in str(args.out):
        return Path(str(args.out).format(split=split))
    return _sibling(args.out, split)


def cmd_train(args) -> None:
    data = load_prepared(args.data)
    config = _config_from_args(args, data)
    run = _load_run(args, data, config)
    model, hist, db = fit_pir(data, run, config)
    fp = db.fingerprint()
    save_model(model, args.ckpt, db_fingerprint=fp, data_dir=str(args.data), best_epoch=hist.best_epoch)
    Path(_sibling(args.ckpt, "history", ".json")).write_text(json.dumps(hist.to_dict(), indent=2))
    if args.save_db:
        db.save(args.save_db)
    _snapshot(args, _sibling(args.ckpt, "config", ".json"), model_config=config.to_dict())
    log.info("best epoch %d; checkpoint %s", hist.best_epoch, args.ckpt)


def cmd_revise(args) -> None:
    model, extra = load_model(args.ckpt)
    data_dir = args.data or extra.get("data_dir")
    if not data_dir:
        raise CliError("--data is required (checkpoint does not record a data directory)")
    data = load_prepared(data_dir)
    config = model.config
    db = build_db(data, config)
    model, _ = load_model(args.ckpt, db_fingerprint=db.fingerprint())
    ybar, _ = _load_split_forecasts(args.forecasts, data, args.split)
    forecasts = {args.split: ybar}
    out = revise(model, split_inputs(data, forecasts, db, config, args.split))
    ids = data.batches[args.split].ids
    write_forecasts(forecasts_to_records(ids, out["y_pred"], "pir"), args.out)
    with open(_sibling(args.out, "delta"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("instance_id", "channel", "delta"))
        for iid, row in zip(ids, out["delta"]):
            for c, d in enumerate(row):
                w.writerow((int(iid), c, repr(float(d))))
    _snapshot(args, _sibling(args.out, "config", ".json"), data_resolved=str(data_dir))


def _read_deltas(path: Path) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            sums.setdefault(int(row["instance_id"]), []).append(float(row["delta"]))
    return {iid: float(np.mean(v)) for iid, v in sums.items()}


def cmd_eval(args) -> None:
    data_dir = args.data
    if data_dir is None:
        snap = _sibling(args.pred, "config", ".json")
        if snap.exists():
            data_dir = json.loads(snap.read_text()).get("data_resolved")
    if not data_dir:
        raise CliError("--data is required")
    data = load_prepared(data_dir)
    windows = data.windows[args.split]
    pred = load_external_forecasts(forecast_path(args.pred, args.split), windows)
    base = load_external_forecasts(forecast_path(args.base, args.split), windows)
    ids = [w.id for w in windows]
    target = np.stack([w.y for w in windows])
    base_err = errors_from_arrays(ids, np.stack([base[i].values for i in ids]), target)
    rev_err = errors_from_arrays(ids, np.stack([pred[i].values for i in ids]), target)
    delta_file = Path(args.delta) if args.delta else _sibling(args.pred, "delta")
    deltas = _read_deltas(delta_file) if delta_file.exists() else None
    metrics = write_report(args.out, base_err, rev_err, data.lout, deltas, args.bins)
    _snapshot(args, Path(args.out) / "effective_config.json", data_resolved=str(data_dir))
    avg = metrics["average"]
    print(f"MSE {avg['base_mse']:.6f} -> {avg['revised_mse']:.6f} ({avg['mse_improvement']:.2f}%)")


def cmd_ablate(args) -> None:
    data = load_prepared(args.data)
    parts = [args.variant] if isinstance(args.variant, str) else args.variant
    variants = [v for part in parts for v in part.split(",") if v]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CliError(f"unknown variants {bad}; choose from {VARIANTS}")
    config = _config_from_args(args, data)
    run = _load_run(args, data, config)
    rows = run_ablation(data, run, config, variants, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("variant", "mse", "mae", "best_epoch"))
        for r in rows:
            w.writerow((r["variant"], repr(r["mse"]), repr(r["mae"]), r["best_epoch"]))
    (out / "ablation.json").write_text(json.dumps(rows, indent=2))
    _snapshot(args, out / "effective_config.json", model_config=config.to_dict())
    for r in rows:
        print(f"{r['variant']:<10} mse {r['mse']:.6f}  mae {r['mae']:.6f}")


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="directory written by `ingest`")
    p.add_argument("--forecasts", required=True, help="forecast-exchange file (per split)")
    for flag, dest, typ in TRAIN_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)
    for flag, dest in BOOL_FLAGS:
        p.add_argument(flag, dest=dest, action="store_true")
    p.add_argument("--ridge", type=float, default=1e-3, help="ridge for the joint linear backbone")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="pir", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file of option values")
        p.set_defaults(func=func)
        subs[name] = p
        return p

    p = add("synth", cmd_synth, "generate the synthetic long-tail benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-motifs", action="store_true")
    p.add_argument("--length", type=int, default=None)

    p = add("ingest", cmd_ingest, "split, standardise and window a CSV series")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="7:1:2")
    p.add_argument("--lin", type=int, default=96)
    p.add_argument("--lout", type=int, default=96)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("backbone", cmd_backbone, "write backbone forecasts in the exchange format")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", choices=("seasonal", "linear"), default="seasonal")
    p.add_argument("--period", type=int, default=24)
    p.add_argument("--ridge", type=float, default=1e-3)
    p.add_argument("--holdout-refit", action="store_true")
    p.add_argument("--external", help="validate and re-emit an external forecast file")
    p.add_argument("--split", choices=SPLITS, default=None, help="write only this split to --out")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train PIR on top of backbone forecasts")
    _add_training_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--save-db", default=None, help="also persist the retrieval database here")

    p = add("revise", cmd_revise, "apply a trained model to a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--forecasts", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "compare revised and backbone forecasts")
    p.add_argument("--pred", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--delta", default=None)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("ablate", cmd_ablate, "retrain and score PIR variants")
    _add_training_flags(p)
    p.add_argument("--variant", action="append", default=None,
                   help="comma-separated or repeated; default all four")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True)
    return parser, subs


def _prescan(argv: list[str], commands) -> tuple[str | None, str | None]:
    """Find the subcommand and ``--config`` value before full parsing."""
    command = next((tok for tok in argv if tok in commands), None)
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if tok.startswith("--config="):
            return command, tok.split("=", 1)[1]
    return command, None


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _prescan(argv, subs)
    if command and config:
        try:
            values = json.loads(Path(config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {config}: {exc}")
        if not isinstance(values, dict):
            parser.error(f"config {config} must hold a JSON object")
        sp = subs[command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            parser.error(f"config {config}: unknown options {unknown}")
        # file values become defaults, so explicit flags still win
        sp.set_defaults(**values)
        for action in sp._actions:
            if action.dest in values:
                action.required = False
    args = parser.parse_args(argv)
    if args.command == "ablate" and not args.variant:
        args.variant = list(VARIANTS)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, IngestionError, WindowError, JoinError, RetrievalError, CheckpointError,
            TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"pir {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
