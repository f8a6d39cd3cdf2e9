"""Metrics, per-instance error distributions, delta fidelity and report tables."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

KDE_POINTS = 256
BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class InstanceError:
    instance_id: int
    mse: float
    mae: float


def per_instance_errors(predictions: Mapping[int, np.ndarray], targets: Mapping[int, np.ndarray]
                        ) -> list[InstanceError]:
    """MSE/MAE over all N x L_out cells of each instance, ordered by id."""
    unmatched = sorted(set(predictions) ^ set(targets))
    if unmatched:
        raise KeyError(f"unmatched instance ids: {unmatched}")
    out = []
    for iid in sorted(predictions):
        p, t = np.asarray(predictions[iid]), np.asarray(targets[iid])
        if p.shape != t.shape:
            raise ValueError(f"instance {iid}: prediction {p.shape} vs target {t.shape}")
        d = p - t
        out.append(InstanceError(int(iid), float((d * d).mean()), float(np.abs(d).mean())))
    return out


def errors_from_arrays(ids: Sequence[int], pred: np.ndarray, target: np.ndarray) -> list[InstanceError]:
    return per_instance_errors(dict(zip(map(int, ids), pred)), dict(zip(map(int, ids), target)))


# ---------------------------------------------------------------------------
# distributions


def scott_bandwidth(samples: np.ndarray) -> float:
    """n^(-1/5) times the population standard deviation."""
    x = np.asarray(samples, dtype=np.float64)
    return float(x.std() * len(x) ** (-0.2))


def gaussian_kde(samples: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    z = (np.asarray(grid)[:, None] - np.asarray(samples)[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(samples) * bandwidth * math.sqrt(2 * math.pi))


@dataclass
class ErrorDistribution:
    counts: np.ndarray
    edges: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    peak: float        # error value at maximum density

    def rows(self) -> list[dict]:
        out = []
        for i, c in enumerate(self.counts):
            out.append({"kind": "hist", "x": float(0.5 * (self.edges[i] + self.edges[i + 1])),
                        "lo": float(self.edges[i]), "hi": float(self.edges[i + 1]), "value": float(c)})
        for g, d in zip(self.grid, self.density):
            out.append({"kind": "kde", "x": float(g), "lo": "", "hi": "", "value": float(d)})
        return out


def error_distribution(errors, bins: int = 50, points: int = KDE_POINTS) -> ErrorDistribution:
    """Equal-width histogram over [min, max] and a Gaussian KDE (Scott bandwidth).

    The KDE is sampled on ``points`` evenly spaced values spanning three
    bandwidths beyond the data range.
    """
    e = np.asarray([x.mse if isinstance(x, InstanceError) else x for x in errors], dtype=np.float64)
    if e.size < 2:
        raise ValueError("error_distribution needs at least 2 errors")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    lo, hi = float(e.min()), float(e.max())
    counts, edges = np.histogram(e, bins=bins, range=(lo, hi) if hi > lo else (lo - 0.5, lo + 0.5))
    h = scott_bandwidth(e)
    if h < BANDWIDTH_FLOOR:
        log.warning("degenerate error distribution; KDE bandwidth floored at %g", BANDWIDTH_FLOOR)
        h = BANDWIDTH_FLOOR
    grid = np.linspace(lo - 3 * h, hi + 3 * h, points)
    density = gaussian_kde(e, grid, h)
    return ErrorDistribution(counts, edges, grid, density, h, float(grid[np.argmax(density)]))


# ---------------------------------------------------------------------------
# delta fidelity


def delta_fidelity(delta, realized) -> dict:
    """Pearson r between predicted and realised error, and R^2 of the linear fit.

    Returns ``defined=False`` (and ``None`` statistics) when either side has
    zero variance.
    """
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    r = np.asarray(realized, dtype=np.float64).reshape(-1)
    if d.shape != r.shape:
        raise ValueError(f"delta {d.shape} vs realised {r.shape}")
    if d.size < 3:
        raise ValueError("delta_fidelity needs at least 3 instances")
    if d.min() == d.max() or r.min() == r.max():
        return {"n": int(d.size), "defined": False, "pearson": None, "r2": None}
    dc, rc = d - d.mean(), r - r.mean()
    sd, sr = math.sqrt((dc * dc).sum()), math.sqrt((rc * rc).sum())
    pearson = float((dc * rc).sum() / (sd * sr))
    slope = (dc * rc).sum() / (dc * dc).sum()
    resid = rc - slope * dc
    r2 = float(1.0 - (resid * resid).sum() / (rc * rc).sum())
    return {"n": int(d.size), "defined": True, "pearson": pearson, "r2": r2}


# ---------------------------------------------------------------------------
# tables


def improvement(base: float, revised: float) -> float:
    """Relative reduction in percent, rounded to 2 decimals."""
    return round((base - revised) / base * 100.0, 2)


@dataclass
class EvalRow:
    horizon: int | str
    base_mse: float
    base_mae: float
    revised_mse: float
    revised_mae: float

    @property
    def mse_improvement(self) -> float:
        return improvement(self.base_mse, self.revised_mse)

    @property
    def mae_improvement(self) -> float:
        return improvement(self.base_mae, self.revised_mae)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mse_improvement"] = self.mse_improvement
        d["mae_improvement"] = self.mae_improvement
        return d


@dataclass
class EvalReport:
    rows: list[EvalRow]
    average: EvalRow
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "average": self.average.to_dict(), **self.extras}


def aggregate_report(runs: Sequence[Mapping]) -> EvalReport:
    """One row per horizon run plus the mean over horizons."""
    if not runs:
        raise ValueError("aggregate_report needs at least one run")
    rows = [EvalRow(r["horizon"], float(r["base_mse"]), float(r["base_mae"]),
                    float(r["revised_mse"]), float(r["revised_mae"])) for r in runs]
    avg = EvalRow("avg", *(float(np.mean([getattr(r, f) for r in rows]))
                          for f in ("base_mse", "base_mae", "revised_mse", "revised_mae")))
    return EvalReport(rows, avg)


def summarize(base: Sequence[InstanceError], revised: Sequence[InstanceError], horizon) -> dict:
    return {
        "horizon": horizon,
        "base_mse": float(np.mean([e.mse for e in base])),
        "base_mae": float(np.mean([e.mae for e in base])),
        "revised_mse": float(np.mean([e.mse for e in revised])),
        "revised_mae": float(np.mean([e.mae for e in revised])),
    }


def tail_improvement(base: Sequence[InstanceError], revised: Sequence[InstanceError],
                     quantile: float = 0.9) -> dict:
    """Improvement restricted to instances whose backbone error is in the top decile."""
    b = np.array([e.mse for e in base])
    r = np.array([e.mse for e in revised])
    cut = np.quantile(b, quantile)
    tail = b >= cut
    return {"threshold": float(cut), "count": int(tail.sum()),
            "base_mse": float(b[tail].mean()), "revised_mse": float(r[tail].mean()),
            "improvement": improvement(float(b[tail].mean()), float(r[tail].mean()))}


# ---------------------------------------------------------------------------
# writers


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_report(out_dir: str | Path, base: Sequence[InstanceError], revised: Sequence[InstanceError],
                 horizon, delta_by_instance: Mapping[int, float] | None = None, bins: int = 50) -> dict:
    """Emit metrics.json, per_instance.csv, distribution.csv and delta_fidelity.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = aggregate_report([summarize(base, revised, horizon)])
    dist_base = error_distribution(base, bins)
    dist_rev = error_distribution(revised, bins)
    metrics = report.to_dict()
    metrics["tail"] = tail_improvement(base, revised)
    metrics["peak_density_mse"] = {"base": dist_base.peak, "revised": dist_rev.peak}
    metrics["max_mse"] = {"base": max(e.mse for e in base), "revised": max(e.mse for e in revised)}

    _write_rows(out / "per_instance.csv", ("instance_id", "base_mse", "base_mae", "revised_mse", "revised_mae"),
                ((b.instance_id, b.mse, b.mae, r.mse, r.mae) for b, r in zip(base, revised)))
    _write_rows(out / "distribution.csv", ("series", "kind", "x", "lo", "hi", "value"),
                [(name, row["kind"], row["x"], row["lo"], row["hi"], row["value"])
                 for name, dist in (("base", dist_base), ("revised", dist_rev)) for row in dist.rows()])
    if delta_by_instance is not None:
        ids = [b.instance_id for b in base]
        deltas = [float(delta_by_instance[i]) for i in ids]
        realized = [b.mse for b in base]
        metrics["delta_fidelity"] = delta_fidelity(deltas, realized)
        _write_rows(out / "delta_fidelity.csv", ("instance_id", "delta_mean", "realized_mse"),
                    zip(ids, deltas, realized))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return metrics
