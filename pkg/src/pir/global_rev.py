"""Global revision: exact top-K retrieval of similar training windows.

Keys are instance-normalised input windows scaled to unit length, so cosine
similarity is a plain inner product.  Values are the matching target windows
in the (globally standardised) data space.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import WindowBatch, WindowInstance, stack_windows

DB_VERSION = "pir-db-1"
ENCODE_STD_FLOOR = 1e-8
_BLOCK = 512


class RetrievalError(ValueError):
    pass


def encode(window: np.ndarray) -> np.ndarray:
    """Instance-normalise along the last axis, then scale to unit L2 norm.

    Constant windows map to the zero vector.
    """
    w = np.asarray(window, dtype=np.float64)
    if w.shape[-1] < 2:
        raise ValueError(f"encode needs windows of length >= 2, got {w.shape[-1]}")
    centered = w - w.mean(axis=-1, keepdims=True)
    std = centered.std(axis=-1, keepdims=True)
    # rounding leaves ~1e-16 residue on constant windows; treat them as flat
    z = np.where(std < ENCODE_STD_FLOOR, 0.0, centered / np.maximum(std, ENCODE_STD_FLOOR))
    norm = np.sqrt((z * z).sum(axis=-1, keepdims=True))
    return np.divide(z, norm, out=np.zeros_like(z), where=norm > 0)


@dataclass(frozen=True)
class RetrievalDatabase:
    keys: np.ndarray          # (M_db, L_key)
    values: np.ndarray        # (M_db, L_val)
    instance_ids: np.ndarray  # (M_db,)
    channels: np.ndarray      # (M_db,), -1 for whole-instance entries
    origins: np.ndarray       # (M_db,)
    key_mean: np.ndarray      # (M_db,) mean of the raw input window
    key_std: np.ndarray       # (M_db,) population std of the raw input window
    granularity: str
    lin: int
    lout: int
    n_channels: int

    def __len__(self) -> int:
        return self.keys.shape[0]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{DB_VERSION}|{self.granularity}|{self.lin}|{self.lout}|{self.n_channels}".encode())
        for arr in (self.keys, self.values, self.instance_ids, self.channels, self.origins,
                    self.key_mean, self.key_std):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # -- persistence ---------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in (("keys", self.keys), ("values", self.values)):
            with open(d / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                for row in arr:
                    w.writerow([repr(float(v)) for v in row])
        meta = {
            "version": DB_VERSION,
            "granularity": self.granularity,
            "lin": self.lin,
            "lout": self.lout,
            "n_channels": self.n_channels,
            "instance_ids": self.instance_ids.tolist(),
            "channels": self.channels.tolist(),
            "origins": self.origins.tolist(),
            "key_mean": self.key_mean.tolist(),
            "key_std": self.key_std.tolist(),
            "fingerprint": self.fingerprint(),
        }
        (d / "meta.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, directory: str | Path) -> "RetrievalDatabase":
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        if meta.get("version") != DB_VERSION:
            raise RetrievalError(f"database version {meta.get('version')!r}, expected {DB_VERSION!r}")

        def read(name):
            with open(d / f"{name}.csv", newline="") as fh:
                return np.array([[float(v) for v in row] for row in csv.reader(fh)], dtype=np.float64)

        db = cls(read("keys"), read("values"),
                 np.array(meta["instance_ids"], dtype=np.int64),
                 np.array(meta["channels"], dtype=np.int64),
                 np.array(meta["origins"], dtype=np.int64),
                 np.array(meta["key_mean"], dtype=np.float64),
                 np.array(meta["key_std"], dtype=np.float64),
                 meta["granularity"], meta["lin"], meta["lout"], meta["n_channels"])
        if db.fingerprint() != meta["fingerprint"]:
            raise RetrievalError("database fingerprint mismatch: files were modified")
        return db


@dataclass(frozen=True)
class RetrievalResult:
    indices: np.ndarray    # (K,)
    w: np.ndarray          # (K,) cosine similarities, descending
    retrieved: np.ndarray  # (K, L_val)


def build_database(train_instances: Sequence[WindowInstance] | WindowBatch,
                   granularity: str = "channel") -> RetrievalDatabase:
    """One entry per (instance, channel), or per instance in ``instance`` mode."""
    if granularity not in ("channel", "instance"):
        raise ValueError(f"granularity must be 'channel' or 'instance', got {granularity!r}")
    batch = train_instances if isinstance(train_instances, WindowBatch) else None
    if batch is None:
        if not train_instances:
            raise RetrievalError("cannot build a retrieval database from an empty training set")
        batch = stack_windows(list(train_instances))
    if len(batch) == 0:
        raise RetrievalError("cannot build a retrieval database from an empty training set")
    m, n, lin = batch.x.shape
    lout = batch.y.shape[2]
    if granularity == "channel":
        raw = batch.x.reshape(m * n, lin)
        values = batch.y.reshape(m * n, lout)
        ids = np.repeat(batch.ids, n)
        channels = np.tile(np.arange(n), m)
        origins = np.repeat(batch.origins, n)
    else:
        raw = batch.x.reshape(m, n * lin)
        values = batch.y.reshape(m, n * lout)
        ids, channels, origins = batch.ids.copy(), np.full(m, -1), batch.origins.copy()
    arrays = dict(
        keys=encode(raw), values=values.copy(), instance_ids=ids.astype(np.int64),
        channels=channels.astype(np.int64), origins=origins.astype(np.int64),
        key_mean=raw.mean(axis=1), key_std=raw.std(axis=1),
    )
    for arr in arrays.values():
        arr.flags.writeable = False
    return RetrievalDatabase(**arrays, granularity=granularity, lin=lin, lout=lout, n_channels=n)


def _exclusion_mask(db: RetrievalDatabase, origins: np.ndarray, channels: np.ndarray | None) -> np.ndarray:
    """(Q, M_db) True where a database window overlaps the query window."""
    span = db.lin + db.lout
    mask = np.abs(db.origins[None, :] - origins[:, None]) < span
    if db.granularity == "channel" and channels is not None:
        mask &= db.channels[None, :] == channels[:, None]
    return mask


def _top_k(sims: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise top-k, descending, ties broken by lower column index."""
    q, m = sims.shape
    eligible = np.isfinite(sims).sum(axis=1)
    if (eligible < k).any():
        raise RetrievalError(f"K={k} exceeds the {int(eligible.min())} eligible database entries")
    idx = np.empty((q, k), dtype=np.int64)
    if k < m:
        part = np.argpartition(-sims, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(sims, part, axis=1).min(axis=1)
    else:
        kth = np.full(q, -np.inf)
    for r in range(q):
        row = sims[r]
        cand = np.nonzero(row >= kth[r])[0] if k < m else np.nonzero(np.isfinite(row))[0]
        order = np.lexsort((cand, -row[cand]))
        idx[r] = cand[order[:k]]
    return idx, np.take_along_axis(sims, idx, axis=1)


def search(db: RetrievalDatabase, keys: np.ndarray, k: int,
           exclude_origins: np.ndarray | None = None,
           exclude_channels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k over already-encoded query keys; returns (indices, sims)."""
    if k < 1:
        raise RetrievalError(f"K must be >= 1, got {k}")
    keys = np.atleast_2d(keys)
    if keys.shape[1] != db.keys.shape[1]:
        raise RetrievalError(f"query length {keys.shape[1]} != key length {db.keys.shape[1]}")
    out_idx = np.empty((keys.shape[0], k), dtype=np.int64)
    out_sim = np.empty((keys.shape[0], k))
    for start in range(0, keys.shape[0], _BLOCK):
        stop = min(start + _BLOCK, keys.shape[0])
        sims = keys[start:stop] @ db.keys.T
        if exclude_origins is not None:
            ch = None if exclude_channels is None else exclude_channels[start:stop]
            sims[_exclusion_mask(db, exclude_origins[start:stop], ch)] = -np.inf
        out_idx[start:stop], out_sim[start:stop] = _top_k(sims, k)
    return out_idx, out_sim


def retrieve(db: RetrievalDatabase, query: np.ndarray, k: int,
             exclude_window: tuple[int, int | None] | None = None) -> RetrievalResult:
    """Top-k entries for one query window.

    ``exclude_window`` is ``(origin, channel)`` of the query; database windows
    of the same channel overlapping ``[origin - L_in, origin + L_out)`` are
    skipped.  Pass ``None`` to disable exclusion.
    """
    key = encode(np.asarray(query, dtype=np.float64).reshape(-1))
    origins = channels = None
    if exclude_window is not None:
        origin, channel = exclude_window
        origins = np.array([origin])
        channels = None if channel is None else np.array([channel])
    idx, sims = search(db, key[None], k, origins, channels)
    return RetrievalResult(idx[0], sims[0], db.values[idx[0]])


def softmax_weights(w: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(w, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def global_revise(result: RetrievalResult, temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Softmax(w)-weighted sum of the retrieved targets."""
    if len(result.w) < 1:
        raise RetrievalError("global_revise needs at least one retrieved entry")
    p = softmax_weights(result.w, temperature)
    return p @ result.retrieved, result.w


def global_context(db: RetrievalDatabase, batch: WindowBatch, k: int, exclude: bool = False,
                   temperature: float = 1.0, rescale_by_query_stats: bool = False
                   ) -> tuple[np.ndarray, np.ndarray]:
    """y_global (M, N, L_out) and similarity vectors w (M, N, K) for a split."""
    m, n, lin = batch.x.shape
    lout = batch.y.shape[2]
    if (lin, lout, n) != (db.lin, db.lout, db.n_channels):
        raise RetrievalError(f"split windows {(lin, lout, n)} do not match database "
                             f"{(db.lin, db.lout, db.n_channels)}")
    if db.granularity == "channel":
        raw = batch.x.reshape(m * n, lin)
        origins = np.repeat(batch.origins, n) if exclude else None
        channels = np.tile(np.arange(n), m) if exclude else None
    else:
        raw = batch.x.reshape(m, n * lin)
        origins = batch.origins if exclude else None
        channels = None
    idx, sims = search(db, encode(raw), k, origins, channels)
    retrieved = db.values[idx]                       # (Q, K, L_val)
    if rescale_by_query_stats:
        q_mean = raw.mean(axis=1)[:, None, None]
        q_std = raw.std(axis=1)[:, None, None]
        e_mean = db.key_mean[idx][..., None]
        e_std = np.maximum(db.key_std[idx], ENCODE_STD_FLOOR)[..., None]
        retrieved = (retrieved - e_mean) / e_std * q_std + q_mean
    p = softmax_weights(sims, temperature)
    y_global = np.einsum("qk,qkl->ql", p, retrieved)
    if db.granularity == "channel":
        return y_global.reshape(m, n, lout), sims.reshape(m, n, k)
    return y_global.reshape(m, n, lout), np.repeat(sims[:, None, :], n, axis=1)
