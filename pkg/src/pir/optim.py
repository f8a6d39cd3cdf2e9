"""Adam optimiser and JSON parameter checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

CHECKPOINT_VERSION = "pir-ckpt-1"


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, corrupt or of the wrong version."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                state: AdamState) -> Mapping[str, Tensor]:
    """Apply one bias-corrected Adam step in place and advance ``state``."""
    if state.step < 0:
        raise ValueError(f"Adam step counter must be >= 0, got {state.step}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in self.params.items()}
        adam_update(self.params, grads, self.state)


# ---------------------------------------------------------------------------
# checkpoints


def params_to_json(params: Mapping[str, Tensor | np.ndarray]) -> dict:
    out = {}
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        out[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    return out


def params_from_json(blob: Mapping) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in blob.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"parameter {name!r}: malformed entry ({exc})") from None
        if values.size != math.prod(shape):
            raise CheckpointError(f"parameter {name!r}: {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor | np.ndarray], **extra) -> None:
    doc = {"version": CHECKPOINT_VERSION, **extra, "params": params_to_json(params)}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(params, extra)``; everything is validated before returning."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise CheckpointError(f"checkpoint version {found!r}, expected {CHECKPOINT_VERSION!r}")
    if not isinstance(doc.get("params"), dict):
        raise CheckpointError("checkpoint has no parameter table")
    params = params_from_json(doc.pop("params"))
    doc.pop("version")
    return params, doc
