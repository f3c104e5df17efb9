"""Adam optimizer and the checkpoint file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    """Adam over an ordered parameter list.

    ``lr_scale`` lets each parameter carry its own learning rate (encoder,
    decoder and gate groups train at different rates).
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lrs: Sequence[float] | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])
        self.lrs = list(lrs) if lrs is not None else [lr] * len(self.params)

    def step(self, grads: Sequence[np.ndarray], lr_mult: float = 1.0,
             active: Sequence[bool] | None = None) -> None:
        adam_step(self.state, self.params, grads, self.lrs, lr_mult, active)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray],
              lrs: Sequence[float] | None = None, lr_mult: float = 1.0,
              active: Sequence[bool] | None = None) -> None:
    """One bias-corrected Adam update, mutating ``params`` in place.

    Parameters flagged inactive keep both their value and their moments.
    """
    if len(grads) != len(params):
        raise ValueError(f"{len(grads)} gradients for {len(params)} parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if active is not None and not active[i]:
            continue
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = (lrs[i] if lrs is not None else state.lr) * lr_mult
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, named: dict[str, Tensor], meta: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in named.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    manifest = dict(meta or {})
    manifest["parameters"] = entries
    manifest["blob"] = path.with_suffix(".bin").name
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path.with_suffix(".json")


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path).with_suffix(".json")
    manifest = json.loads(path.read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    arrays = {}
    for e in manifest["parameters"]:
        n = math.prod(e["shape"])
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest
