"""Hard Concrete head gates with a closed-form L0 penalty."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEFAULT_L = -0.1
DEFAULT_R = 1.1
DEFAULT_ALPHA0 = 2.0


def _check_interval(l: float, r: float) -> None:
    if not (l < 0 < 1 < r):
        raise ValueError(f"stretch interval needs l < 0 < 1 < r, got ({l}, {r})")


@dataclass
class GateParams:
    alpha: Tensor          # (layers, heads) logits
    l: float = DEFAULT_L
    r: float = DEFAULT_R

    def __post_init__(self):
        _check_interval(self.l, self.r)
        if not np.all(np.isfinite(self.alpha.data)):
            raise ValueError("gate logits must be finite")

    @classmethod
    def init(cls, layers: int, heads: int, alpha0: float = DEFAULT_ALPHA0,
             l: float = DEFAULT_L, r: float = DEFAULT_R) -> "GateParams":
        return cls(T.parameter(np.full((layers, heads), alpha0), name="gates.alpha"), l, r)

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def records(self) -> list[dict]:
        L, H = self.shape
        return [{"layer": i, "head": j, "alpha": float(self.alpha.data[i, j]),
                 "l": self.l, "r": self.r} for i in range(L) for j in range(H)]


def sample_gate(alpha, u, l: float = DEFAULT_L, r: float = DEFAULT_R) -> Tensor:
    """z = min(1, max(0, sigmoid(log u - log(1-u) + alpha) * (r - l) + l)).

    Works elementwise on arrays; gradients flow to ``alpha`` where unclipped.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("uniform sample must lie strictly inside (0, 1)")
    _check_interval(l, r)
    noise = np.log(u) - np.log1p(-u)
    g = T.sigmoid(T.add(alpha, noise))
    return T.clamp(T.add(T.scale(g, r - l), l), 0.0, 1.0)


def expected_gate(alpha, l: float = DEFAULT_L, r: float = DEFAULT_R) -> Tensor:
    """sigmoid(alpha - log(-l/r)).

    Despite the name this is P(z > 0), the quantity the L0 relaxation needs.
    """
    if not (l < 0 < r):
        raise ValueError(f"expected_gate needs l < 0 < r, got ({l}, {r})")
    return T.sigmoid(T.add(alpha, -math.log(-l / r)))


def l0_penalty(gates: GateParams) -> Tensor:
    return T.tsum(expected_gate(gates.alpha, gates.l, gates.r))


def eval_gate(alpha, l: float = DEFAULT_L, r: float = DEFAULT_R) -> np.ndarray:
    """Deterministic test-time gate (the u = 0.5 sample). Zero means the head is pruned."""
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha, dtype=np.float64)
    return np.clip(T._sigmoid(a) * (r - l) + l, 0.0, 1.0)


def prune_threshold(l: float = DEFAULT_L, r: float = DEFAULT_R) -> float:
    """Largest logit whose eval gate is exactly 0."""
    p = -l / (r - l)
    return math.log(p / (1.0 - p))


def utilization(gates: GateParams) -> np.ndarray:
    with T.no_grad():
        return expected_gate(gates.alpha, gates.l, gates.r).data.copy()


def heads_kept(gates: GateParams) -> float:
    z = eval_gate(gates.alpha, gates.l, gates.r)
    return 100.0 * float((z > 0).sum()) / z.size
