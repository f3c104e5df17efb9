"""Head-utilization images and agreement statistics across runs and tasks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trainer import UtilizationGrid


class AnalysisError(ValueError):
    pass


# exact halves such as 255 * 13/30 land a few ulps low in floating point
_HALF_SLACK = 1e-9


def quantize(z) -> np.ndarray:
    """round-half-up(255 * (1 - z)) as uint8; 0 is black (fully used)."""
    z = np.asarray(z, dtype=float)
    return np.clip(np.floor(255.0 * (1.0 - z) + 0.5 + _HALF_SLACK), 0, 255).astype(np.uint8)


@dataclass
class RunBundle:
    """Three runs of one task/model, mapped to the R, G and B channels."""
    grids: list[UtilizationGrid]

    def __post_init__(self):
        if len(self.grids) != 3:
            raise AnalysisError(f"a run bundle needs exactly 3 grids, got {len(self.grids)}")
        shapes = {g.values.shape for g in self.grids}
        if len(shapes) != 1:
            raise AnalysisError(f"grid shapes differ: {sorted(shapes)}")

    def stack(self) -> np.ndarray:
        return np.stack([g.values for g in self.grids], axis=-1)


def rgb_encode(bundle: RunBundle) -> np.ndarray:
    """(layers, heads, 3) uint8 image."""
    return quantize(bundle.stack())


def gray_overlay(grids: Sequence[UtilizationGrid], tasks: int = 5, runs: int = 3) -> np.ndarray:
    """Mean utilization per head over ``tasks`` x ``runs`` grids."""
    if len(grids) != tasks * runs:
        raise AnalysisError(f"overlay expects {tasks}x{runs}={tasks * runs} grids, got {len(grids)}")
    if len({g.values.shape for g in grids}) != 1:
        raise AnalysisError("grid shapes differ")
    return np.mean([g.values for g in grids], axis=0)


def gray_image(H: np.ndarray) -> np.ndarray:
    q = quantize(H)
    return np.repeat(q[..., None], 3, axis=-1)


def adjusted_r2(run1, run2, run3) -> float:
    """OLS of run3 on an intercept plus run1 and run2, adjusted for 2 predictors."""
    y = np.asarray(run3, dtype=float).ravel()
    X = np.column_stack([np.ones_like(y), np.ravel(run1), np.ravel(run2)])
    n, p = X.shape
    if n < 4:
        raise AnalysisError(f"need at least 4 heads, got {n}")
    if np.linalg.matrix_rank(X) < p:
        raise AnalysisError("singular design matrix: predictors are collinear or constant")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(resid @ resid)
    if ss_tot == 0:
        raise AnalysisError("dependent run has zero variance")
    r2 = 1.0 - ss_res / ss_tot
    k = p - 1
    return 1.0 - (1.0 - r2) * (n - 1) / (n - k - 1)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise AnalysisError(f"length mismatch {x.size} vs {y.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(dx @ dx), math.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise AnalysisError("zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def write_ppm(image: np.ndarray, path, scale: int = 1) -> Path:
    """Binary P6 image; each pixel becomes a ``scale`` x ``scale`` block."""
    if scale < 1:
        raise AnalysisError("scale must be >= 1")
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise AnalysisError(f"expected (h, w, 3) image, got {img.shape}")
    img = np.repeat(np.repeat(img.astype(np.uint8), scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise AnalysisError(f"{path}: not a P6 image")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- tables

def write_utilization_csv(rows: Sequence[tuple[str, int, UtilizationGrid]], path) -> Path:
    """rows: (task, run, grid) triples."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "run", "task", "expected_z"])
        for task, run, g in rows:
            for (i, j), v in np.ndenumerate(g.values):
                w.writerow([i, j, run, task, repr(float(v))])
    return path


def pairwise_pearson(models: dict[str, Sequence[UtilizationGrid]]) -> list[tuple[str, str, float]]:
    """Pearson between run-averaged utilizations for every model pair."""
    means = {m: np.mean([g.values for g in gs], axis=0) for m, gs in models.items()}
    names = list(means)
    out = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            out.append((a, b, pearson(means[a], means[b])))
    return out


def write_statistics_csv(r2: dict[str, float], pairs: Sequence[tuple[str, str, float]], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "adj_r2"])
        for m, v in r2.items():
            w.writerow([m, repr(float(v))])
        w.writerow([])
        w.writerow(["model_a", "model_b", "pearson"])
        for a, b, v in pairs:
            w.writerow([a, b, repr(float(v))])
    return path
