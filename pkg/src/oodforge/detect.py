"""Confidence scores, the threshold detector and confidence-grid export.

All score functions are vectorised: they take an ``N x d`` batch (or a single
row) and return one score per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BoxSpec
from .metrics import detection_accuracy
from .nets import ParamSet, classifier_log_probs, classifier_logits, input_gradient

__all__ = [
    "DetectorConfig",
    "ScoreRecord",
    "baseline_score",
    "odin_score",
    "odin_perturb",
    "kplus1_score",
    "density_proxy",
    "detect",
    "score",
    "tune_odin",
    "confidence_grid",
    "grid_centers",
    "write_pgm",
    "write_grid_csv",
    "ODIN_T_GRID",
    "ODIN_EPS_GRID",
]

ODIN_T_GRID = (1.0, 10.0, 100.0, 500.0, 1000.0)
ODIN_EPS_GRID = (0.0, 0.0001, 0.001, 0.01)


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "baseline"
    T: float = 1.0
    eps: float = 0.0
    delta: float = 0.5
    clip_inputs: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("baseline", "odin", "kplus1"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if not self.T > 0:
            raise ValueError("temperature T must be positive")
        if self.eps < 0:
            raise ValueError("perturbation magnitude must be non-negative")


@dataclass(frozen=True)
class ScoreRecord:
    score: float
    origin: str

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("score must be finite")
        if self.origin not in ("in", "out"):
            raise ValueError(f"origin must be 'in' or 'out', got {self.origin!r}")


def _max_prob(log_probs: np.ndarray) -> np.ndarray:
    return np.exp(log_probs.max(axis=1))


def baseline_score(theta: ParamSet, x) -> np.ndarray:
    """Maximum softmax probability."""
    return _max_prob(classifier_log_probs(theta, x))


def odin_perturb(theta: ParamSet, x, T: float, eps: float, clip=None) -> np.ndarray:
    """``x' = x - eps * sign(-grad_x log P(y_hat | x; T))``, optionally clipped."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps == 0:
        out = x
    else:
        y_hat = np.argmax(classifier_logits(theta, x), axis=1)
        grad = input_gradient(theta, x, "log_prob_of_label", labels=y_hat, temperature=T)
        out = x - eps * np.sign(-grad)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def odin_score(theta: ParamSet, x, T: float = 1.0, eps: float = 0.0, clip=None) -> np.ndarray:
    """Max temperature-scaled softmax after the signed input perturbation."""
    if not T > 0:
        raise ValueError("temperature T must be positive")
    if eps < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    return _max_prob(classifier_log_probs(theta, odin_perturb(theta, x, T, eps, clip), T))


def kplus1_score(theta: ParamSet, x) -> np.ndarray:
    """``1 - P(OOD class | x)``; the OOD class is the last output."""
    if theta.spec.output_dim < 2:
        raise ValueError("a K+1 classifier needs at least two outputs")
    return 1.0 - np.exp(classifier_log_probs(theta, x)[:, -1])


def density_proxy(theta: ParamSet, x) -> np.ndarray:
    """``exp(KL(U || P(.|x)))``; 1 for a uniform prediction, larger when confident."""
    lp = classifier_log_probs(theta, x)
    k = lp.shape[1]
    return np.exp(-np.log(k) - lp.mean(axis=1))


def detect(score, delta: float):
    """1 where ``score >= delta`` (boundary counts as in-distribution), else 0."""
    s = np.asarray(score)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    out = (s >= delta).astype(int)
    return int(out) if out.ndim == 0 else out


def score(theta: ParamSet, x, config: DetectorConfig) -> np.ndarray:
    if config.kind == "baseline":
        return baseline_score(theta, x)
    if config.kind == "odin":
        return odin_score(theta, x, config.T, config.eps, config.clip_inputs)
    return kplus1_score(theta, x)


def tune_odin(theta: ParamSet, val_in, val_out, T_grid=ODIN_T_GRID, eps_grid=ODIN_EPS_GRID,
              clip=None):
    """Pick (T, eps) minimising validation detection error ``1 - detection_accuracy``.

    `val_out` should be drawn apart from the test OOD set.  Ties go to the
    earliest grid point, T varying slowest.  Returns ``(config, table)`` where
    `table` lists ``(T, eps, error)`` in grid order.
    """
    table = []
    for T in T_grid:
        for eps in eps_grid:
            err = 1.0 - detection_accuracy(odin_score(theta, val_in, T, eps, clip),
                                           odin_score(theta, val_out, T, eps, clip))
            table.append((float(T), float(eps), err))
    if not table:
        raise ValueError("empty ODIN grid")
    best = min(range(len(table)), key=lambda i: (table[i][2], i))
    T, eps, _ = table[best]
    return DetectorConfig("odin", T, eps, clip_inputs=clip), table


def grid_centers(box: BoxSpec, resolution) -> tuple[np.ndarray, np.ndarray]:
    if box.dims != 2:
        raise ValueError("confidence grids need a 2D box")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    if nx < 2 or ny < 2:
        raise ValueError("grid resolution must be at least 2 per axis")
    xs = box.lower[0] + (np.arange(nx) + 0.5) * (box.upper[0] - box.lower[0]) / nx
    ys = box.lower[1] + (np.arange(ny) + 0.5) * (box.upper[1] - box.lower[1]) / ny
    return xs, ys


def confidence_grid(theta: ParamSet, box: BoxSpec, resolution=100) -> np.ndarray:
    """Max-softmax at cell centres; ``grid[i, j]`` sits at ``(xs[j], ys[i])``, y ascending."""
    xs, ys = grid_centers(box, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return baseline_score(theta, pts).reshape(len(ys), len(xs))


def write_pgm(path, grid: np.ndarray, n_classes: int) -> None:
    """ASCII PGM; scores map linearly from [1/K, 1] to [0, 255], top row = largest y."""
    lo = 1.0 / n_classes
    levels = np.clip(np.rint((grid - lo) / (1.0 - lo) * 255.0), 0, 255).astype(int)
    rows = levels[::-1]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n")
        for row in rows:
            fh.write(" ".join(str(v) for v in row) + "\n")


def write_grid_csv(path, grid: np.ndarray, box: BoxSpec) -> None:
    xs, ys = grid_centers(box, (grid.shape[1], grid.shape[0]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,score\n")
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                fh.write(f"{float(x)!r},{float(y)!r},{float(grid[i, j])!r}\n")
