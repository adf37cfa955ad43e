"""Synthetic datasets: Gaussian mixtures, box rejection sampling, clipped noise.

Also the comma-separated dataset format (header ``x0,...,x{d-1},label``,
label ``-1`` for unlabeled rows) and the named presets used by the CLI and the
acceptance experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "Component",
    "MixtureSpec",
    "BoxSpec",
    "Dataset",
    "DataError",
    "sample_mixture",
    "mixture_logpdf",
    "contour_density",
    "rejection_sample_ood",
    "uniform_box",
    "uniform_annulus",
    "gaussian_noise",
    "write_dataset",
    "read_dataset",
    "FIG5_MIXTURE",
    "FIG2_MIXTURE",
    "BOX_FIG5_FAR",
    "BOX_FIG5_NEAR",
    "BOX_TOY_GAN",
    "BOX_ANNULUS_INNER",
    "PRESETS",
    "make_preset",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    mean: tuple[float, ...]
    std: float
    weight: float
    label: int


@dataclass(frozen=True)
class MixtureSpec:
    components: tuple[Component, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise DataError("mixture needs at least one component")
        d = len(comps[0].mean)
        for c in comps:
            if len(c.mean) != d:
                raise DataError("component means disagree on dimension")
            if not c.std > 0:
                raise DataError("component stddev must be positive")
            if not c.weight > 0:
                raise DataError("component weight must be positive")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-12:
            raise DataError(f"component weights sum to {total!r}, not 1")

    @property
    def dims(self) -> int:
        return len(self.components[0].mean)

    @property
    def n_classes(self) -> int:
        return max(c.label for c in self.components) + 1

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components], dtype=np.float64)

    @property
    def mean(self) -> np.ndarray:
        w = np.array([c.weight for c in self.components])
        return w @ self.means


@dataclass(frozen=True)
class BoxSpec:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or not np.all(lo < hi):
            raise DataError("box needs lower < upper componentwise")

    @classmethod
    def square(cls, half: float, d: int = 2) -> "BoxSpec":
        return cls((-half,) * d, (half,) * d)

    @property
    def dims(self) -> int:
        return len(self.lower)

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    origin: str = "in"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise DataError("inputs must be an N x d matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise DataError("labels must have one entry per input row")
        if self.origin not in ("in", "out", "generated"):
            raise DataError(f"unknown origin {self.origin!r}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dims(self) -> int:
        return self.inputs.shape[1]


def _two_gaussians(offset: float, std: float) -> MixtureSpec:
    return MixtureSpec((
        Component((-offset, 0.0), std, 0.5, 0),
        Component((offset, 0.0), std, 0.5, 1),
    ))


FIG5_MIXTURE = _two_gaussians(10.0, 2.0)
FIG2_MIXTURE = _two_gaussians(4.0, 1.0)
BOX_FIG5_FAR = BoxSpec.square(50.0)
BOX_FIG5_NEAR = BoxSpec.square(20.0)
BOX_TOY_GAN = BoxSpec.square(10.0)


def sample_mixture(spec: MixtureSpec, n: int, seed) -> Dataset:
    if n < 0:
        raise DataError("n must be non-negative")
    rng = np.random.default_rng(seed)
    weights = np.array([c.weight for c in spec.components])
    which = rng.choice(len(weights), size=n, p=weights / weights.sum())
    noise = rng.standard_normal((n, spec.dims))
    stds = np.array([c.std for c in spec.components])
    x = spec.means[which] + stds[which, None] * noise
    labels = np.array([c.label for c in spec.components], dtype=np.int64)[which]
    return Dataset(x, labels, "in")


def mixture_logpdf(spec: MixtureSpec, x) -> np.ndarray | float:
    """``log sum_c w_c N(x; mu_c, sigma_c^2 I)`` for one point or a batch of rows."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    pts = np.atleast_2d(arr)
    d = spec.dims
    parts = []
    for c in spec.components:
        sq = np.sum((pts - np.asarray(c.mean)) ** 2, axis=1)
        parts.append(
            np.log(c.weight) - 0.5 * d * np.log(2 * np.pi * c.std**2) - sq / (2 * c.std**2)
        )
    out = logsumexp(np.stack(parts, axis=0), axis=0)
    return float(out[0]) if single else out


def contour_density(spec: MixtureSpec, k: float = 3.0) -> float:
    """Smallest ``w_c N(mu_c + k sigma_c; mu_c, sigma_c)`` over components.

    Any point within ``k sigma_c`` of some mean has mixture density at least
    this value, so rejecting densities at or above it clears those disks.
    """
    d = spec.dims
    vals = [
        c.weight * (2 * np.pi * c.std**2) ** (-d / 2) * np.exp(-0.5 * k * k)
        for c in spec.components
    ]
    return float(min(vals))


def uniform_box(box: BoxSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(box.lower, box.upper, size=(n, box.dims))


def rejection_sample_ood(
    box: BoxSpec, spec: MixtureSpec, density_threshold: float, n: int, seed
) -> Dataset:
    """Uniform points on `box` whose mixture density is below `density_threshold`."""
    if n < 0:
        raise DataError("n must be non-negative")
    if box.dims != spec.dims:
        raise DataError("box and mixture dimensions differ")
    rng = np.random.default_rng(seed)
    if n == 0:
        return Dataset(np.zeros((0, box.dims)), None, "out")
    log_thr = np.log(density_threshold) if density_threshold > 0 else -np.inf

    def accept(pts):
        if np.isposinf(density_threshold):
            return np.ones(len(pts), dtype=bool)
        return mixture_logpdf(spec, pts) < log_thr

    pilot = uniform_box(box, 10 * n, rng)
    ok = accept(pilot)
    rate = ok.mean()
    if rate < 1e-3:
        raise DataError(f"rejection sampler starved: acceptance rate {rate:.3g} < 0.001")
    kept = [pilot[ok]]
    have = len(kept[0])
    while have < n:
        batch = uniform_box(box, max(10 * (n - have), 64), rng)
        good = batch[accept(batch)]
        kept.append(good)
        have += len(good)
    return Dataset(np.concatenate(kept)[:n], None, "out")


def uniform_annulus(outer: BoxSpec, inner: BoxSpec, n: int, seed) -> Dataset:
    """Uniform points in `outer` but outside `inner`."""
    rng = np.random.default_rng(seed)
    kept, have = [], 0
    while have < n:
        pts = uniform_box(outer, max(2 * (n - have), 64), rng)
        pts = pts[~inner.contains(pts)]
        kept.append(pts)
        have += len(pts)
    x = np.concatenate(kept)[:n] if kept else np.zeros((0, outer.dims))
    return Dataset(x, None, "out")


def gaussian_noise(n: int, d: int, seed) -> Dataset:
    """Entries i.i.d. Normal(mean 0.5, variance 1), clipped to [0, 1]."""
    if n < 0 or d < 0:
        raise DataError("n and d must be non-negative")
    rng = np.random.default_rng(seed)
    return Dataset(np.clip(rng.normal(0.5, 1.0, size=(n, d)), 0.0, 1.0), None, "out")


# -- named setups ------------------------------------------------------------

BOX_ANNULUS_INNER = BoxSpec.square(25.0)

PRESETS = {
    "fig5-in": "two classes at (+-10, 0), std 2",
    "fig5-ood-near": "rejection sample on [-20,20]^2 below the 3-sigma contour density",
    "fig5-ood-far": "rejection sample on [-50,50]^2 below the 3-sigma contour density",
    "fig5-annulus": "uniform on [-50,50]^2 minus [-25,25]^2 (unseen test OOD)",
    "fig2-target": "two classes at (+-4, 0), std 1",
    "fig2-ood": "rejection sample on [-10,10]^2 below the 3-sigma contour density",
}


def make_preset(name: str, n: int, seed) -> Dataset:
    """Draw `n` points from one of the named setups in :data:`PRESETS`."""
    if name == "fig5-in":
        return sample_mixture(FIG5_MIXTURE, n, seed)
    if name == "fig2-target":
        return sample_mixture(FIG2_MIXTURE, n, seed)
    if name == "fig5-annulus":
        return uniform_annulus(BOX_FIG5_FAR, BOX_ANNULUS_INNER, n, seed)
    boxes = {"fig5-ood-near": (BOX_FIG5_NEAR, FIG5_MIXTURE),
             "fig5-ood-far": (BOX_FIG5_FAR, FIG5_MIXTURE),
             "fig2-ood": (BOX_TOY_GAN, FIG2_MIXTURE)}
    if name not in boxes:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    box, spec = boxes[name]
    return rejection_sample_ood(box, spec, contour_density(spec), n, seed)


# -- CSV round trip ---------------------------------------------------------

def _header(d: int) -> list[str]:
    return [f"x{i}" for i in range(d)] + ["label"]


def write_dataset(path, dataset: Dataset) -> None:
    d = dataset.dims
    labels = dataset.labels if dataset.labels is not None else np.full(len(dataset), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(d))
        for row, lab in zip(dataset.inputs, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_dataset(path, origin: str | None = None, dims: int | None = None) -> Dataset:
    """Read a dataset file; an all ``-1`` label column yields ``labels=None``.

    Origin defaults to ``in`` for labeled files and ``out`` for unlabeled ones.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 1 if dims is None else dims
        expected = _header(d)
        if header != expected:
            raise DataError(f"{path}: header {header} does not match expected columns {expected}")
        xs, labels = [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != d + 1:
                raise DataError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                xs.append([float(v) for v in row[:d]])
                labels.append(int(row[d]))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not all(np.isfinite(xs[-1])):
                raise DataError(f"{path}: line {lineno}: non-finite value")
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    lab = np.array(labels, dtype=np.int64)
    if len(lab) == 0 or np.all(lab == -1):
        return Dataset(x, None, origin or "out")
    if np.any(lab < 0):
        raise DataError(f"{path}: mixes unlabeled (-1) and labeled rows")
    return Dataset(x, lab, origin or "in")
