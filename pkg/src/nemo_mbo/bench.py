"""Synthetic tasks with known ground truth, dataset file I/O, and
uncertainty profiling over a query grid.

Datasets are plain CSV (header x0..x{d-1},y, floats at 17 significant
digits so round-trips are exact). Ground-truth evaluators here replace
external benchmark suites at desk scale; every generated task records
its own data-support and probe regions.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import cnml as cn
from . import models as mdl

__all__ = [
    "OfflineDataset",
    "SyntheticTask",
    "gen_sin1d",
    "gen_narrow_support",
    "load_dataset",
    "save_dataset",
    "uncertainty_profile",
]

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class OfflineDataset:
    X: np.ndarray
    y: np.ndarray
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} rows of X but {y.shape[0]} outputs")
        if X.shape[0] < 1:
            raise ValueError("dataset must contain at least one point")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise FloatingPointError("dataset contains non-finite entries")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class SyntheticTask:
    """Ground-truth evaluator plus declared support / probe regions."""

    fn: callable
    d: int
    support: tuple  # (lo, hi) arrays or scalars bounding the data region
    probe: tuple
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def evaluate(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.asarray([self.fn(row) for row in X], dtype=np.float64)


def gen_sin1d(n, noise_sd=0.0, support=(-3.0, 3.0), seed=0, probe=None):
    """1-D sine task: x uniform on the support, y = sin(x) (+ noise)."""
    lo, hi = float(support[0]), float(support[1])
    if not hi > lo:
        raise ValueError(f"empty support interval [{lo}, {hi}]")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=n)
    y = np.sin(x)
    if noise_sd > 0:
        y = y + rng.normal(0.0, noise_sd, size=n)
    if probe is None:
        half = hi - lo
        probe = (lo - half / 2.0, hi + half / 2.0)
    task = SyntheticTask(
        fn=lambda v: float(np.sin(v[0])),
        d=1,
        support=(lo, hi),
        probe=(float(probe[0]), float(probe[1])),
        name="sin1d",
        metadata={"noise_sd": noise_sd, "seed": seed},
    )
    return OfflineDataset(x[:, None], y, name="sin1d"), task


def gen_narrow_support(d, n, seed=0):
    """Exploitation testbed: data lives on a 1-D slice that misses the
    true optimum, so naive proxies extrapolate badly off-slice.

    Ground truth is f(x) = -||x - x*||^2 / d with x* = 2*e_1; the data
    slice is the e_0 axis, which never contains x*.
    """
    if d < 2:
        raise ValueError("narrow-support task needs d >= 2")
    rng = np.random.default_rng(seed)
    x_star = np.zeros(d)
    x_star[1] = 2.0
    t = rng.uniform(-2.0, 2.0, size=n)
    X = np.zeros((n, d))
    X[:, 0] = t  # data lives exactly on the e_0 axis; x* sits on e_1

    def fn(v):
        return float(-np.sum((np.asarray(v) - x_star) ** 2) / d)

    y = np.asarray([fn(row) for row in X])
    best_gap = float(0.0 - y.max())
    task = SyntheticTask(
        fn=fn,
        d=d,
        support=(X.min(axis=0), X.max(axis=0)),
        probe=(X.min(axis=0) - 2.0, X.max(axis=0) + 2.0),
        name="narrow_support",
        metadata={"seed": seed, "x_star": x_star.tolist(), "best_gap": best_gap},
    )
    return OfflineDataset(X, y, name="narrow_support"), task


def save_dataset(dataset, path):
    """CSV with header x0..x{d-1},y; atomic write."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i}" for i in range(dataset.d)] + ["y"])
        for row, yv in zip(dataset.X, dataset.y):
            writer.writerow([FLOAT_FMT % v for v in row] + [FLOAT_FMT % yv])
    os.replace(tmp, path)


class DatasetParseError(ValueError):
    pass


def load_dataset(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetParseError(f"{path}: empty file") from None
        if not header or header[-1] != "y":
            raise DatasetParseError(f"{path}:1: header must end with a 'y' column")
        d = len(header) - 1
        rows, ys = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise DatasetParseError(
                    f"{path}:{lineno}: expected {d + 1} fields, got {len(rec)}"
                )
            try:
                vals = [float(v) for v in rec]
            except ValueError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from None
            rows.append(vals[:-1])
            ys.append(vals[-1])
    if not rows:
        raise DatasetParseError(f"{path}: no data rows")
    return OfflineDataset(np.asarray(rows), np.asarray(ys), name=os.path.basename(path))


def uncertainty_profile(estimate_pmf, x_grid, scheme):
    """Tabulate pmf, entropy (nats) and mean score over a 1-D query grid.

    estimate_pmf maps a design vector to a pmf over the scheme's bins; it
    can be an amortized CNML refiner or a baseline-ensemble adapter.
    """
    from .quantization import g_values

    g = g_values(scheme)
    rows = []
    for xv in np.atleast_1d(x_grid):
        x = np.atleast_1d(xv)
        p = np.asarray(estimate_pmf(x), dtype=np.float64)
        rows.append(
            {
                "x": float(x[0]),
                "pmf": p,
                "entropy": cn.entropy(p),
                "y_mean": float(p @ g),
            }
        )
    return rows


def cnml_profile_fn(ensemble, X, y, refine_steps, lr=None):
    """Build an amortized-CNML pmf estimator for profiling.

    For each query, clones the pretrained ensemble and runs `refine_steps`
    full-batch inner updates with that query before reading the pmf off.
    """
    from . import stacked
    from .quantization import bins_of

    bins = bins_of(y, ensemble.scheme)
    base = stacked.from_ensemble(ensemble)
    if lr is not None:
        base = replace(base, lr=lr)

    def estimate(x):
        se = base
        for _ in range(refine_steps):
            se = stacked.inner_step(se, x, X, bins)
        return stacked.cnml_pmf(se, x)

    return estimate


def ensemble_profile_fn(members):
    """Mean predictive pmf of a list of supervised models."""

    def estimate(x):
        pmfs = [mdl.model_pmf_batch(m, np.atleast_1d(x)[None, :])[0] for m in members]
        return np.mean(pmfs, axis=0)

    return estimate
