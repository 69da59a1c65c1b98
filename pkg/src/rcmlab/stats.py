"""Small statistical helpers: Monte Carlo estimates, bootstrap and weighted fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng


@dataclass
class Estimate:
    """Monte Carlo mean with standard error ``sd / sqrt(samples)`` and seed provenance."""

    mean: float
    stderr: float
    samples: int
    seed: str = ""
    label: str = ""

    @classmethod
    def from_samples(cls, values, seed=0, label: str = "") -> "Estimate":
        v = np.asarray(values, dtype=float)
        n = v.size
        if n < 2:
            raise ValueError("an estimate needs at least two samples")
        sd = float(np.std(v, ddof=1))
        return cls(float(np.mean(v)), sd / math.sqrt(n), int(n), str(seed), label)

    def ci(self, z: float = 1.96) -> tuple:
        return (self.mean - z * self.stderr, self.mean + z * self.stderr)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "samples": self.samples,
                "seed": self.seed, "label": self.label}


def batch_stderr(values, batches: int = 50) -> float:
    """Standard error of the mean from batch means (robust to heavy tails)."""
    v = np.asarray(values, dtype=float)
    batches = min(batches, v.size)
    if batches < 2:
        return math.nan
    size = v.size // batches
    means = v[: size * batches].reshape(batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(batches))


def bootstrap(stat, data, resamples: int = 1000, seed: int = 0):
    """Bootstrap replicates of ``stat`` over the rows of ``data``.

    ``data`` is an array whose first axis indexes replicas; resampling draws
    rows with replacement from a deterministic stream.
    """
    data = np.asarray(data)
    gen = rng.generator(seed, 0, rng.STREAM_BOOTSTRAP)
    n = data.shape[0]
    out = []
    for _ in range(resamples):
        idx = gen.integers(0, n, size=n)
        out.append(stat(data[idx]))
    return np.asarray(out, dtype=float)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    slope_stderr: float = math.nan
    residuals: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "slope_stderr": self.slope_stderr, "residuals": list(self.residuals)}


def weighted_linear_fit(x, y, w=None) -> LinearFit:
    """Weighted least squares ``y ~ a + b x``; ``r2`` is the weighted coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if w is None else np.asarray(w, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two points to fit a line")
    sw = w.sum()
    xm = np.dot(w, x) / sw
    ym = np.dot(w, y) / sw
    sxx = np.dot(w, (x - xm) ** 2)
    sxy = np.dot(w, (x - xm) * (y - ym))
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = float(np.dot(w, resid ** 2))
    ss_tot = float(np.dot(w, (y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = x.size - 2
    se = math.sqrt(ss_res / dof / sxx) if dof > 0 else math.nan
    return LinearFit(float(slope), float(intercept), float(r2), se, resid.tolist())
