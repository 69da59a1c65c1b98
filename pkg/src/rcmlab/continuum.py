"""Marked Poisson point processes in a box and the clusters of their random graphs.

Sampling is coupled across intensities: each replica is a Poisson process on
``box x [0, inf)`` whose points arrive in order of an "intensity height";
the configuration at intensity ``lam`` keeps the points with height at most
``lam``.  Raising ``lam`` therefore only adds points, and since edge
variates are keyed by arrival index, clusters only grow.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng
from .graph import LazyGraph
from .model import ModelSpec

BLOCK = 1024
AUG_BASE = 1 << 40  # hash keys of augmented points live above any arrival index


def model_hash(model: ModelSpec) -> str:
    text = json.dumps(model.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class PointConfiguration:
    """A sampled marked point set in ``[-box, box]^d`` plus augmented points.

    Point ``i`` has position ``positions[i]``, weight ``weights[i]`` and hash
    key ``keys[i]``; ``augmented[i]`` marks fixed insertions.  The id of a
    point is its row index.
    """

    model: ModelSpec
    positions: np.ndarray
    weights: np.ndarray
    keys: np.ndarray
    augmented: np.ndarray
    heights: np.ndarray
    box: float
    seed: int = 0
    replica: int = 0
    _graph: Optional[LazyGraph] = field(default=None, repr=False, compare=False)

    @property
    def size(self) -> int:
        return len(self.keys)

    @property
    def n_poisson(self) -> int:
        return int((~self.augmented).sum())

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.size)

    @property
    def edge_key(self):
        return rng.stream_key(self.seed, self.replica, rng.STREAM_EDGES)

    def graph(self) -> LazyGraph:
        if self._graph is None:
            self._graph = LazyGraph(self.model.adjacency, self.positions, self.weights,
                                    self.keys, self.edge_key)
        return self._graph

    def _subset(self, keep: np.ndarray, **changes) -> "PointConfiguration":
        kw = dict(model=self.model, positions=self.positions[keep], weights=self.weights[keep],
                  keys=self.keys[keep], augmented=self.augmented[keep],
                  heights=self.heights[keep], box=self.box, seed=self.seed, replica=self.replica)
        kw.update(changes)
        return PointConfiguration(**kw)

    def thin(self, intensity: float) -> "PointConfiguration":
        """Coupled configuration at a lower intensity (augmented points kept)."""
        keep = self.augmented | (self.heights <= intensity)
        return self._subset(keep, model=self.model.with_(intensity=float(intensity)))

    def restrict(self, box: float) -> "PointConfiguration":
        """Remove every point outside ``[-box, box]^d`` (augmented points kept)."""
        inside = np.all(np.abs(self.positions) <= box, axis=1) if self.size else np.zeros(0, bool)
        keep = self.augmented | inside
        return self._subset(keep, box=float(box), model=self.model.with_(box=float(box)))

    def with_weight(self, index: int, weight: float) -> "PointConfiguration":
        """Same configuration with one weight changed (variates untouched)."""
        w = self.weights.copy()
        w[index] = weight
        return PointConfiguration(self.model, self.positions, w, self.keys, self.augmented,
                                  self.heights, self.box, self.seed, self.replica)

    # serialisation ---------------------------------------------------
    def header(self) -> dict:
        return {"seed": str(self.seed), "replica": self.replica, "box": self.box,
                "model_hash": model_hash(self.model), "model": self.model.to_dict(),
                "points": self.size, "augmented": int(self.augmented.sum())}

    def to_csv(self) -> str:
        d = self.positions.shape[1] if self.positions.ndim == 2 else self.model.dimension
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + [f"x{k + 1}" for k in range(d)] + ["weight", "augmented"])
        for i in range(self.size):
            w.writerow([i] + [repr(float(v)) for v in self.positions[i]]
                       + [repr(float(self.weights[i])), int(self.augmented[i])])
        return buf.getvalue()


def empty_configuration(model: ModelSpec, seed: int = 0, replica: int = 0) -> PointConfiguration:
    d = model.dimension
    return PointConfiguration(model, np.zeros((0, d)), np.zeros(0), np.zeros(0, np.int64),
                              np.zeros(0, bool), np.zeros(0), float(model.box), seed, replica)


def sample_ppp(model: ModelSpec, seed: int, replica: int = 0,
               intensity: Optional[float] = None, box: Optional[float] = None) -> PointConfiguration:
    """Sample the marked Poisson process of ``model`` in ``[-box, box]^d``.

    Points are generated in blocks of ``BLOCK`` from a Philox stream
    addressed by ``(seed, replica)``: exponential height gaps, uniform
    positions and weights by inversion.  The configuration is a pure function
    of ``(model, seed, replica)``, and the one at a lower intensity is a
    prefix of the one at a higher intensity.
    """
    lam = float(model.intensity if intensity is None else intensity)
    L = float(model.box if box is None else box)
    d = model.dimension
    volume = (2.0 * L) ** d
    if lam <= 0:
        return empty_configuration(model.with_(intensity=max(lam, 0.0), box=L), seed, replica)
    gen = rng.generator(seed, replica, rng.STREAM_POINTS)
    heights, pos, wts = [], [], []
    level = 0.0
    while True:
        gaps = gen.exponential(size=BLOCK) / volume
        x = gen.random((BLOCK, d))
        u = gen.random(BLOCK)
        h = level + np.cumsum(gaps)
        level = h[-1]
        heights.append(h)
        pos.append(x)
        wts.append(u)
        if level > lam:
            break
    h = np.concatenate(heights)
    n = int(np.searchsorted(h, lam, side="right"))
    positions = -L + 2.0 * L * np.concatenate(pos)[:n]
    weights = model.weights.ppf(np.concatenate(wts)[:n])
    return PointConfiguration(model.with_(intensity=lam, box=L), positions, weights,
                              np.arange(n, dtype=np.int64), np.zeros(n, bool), h[:n], L,
                              rng.check_seed(seed), int(replica))


def augment(config: PointConfiguration, points: Sequence) -> PointConfiguration:
    """Append fixed points ``[(position, weight), ...]``.

    Augmented points get hash keys ``AUG_BASE + j`` (``j`` counts augmented
    points), so existing edge variates are untouched and the result does not
    depend on how the insertions are batched.
    """
    d = config.model.dimension
    pos = [np.asarray(p, dtype=float).reshape(d) for p, _ in points]
    wts = [float(w) for _, w in points]
    for p, w in zip(pos, wts):
        if w < 1:
            raise ValueError("weights must be at least 1")
        if np.any(np.abs(p) > config.box):
            raise ValueError("augmented point lies outside the box")
    for j, (p, w) in enumerate(zip(pos, wts)):
        same = np.all(config.positions.reshape(-1, d) == p, axis=1) & (config.weights == w)
        earlier = any(np.array_equal(p, q) and w == v for q, v in zip(pos[:j], wts[:j]))
        if same.any() or earlier:
            raise ValueError(f"duplicate point {(tuple(p), w)}")
    start = int(config.augmented.sum())
    new_keys = AUG_BASE + start + np.arange(len(pos), dtype=np.int64)
    return PointConfiguration(
        config.model,
        np.vstack([config.positions.reshape(-1, d)] + [p[None] for p in pos]) if pos else config.positions,
        np.concatenate([config.weights, wts]),
        np.concatenate([config.keys, new_keys]),
        np.concatenate([config.augmented, np.ones(len(pos), bool)]),
        np.concatenate([config.heights, np.full(len(pos), np.nan)]),
        config.box, config.seed, config.replica)


def with_origin(model: ModelSpec, seed: int, replica: int = 0, **kw) -> PointConfiguration:
    """Sampled configuration augmented by the origin ``(0, 1)``."""
    return augment(sample_ppp(model, seed, replica, **kw), [(np.zeros(model.dimension), 1.0)])


def neighbors(config: PointConfiguration, point_id: int) -> list:
    """Ids adjacent to ``point_id``, sorted."""
    return config.graph().neighbors(int(point_id)).tolist()


@dataclass
class ClusterResult:
    """A cluster: member ids, size, boundary contact and BFS generation sizes."""

    members: np.ndarray
    size: int
    touches_boundary: bool
    generations: list = field(default_factory=list)
    capped: bool = False


def boundary_margin(model: ModelSpec) -> float:
    """Default distance from the faces that counts as touching the boundary.

    Finite-range models use their range at weight 1, others the radius
    where ``phi(r; 1, 1)`` drops to one half.
    """
    adj = model.adjacency
    top = adj.max_range(1.0)
    return float(top) if math.isfinite(top) else float(adj.typical_range())


def touches(positions: np.ndarray, box: float, margin: float) -> bool:
    if positions.size == 0:
        return False
    dist = box - np.max(np.abs(positions), axis=1)
    return bool(np.any(dist < max(margin, 1e-9)))


def origin_index(config: PointConfiguration) -> int:
    aug = np.flatnonzero(config.augmented)
    for i in aug:
        if np.all(config.positions[i] == 0):
            return int(i)
    raise ValueError("configuration has no augmented point at the origin")


def cluster_of(config: PointConfiguration, index: int, margin: Optional[float] = None,
               size_cap: Optional[int] = None) -> ClusterResult:
    members, gens, capped = config.graph().bfs(int(index), size_cap=size_cap)
    margin = boundary_margin(config.model) if margin is None else margin
    return ClusterResult(members, int(members.size),
                         touches(config.positions[members], config.box, margin), gens, capped)


def cluster_of_origin(config: PointConfiguration, margin: Optional[float] = None,
                      size_cap: Optional[int] = None) -> ClusterResult:
    """Cluster of the augmented origin, the origin included."""
    return cluster_of(config, origin_index(config), margin, size_cap)


def all_clusters(config: PointConfiguration, margin: Optional[float] = None) -> list:
    """Partition of all points into clusters, ordered by smallest member id."""
    labels = config.graph().components()
    margin = boundary_margin(config.model) if margin is None else margin
    out = []
    order = np.argsort(labels, kind="stable")
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    for group in np.split(order, splits) if config.size else []:
        members = np.sort(group)
        out.append(ClusterResult(members, int(members.size),
                                 touches(config.positions[members], config.box, margin)))
    out.sort(key=lambda c: int(c.members[0]))
    return out


def cluster_labels(config: PointConfiguration) -> np.ndarray:
    return config.graph().components()


def write_configuration(config: PointConfiguration, csv_path, header_path) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(config.to_csv())
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(config.header(), fh, indent=2, sort_keys=True)
        fh.write("\n")
