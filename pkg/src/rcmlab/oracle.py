"""Exact enumeration over tiny product measures.

A :class:`TinyInstance` lists sites (with the Poisson mass ``w`` of their
cell, so a site is open with probability ``1 - exp(-lam w)``), edges with
fixed probabilities ``phi`` and optional copy vertices open with probability
``h = 1 - exp(-gamma)``.  Coordinates whose probability is 0 or 1 are fixed;
the rest are enumerated over all ``2^N`` configurations in blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

MAX_COORDS = 24
BLOCK_BITS = 16


class EnumerationError(ValueError):
    """Too many random coordinates for exact enumeration."""


@dataclass
class TinyInstance:
    """Explicit finite site/edge system.

    Parameters
    ----------
    masses : sequence of float
        ``w_i = 2^(-nd) Pi(m_i, n)`` per site.
    phi : dict
        ``{(i, j): probability}`` for ``i < j``; missing pairs have probability 0.
    root : int
        Index of the distinguished vertex (always in its own cluster).
    positions, weights : optional
        Metadata for display and lattice round trips.
    """

    masses: tuple
    phi: dict
    root: int = 0
    positions: Optional[list] = None
    weights: Optional[list] = None

    def __post_init__(self):
        self.masses = tuple(float(w) for w in self.masses)
        clean = {}
        for (i, j), p in dict(self.phi).items():
            i, j = int(i), int(j)
            if i == j:
                raise ValueError("self loops are not allowed")
            if not 0.0 <= p <= 1.0:
                raise ValueError("edge probabilities must lie in [0, 1]")
            clean[(min(i, j), max(i, j))] = float(p)
        self.phi = clean
        if any(w < 0 for w in self.masses):
            raise ValueError("site masses must be non-negative")

    @property
    def n_sites(self) -> int:
        return len(self.masses)

    @property
    def edges(self) -> list:
        return [e for e in combinations(range(self.n_sites), 2)]

    def edge_prob(self, e) -> float:
        return self.phi.get((min(e), max(e)), 0.0)

    def site_probs(self, lam: float) -> np.ndarray:
        return -np.expm1(-lam * np.asarray(self.masses))

    @classmethod
    def two_site(cls, mass: float = 1.0, q: float = 0.5) -> "TinyInstance":
        """Root plus one vertex of the same mass joined with probability ``q``."""
        return cls((mass, mass), {(0, 1): q}, root=0)

    @classmethod
    def path(cls, n: int = 3, mass: float = 1.0, q: float = 0.5) -> "TinyInstance":
        return cls((mass,) * n, {(i, i + 1): q for i in range(n - 1)}, root=0)

    @classmethod
    def random(cls, gen: np.random.Generator, n_sites: int, density: float = 1.0,
               mass_range=(0.2, 1.5)) -> "TinyInstance":
        """Random sites with masses in ``mass_range`` and edges present with prob ``density``."""
        masses = gen.uniform(*mass_range, size=n_sites)
        phi = {}
        for e in combinations(range(n_sites), 2):
            if gen.random() < density:
                phi[e] = float(gen.uniform(0.05, 0.95))
        return cls(tuple(masses), phi, root=0)

    @classmethod
    def from_lattice(cls, spec, ids=None) -> "TinyInstance":
        """All (or the listed) vertices of a lattice spec; the lattice root is kept as root."""
        ids = np.arange(spec.n_vertices) if ids is None else np.sort(np.asarray(ids))
        if spec.root not in ids:
            raise ValueError("the lattice root must be among the vertices")
        pos = spec.positions(ids)
        w = spec.weights(ids)
        phi = {}
        for a, b in combinations(range(ids.size), 2):
            r = float(np.linalg.norm(pos[a] - pos[b]))
            p = float(spec.model.adjacency.phi(r, w[a], w[b]))
            if p > 0:
                phi[(a, b)] = p
        return cls(tuple(spec.mass(ids)), phi, int(np.searchsorted(ids, spec.root)),
                   pos.tolist(), w.tolist())

    def to_dict(self) -> dict:
        return {"masses": list(self.masses), "root": self.root,
                "phi": [[i, j, p] for (i, j), p in sorted(self.phi.items())]}

    @classmethod
    def from_dict(cls, data: dict) -> "TinyInstance":
        return cls(tuple(data["masses"]), {(int(i), int(j)): p for i, j, p in data["phi"]},
                   int(data["root"]))


# ---------------------------------------------------------------------------
# distributions
# ---------------------------------------------------------------------------


@dataclass
class ExactDistribution:
    """Product measure over sites, edges and (optionally) copies.

    ``coords`` lists ``(kind, index, prob)`` for every coordinate with kind in
    ``{"site", "edge", "copy"}``; ``random`` indexes the enumerated ones (bit
    ``b`` of a configuration number is the state of ``coords[random[b]]``).
    """

    tiny: TinyInstance
    lam: float
    gamma: Optional[float]
    coords: list
    random: list
    fixed: dict = field(default_factory=dict)

    @property
    def n_random(self) -> int:
        return len(self.random)

    @property
    def size(self) -> int:
        return 1 << self.n_random

    def coord_index(self, kind: str, index) -> int:
        for c, (k, i, _) in enumerate(self.coords):
            if k == kind and i == index:
                return c
        raise KeyError((kind, index))

    def blocks(self, force: Optional[dict] = None):
        """Yield ``(probs, states)`` blocks; ``states`` is ``(B, n_coords)`` bool.

        ``force`` pins coordinates (by coordinate index) to a value; the
        probabilities then describe the remaining coordinates only.
        """
        force = force or {}
        free = [c for c in self.random if c not in force]
        nfree = len(free)
        probs = np.array([self.coords[c][2] for c in free])
        total = 1 << nfree
        step = 1 << min(BLOCK_BITS, nfree)
        for start in range(0, total, step):
            idx = np.arange(start, min(start + step, total), dtype=np.int64)
            bits = ((idx[:, None] >> np.arange(nfree)) & 1).astype(bool)
            p = np.prod(np.where(bits, probs, 1.0 - probs), axis=1) if nfree else np.ones(idx.size)
            states = np.zeros((idx.size, len(self.coords)), dtype=bool)
            for c, v in self.fixed.items():
                states[:, c] = v
            for c, v in force.items():
                states[:, c] = bool(v)
            if nfree:
                states[:, free] = bits
            yield p, states

    def table(self) -> np.ndarray:
        return np.concatenate([p for p, _ in self.blocks()])

    def split(self, states):
        """Site, edge and copy state matrices from a coordinate state block."""
        t = self.tiny
        sites = states[:, : t.n_sites]
        ne = len(t.edges)
        edges = states[:, t.n_sites: t.n_sites + ne]
        copies = states[:, t.n_sites + ne:] if self.gamma is not None else None
        return sites, edges, copies


def enumerate_configs(tiny: TinyInstance, lam: float, gamma: Optional[float] = None,
                      max_coords: int = MAX_COORDS) -> ExactDistribution:
    """Build the exact product distribution (coordinates: sites, all edges, copies).

    Raises
    ------
    EnumerationError
        If more than ``max_coords`` coordinates are random.
    """
    coords = [("site", i, float(p)) for i, p in enumerate(tiny.site_probs(lam))]
    coords += [("edge", e, tiny.edge_prob(e)) for e in tiny.edges]
    if gamma is not None:
        h = -math.expm1(-gamma)
        coords += [("copy", i, h) for i in range(tiny.n_sites)]
    random, fixed = [], {}
    for c, (_, _, p) in enumerate(coords):
        if 0.0 < p < 1.0:
            random.append(c)
        else:
            fixed[c] = p >= 1.0
    if len(random) > max_coords:
        raise EnumerationError(f"{len(random)} random coordinates exceed the cap {max_coords}")
    return ExactDistribution(tiny, float(lam), gamma, coords, random, fixed)


# ---------------------------------------------------------------------------
# vectorised cluster computations
# ---------------------------------------------------------------------------


def cluster_masks(tiny: TinyInstance, sites: np.ndarray, edges: np.ndarray, start: int) -> np.ndarray:
    """Membership of each vertex in ``C(start)`` for every configuration row.

    ``start`` is a member regardless of its state; other members are open
    vertices reached through open edges and open intermediate vertices.
    """
    B, S = sites.shape
    reach = np.zeros((B, S), dtype=bool)
    reach[:, start] = True
    pairs = tiny.edges
    for _ in range(S):
        before = reach.copy()
        for e, (i, j) in enumerate(pairs):
            live = edges[:, e]
            reach[:, j] |= reach[:, i] & live & sites[:, j]
            reach[:, i] |= reach[:, j] & live & sites[:, i]
        if np.array_equal(before, reach):
            break
    return reach


def cluster_sizes(tiny, sites, edges, start=None) -> np.ndarray:
    start = tiny.root if start is None else start
    return cluster_masks(tiny, sites, edges, start).sum(axis=1)


def exact_expectation(dist: ExactDistribution, fn, force=None) -> float:
    """``E[fn(sites, edges, copies)]`` under the distribution (optionally with pinned coordinates)."""
    total = 0.0
    for p, states in dist.blocks(force):
        s, e, c = dist.split(states)
        total += float(np.dot(p, fn(s, e, c)))
    return total


def exact_statistic(dist: ExactDistribution, functional: str, k: int = 1, u: Optional[int] = None,
                    coord: Optional[int] = None, root_mode: str = "copy-only") -> float:
    """Exact value of ``theta``, ``magnetization``, ``cov``, ``influence`` or ``revealment``.

    ``cov`` is ``Cov(1{|C(root)| >= k}, g)`` with ``g`` the green-component
    indicator; ``influence`` and ``revealment`` refer to coordinate index
    ``coord``; ``magnetization`` needs copies (``gamma``) and vertex ``u``.
    """
    tiny = dist.tiny
    if functional == "theta":
        return exact_expectation(dist, lambda s, e, c: cluster_sizes(tiny, s, e) >= k)
    if functional == "magnetization":
        h = -math.expm1(-dist.gamma)
        start = tiny.root if u is None else u
        return exact_expectation(dist, lambda s, e, c: 1.0 - (1.0 - h) ** cluster_sizes(tiny, s, e, start))
    if functional == "cov":
        return exact_cov(dist, k)
    if functional == "influence":
        return exact_influence(dist, coord, k)
    if functional == "revealment":
        from .osss import exact_revealments
        return exact_revealments(dist, root_mode=root_mode)[0][coord]
    raise ValueError(f"unknown functional {functional!r}")


def exact_cov(dist: ExactDistribution, k: int) -> float:
    """``Cov(f, g)`` with ``f = 1{|C(root)| >= k}``, ``g = 1{green vertex in C(root)}``."""
    tiny = dist.tiny

    def parts(s, e, c):
        mask = cluster_masks(tiny, s, e, tiny.root)
        f = mask.sum(axis=1) >= k
        g = np.any(mask & c, axis=1)
        return np.stack([f, g, f & g], axis=1).astype(float)

    acc = np.zeros(3)
    for p, states in dist.blocks():
        s, e, c = dist.split(states)
        acc += p @ parts(s, e, c)
    ef, eg, efg = acc
    return float(efg - ef * eg)


def exact_influence(dist: ExactDistribution, coord: int, k: int) -> float:
    """``Inf_s(f) = 2 p (1 - p) P(f(s=1) != f(s=0))`` for ``f = 1{|C(root)| >= k}``."""
    kind, _, p = dist.coords[coord]
    if kind == "copy" or p <= 0.0 or p >= 1.0:
        return 0.0
    tiny = dist.tiny
    diff = 0.0
    blocks1 = dist.blocks({coord: True})
    blocks0 = dist.blocks({coord: False})
    for (p1, st1), (_, st0) in zip(blocks1, blocks0):
        s1, e1, _ = dist.split(st1)
        s0, e0, _ = dist.split(st0)
        f1 = cluster_sizes(tiny, s1, e1) >= k
        f0 = cluster_sizes(tiny, s0, e0) >= k
        diff += float(np.dot(p1, f1 != f0))
    return 2.0 * p * (1.0 - p) * diff


def pivotal_probability_exact(dist: ExactDistribution, site: int, k: int) -> float:
    """``P(site pivotal for |C(root)| >= k)`` (state of the site itself excluded)."""
    c = dist.coord_index("site", site)
    tiny = dist.tiny
    total = 0.0
    for (p1, st1), (_, st0) in zip(dist.blocks({c: True}), dist.blocks({c: False})):
        s1, e1, _ = dist.split(st1)
        s0, e0, _ = dist.split(st0)
        total += float(np.dot(p1, (cluster_sizes(tiny, s1, e1) >= k) != (cluster_sizes(tiny, s0, e0) >= k)))
    return total


def exact_theta(tiny: TinyInstance, lam: float, k: int) -> float:
    return exact_statistic(enumerate_configs(tiny, lam), "theta", k=k)


def russo_sum(tiny: TinyInstance, lam: float, k: int) -> float:
    """Covariance form ``sum_i (w_i / p_i) Cov(F, I_i)`` of the derivative."""
    dist = enumerate_configs(tiny, lam)
    p = tiny.site_probs(lam)
    total = 0.0
    acc_f = 0.0
    acc_fi = np.zeros(tiny.n_sites)
    acc_i = np.zeros(tiny.n_sites)
    for pr, states in dist.blocks():
        s, e, _ = dist.split(states)
        f = (cluster_sizes(tiny, s, e) >= k).astype(float)
        acc_f += float(pr @ f)
        acc_fi += (pr * f) @ s
        acc_i += pr @ s
    for i, w in enumerate(tiny.masses):
        if 0 < p[i] < 1:
            total += w / p[i] * (acc_fi[i] - acc_f * acc_i[i])
    return float(total)


def density_derivative(tiny: TinyInstance, lam: float, k: int) -> float:
    """Product-rule form ``sum_omega F(omega) sum_i w_i (I_i / p_i - 1) P(omega)``."""
    dist = enumerate_configs(tiny, lam)
    p = tiny.site_probs(lam)
    w = np.asarray(tiny.masses)
    live = (p > 0) & (p < 1)
    total = 0.0
    for pr, states in dist.blocks():
        s, e, _ = dist.split(states)
        f = (cluster_sizes(tiny, s, e) >= k).astype(float)
        score = np.where(live, w * (s / np.where(live, p, 1.0) - 1.0), 0.0).sum(axis=1)
        total += float(np.dot(pr * f, score))
    return total


def pivotal_sum(tiny: TinyInstance, lam: float, k: int) -> float:
    """Pivotal form ``sum_i w_i exp(-lam w_i) P(i pivotal)``."""
    dist = enumerate_configs(tiny, lam)
    total = 0.0
    for i, w in enumerate(tiny.masses):
        if w > 0 and i != tiny.root:
            total += w * math.exp(-lam * w) * pivotal_probability_exact(dist, i, k)
    return total


def exact_derivative(tiny: TinyInstance, lam: float, k: int, step: Optional[float] = None) -> float:
    """Derivative of ``theta(k)`` in ``lam``.

    With ``step`` given, the central finite difference of the exact
    statistic; otherwise the covariance sum.
    """
    if step is None:
        return russo_sum(tiny, lam, k)
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    return (exact_theta(tiny, lam + step, k) - exact_theta(tiny, lam - step, k)) / (2.0 * step)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def fixture_instances() -> dict:
    """Named tiny instances used as regression fixtures."""
    gen = np.random.default_rng(20240611)
    out = {"two_site": TinyInstance.two_site(1.0, 0.5),
           "path3": TinyInstance.path(3, 1.0, 0.5),
           "triangle": TinyInstance((0.7, 0.9, 1.1), {(0, 1): 0.6, (1, 2): 0.4, (0, 2): 0.3})}
    for i in range(3):
        out[f"random{i}"] = TinyInstance.random(gen, 4, density=0.8)
    return out


def build_fixtures(lam: float = 1.0, gamma: float = 0.5, k: int = 2) -> dict:
    """Exact theta, derivative and inequality slacks for every fixture instance."""
    from .osss import osss_check, vertex_edge_exact
    data = {"lam": lam, "gamma": gamma, "k": k, "instances": {}}
    for name, tiny in fixture_instances().items():
        dist = enumerate_configs(tiny, lam, gamma)
        rep = osss_check(tiny, lam, gamma, k)
        ve = vertex_edge_exact(tiny, lam, k, gamma * k)
        data["instances"][name] = {
            "instance": tiny.to_dict(),
            "theta": [exact_statistic(dist, "theta", k=j) for j in range(1, tiny.n_sites + 1)],
            "derivative": russo_sum(tiny, lam, k),
            "magnetization": [exact_statistic(dist, "magnetization", u=u)
                              for u in range(tiny.n_sites)],
            "osss": {"lhs": rep.lhs, "rhs": rep.rhs, "slack": rep.slack},
            "vertex_edge": {"lhs": ve.lhs, "rhs": ve.rhs, "slack": ve.slack},
        }
    return data


def write_fixtures(path, **kw) -> dict:
    data = build_fixtures(**kw)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return data
