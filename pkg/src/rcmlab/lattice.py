"""Finite lattice approximation of the continuum model.

Sites are ``2^-n Z^d`` inside ``[-L, L]^d`` and weights are binned on
``M_n``.  Vertex ``(u, m)`` is open with probability
``1 - exp(-lam 2^(-nd) Pi(m, n))`` and the edge between two vertices is open
with probability ``phi`` evaluated at the site centres and bin weights.  The
root ``(0, 1)`` belongs to its own cluster whatever its state.

Vertex ids are ``site_index * n_bins + bin_index`` with row-major site
indices; edges are ordered lexicographically by ``(min id, max id)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .continuum import ClusterResult, PointConfiguration, augment, sample_ppp, touches
from .graph import LazyGraph, cut_sizes, labels_from_edges
from .model import ModelSpec, weight_bins, weight_mass

H_MAX = 10 ** 6


@dataclass(frozen=True)
class LatticeSpec:
    """The truncated vertex set ``U_n^L x M_H`` together with bin masses."""

    model: ModelSpec
    L: int
    n: int
    H: float
    bins: np.ndarray = field(repr=False)
    masses: np.ndarray = field(repr=False)
    residual: float = 1.0
    truncation_tol: float = 1e-6

    @property
    def d(self) -> int:
        return self.model.dimension

    @property
    def spacing(self) -> float:
        return 2.0 ** (-self.n)

    @property
    def side(self) -> int:
        """Sites per axis, ``2^(n+1) L + 1``."""
        return (2 ** (self.n + 1)) * self.L + 1

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @property
    def n_bins(self) -> int:
        return len(self.bins)

    @property
    def n_vertices(self) -> int:
        return self.n_sites * self.n_bins

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.n * self.d)

    @property
    def root(self) -> int:
        centre = (self.side - 1) // 2
        site = int(np.ravel_multi_index((centre,) * self.d, (self.side,) * self.d))
        return site * self.n_bins  # bin 0 is weight 1

    def site_coords(self, sites) -> np.ndarray:
        idx = np.unravel_index(np.asarray(sites, dtype=np.int64), (self.side,) * self.d)
        return (np.stack(idx, axis=-1) - (self.side - 1) // 2) * self.spacing

    def positions(self, ids) -> np.ndarray:
        return self.site_coords(np.asarray(ids, dtype=np.int64) // self.n_bins)

    def weights(self, ids) -> np.ndarray:
        return self.bins[np.asarray(ids, dtype=np.int64) % self.n_bins]

    def mass(self, ids) -> np.ndarray:
        """``2^(-nd) Pi(m, n)`` of each vertex."""
        return self.cell_volume * self.masses[np.asarray(ids, dtype=np.int64) % self.n_bins]

    def p_open(self, lam: float, ids=None) -> np.ndarray:
        w = self.cell_volume * self.masses if ids is None else self.mass(ids)
        return -np.expm1(-lam * w)

    def vertex_id(self, site_multi_index, bin_index: int) -> int:
        site = int(np.ravel_multi_index(tuple(site_multi_index), (self.side,) * self.d))
        return site * self.n_bins + int(bin_index)

    def vertex_at(self, position, weight) -> int:
        """Id of the vertex at a site position and an exact bin weight."""
        centre = (self.side - 1) // 2
        mi = np.rint(np.asarray(position, dtype=float) / self.spacing).astype(int) + centre
        b = int(np.flatnonzero(np.isclose(self.bins, weight))[0])
        return self.vertex_id(mi, b)

    def graph(self, ids, edge_key) -> LazyGraph:
        ids = np.asarray(ids, dtype=np.int64)
        return LazyGraph(self.model.adjacency, self.positions(ids), self.weights(ids), ids, edge_key)


def truncation_residual(model: ModelSpec, L: int, n: int, H: float, lam: float) -> float:
    """``P(A_H) = exp(-lam 2^(-nd) |U| sum_{m > H} Pi(m, n))``."""
    w = model.weights
    d = model.dimension
    sites = ((2 ** (n + 1)) * L + 1) ** d
    if w.kind == "pareto":
        tail = float(w.sf(H + 2.0 ** (-n)))
    else:
        tail = float(w.sf(H))
    return math.exp(-lam * 2.0 ** (-n * d) * sites * tail)


def build_lattice(model: ModelSpec, L: int, n: int, truncation_tol: float = 1e-6,
                  intensity: Optional[float] = None) -> LatticeSpec:
    """Lattice with the smallest integer cap ``H`` whose residual is at least ``1 - tol``.

    Raises
    ------
    ValueError
        If no ``H <= H_MAX`` achieves the tolerance.
    """
    if L < 0 or n < 0 or int(L) != L or int(n) != n:
        raise ValueError("L and n must be non-negative integers")
    if not 0 < truncation_tol <= 0.01:
        raise ValueError("truncation_tol must lie in (0, 0.01]")
    L, n = int(L), int(n)
    lam = float(model.intensity if intensity is None else intensity)
    w = model.weights
    target = 1.0 - truncation_tol
    if w.kind == "point":
        H = 1.0
    elif w.kind == "discrete":
        H = 1.0
        while truncation_residual(model, L, n, H, lam) < target:
            H = float(min(a for a in w.atoms if a > H))
    else:
        d = model.dimension
        sites = ((2 ** (n + 1)) * L + 1) ** d
        budget = -math.log1p(-truncation_tol) / max(lam * 2.0 ** (-n * d) * sites, 1e-300)
        # closed-form Pareto inversion, then adjust on the integer grid
        guess = budget ** (-1.0 / w.alpha) if budget < 1 else 1.0
        H = float(max(1, math.floor(guess) - 2))
        cap = w.support_max
        while truncation_residual(model, L, n, H, lam) < target:
            H += 1.0
            if H > H_MAX:
                raise ValueError("no truncation level H achieves the requested tolerance")
            if H >= cap:
                H = float(math.ceil(cap))
                break
        while H > 1 and truncation_residual(model, L, n, H - 1, lam) >= target:
            H -= 1.0
    bins = weight_bins(w, n, H)
    masses = weight_mass(w, bins, n)
    if bins.size * ((2 ** (n + 1)) * L + 1) ** model.dimension > 5 * 10 ** 7:
        raise ValueError("lattice too large for desk-scale use")
    return LatticeSpec(model, L, n, float(H), bins, np.asarray(masses, dtype=float),
                       truncation_residual(model, L, n, H, lam), truncation_tol)


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------


@dataclass
class LatticeInstance:
    """One sample of the lattice model.

    ``open_ids`` are the open vertex ids (sorted).  Direct instances reveal
    edges through the lazy oracle; coupled instances carry the continuum
    source and the cell graph derived from it.
    """

    spec: LatticeSpec
    lam: float
    seed: int
    replica: int
    open_ids: np.ndarray
    coupled: bool = False
    source: Optional[PointConfiguration] = None
    cell_of_point: Optional[np.ndarray] = None
    cell_edges: Optional[tuple] = None
    dropped: int = 0

    @property
    def edge_key(self):
        return rng.stream_key(self.seed, self.replica, rng.STREAM_EDGES)

    @property
    def root(self) -> int:
        return self.spec.root

    def active_ids(self) -> np.ndarray:
        """Open vertices together with the root."""
        return np.union1d(self.open_ids, [self.root])

    def graph(self) -> LazyGraph:
        return self.spec.graph(self.active_ids(), self.edge_key)


def site_uniforms(spec: LatticeSpec, seed: int, replica: int, ids=None) -> np.ndarray:
    key = rng.stream_key(seed, replica, rng.STREAM_SITES)
    ids = np.arange(spec.n_vertices) if ids is None else ids
    return rng.uniforms(key, ids)


def sample_instance(spec: LatticeSpec, lam: float, seed: int, replica: int = 0,
                    coupled: bool = False) -> LatticeInstance:
    """Sample vertex states, directly or through the cell coupling.

    Direct sampling opens vertex ``v`` iff its site variate is below
    ``p_lam(v)``, so instances are monotone in ``lam``.  Coupled sampling
    draws the continuum process (plus the origin) on the cylinder
    ``[-L - 2^(-n-1), L + 2^(-n-1))^d`` of the coarsest mesh, keeps the part in
    the cylinder of this mesh and opens every cell that holds a point; two
    cells are joined iff a continuum edge joins their points.
    """
    if not coupled:
        if lam <= 0:
            return LatticeInstance(spec, lam, seed, replica, np.zeros(0, np.int64))
        u = site_uniforms(spec, seed, replica)
        p = np.tile(spec.p_open(lam), spec.n_sites)
        return LatticeInstance(spec, lam, seed, replica, np.flatnonzero(u < p).astype(np.int64))
    source = coupled_source(spec, lam, seed, replica)
    return instance_from_points(spec, lam, source)


def coupled_source(spec: LatticeSpec, lam: float, seed: int, replica: int) -> PointConfiguration:
    """Continuum points on the coarsest cylinder ``[-L-1/2, L+1/2]^d`` with the origin added.

    Shared by every mesh ``n`` so the meshes are coupled to one another.
    """
    model = spec.model.with_(intensity=float(lam))
    cfg = sample_ppp(model, seed, replica, intensity=lam, box=spec.L + 0.5)
    return augment(cfg, [(np.zeros(spec.d), 1.0)])


def cell_index(spec: LatticeSpec, positions: np.ndarray, weights: np.ndarray):
    """Vertex id of the half-open cell holding each point (-1 outside the cylinder or above ``H``)."""
    half = 0.5 * spec.spacing
    shifted = (positions + spec.L + half) / spec.spacing
    mi = np.floor(shifted).astype(np.int64)
    inside = np.all((mi >= 0) & (mi < spec.side), axis=1)
    w = spec.model.weights
    if w.kind == "pareto":
        b = np.floor((weights - 1.0) / spec.spacing + 1e-12).astype(np.int64)
    else:
        b = np.searchsorted(spec.bins, weights)
        b = np.where(np.isclose(spec.bins[np.minimum(b, spec.n_bins - 1)], weights), b, spec.n_bins)
    inside &= (b >= 0) & (b < spec.n_bins)
    site = np.ravel_multi_index(tuple(np.clip(mi, 0, spec.side - 1).T), (spec.side,) * spec.d)
    ids = site * spec.n_bins + b
    return np.where(inside, ids, -1)


def in_cylinder(spec: LatticeSpec, positions: np.ndarray) -> np.ndarray:
    half = 0.5 * spec.spacing
    return np.all((positions >= -spec.L - half) & (positions < spec.L + half), axis=1)


def instance_from_points(spec: LatticeSpec, lam: float, source: PointConfiguration) -> LatticeInstance:
    """Cell-coupled instance built from a continuum configuration."""
    keep = in_cylinder(spec, source.positions) | source.augmented
    cfg = source._subset(keep, box=spec.L + 0.5 * spec.spacing)
    cells = cell_index(spec, cfg.positions, cfg.weights)
    dropped = int((cells < 0).sum())
    g = cfg.graph()
    I, J = g.open_edges()
    ci, cj = cells[I], cells[J]
    ok = (ci >= 0) & (cj >= 0) & (ci != cj)
    open_ids = np.unique(cells[cells >= 0])
    return LatticeInstance(spec, lam, cfg.seed, cfg.replica, open_ids.astype(np.int64), True, cfg,
                           cells, (np.minimum(ci[ok], cj[ok]), np.maximum(ci[ok], cj[ok])), dropped)


# ---------------------------------------------------------------------------
# clusters
# ---------------------------------------------------------------------------


def lattice_cluster(instance: LatticeInstance, margin: float = 0.0,
                    size_cap: Optional[int] = None) -> ClusterResult:
    """Cluster of the root among open vertices; member ids are vertex ids."""
    spec = instance.spec
    if instance.coupled:
        ids = instance.active_ids()
        ci, cj = instance.cell_edges
        loc = {int(v): k for k, v in enumerate(ids)}
        I = np.array([loc[int(a)] for a in ci], dtype=np.int64)
        J = np.array([loc[int(b)] for b in cj], dtype=np.int64)
        labels = labels_from_edges(ids.size, I, J)
        r = loc[instance.root]
        members = ids[labels == labels[r]]
        gens = []
    else:
        ids = instance.active_ids()
        g = spec.graph(ids, instance.edge_key)
        r = int(np.searchsorted(ids, instance.root))
        loc, gens, _ = g.bfs(r, size_cap=size_cap)
        members = ids[loc]
    pos = spec.positions(members)
    return ClusterResult(np.sort(members), int(members.size), touches(pos, spec.L, margin), gens)


def continuum_source_size(instance: LatticeInstance) -> int:
    """Size of the origin's continuum cluster on the instance's own points."""
    cfg = instance.source
    from .continuum import cluster_of_origin
    return cluster_of_origin(cfg, margin=0.0).size


def distinct_cells(instance: LatticeInstance) -> bool:
    """True when every source point sits alone in its cell (and none were dropped)."""
    cells = instance.cell_of_point
    return instance.dropped == 0 and np.unique(cells).size == cells.size


# ---------------------------------------------------------------------------
# pivotality on direct instances
# ---------------------------------------------------------------------------


@dataclass
class RootAnalysis:
    """Root cluster of a direct instance plus its pivotal vertices and edges."""

    size: int
    members: np.ndarray
    pivotal_vertices: np.ndarray
    pivotal_edges: list


def analyze_root(instance: LatticeInstance, k: int, vertices: bool = True,
                 edges: bool = False, candidates: Optional[np.ndarray] = None) -> RootAnalysis:
    """Vertices and edges pivotal for ``{|C(root)| >= k}`` (regardless of their own state).

    ``candidates`` restricts the vertex scan (default: all vertices of the
    truncated lattice).
    """
    spec = instance.spec
    ids = instance.active_ids()
    g = spec.graph(ids, instance.edge_key)
    root_loc = int(np.searchsorted(ids, instance.root))
    I, J = g.open_edges()
    labels = labels_from_edges(ids.size, I, J)
    in_c = labels == labels[root_loc]
    size = int(in_c.sum())
    members = ids[in_c]
    piv_v = np.zeros(0, np.int64)
    piv_e: list = []
    if size < k:
        comp_size = np.bincount(labels)
        if vertices:
            pool = np.arange(spec.n_vertices) if candidates is None else np.asarray(candidates)
            is_open = np.isin(pool, instance.open_ids)
            pool = pool[~is_open & (pool != instance.root)]
            piv_v = _closed_pivotal(spec, instance.edge_key, pool, ids, labels, in_c,
                                    comp_size, size, k)
        if edges:
            c_loc = np.flatnonzero(in_c)
            o_loc = np.flatnonzero(~in_c)
            if c_loc.size and o_loc.size:
                a, b = np.meshgrid(c_loc, o_loc, indexing="ij")
                a, b = a.ravel(), b.ravel()
                closed = ~g.edge_open(a, b)
                enough = size + comp_size[labels[b]] >= k
                for x, y in zip(a[closed & enough], b[closed & enough]):
                    u, v = int(ids[x]), int(ids[y])
                    piv_e.append((min(u, v), max(u, v)))
    else:
        c_loc = np.flatnonzero(in_c)
        remap = -np.ones(ids.size, np.int64)
        remap[c_loc] = np.arange(c_loc.size)
        sel = in_c[I] & in_c[J]
        vcut, bridges = cut_sizes(c_loc.size, remap[I[sel]], remap[J[sel]], int(remap[root_loc]))
        if vertices:
            piv_v = np.sort(ids[c_loc[vcut < k]])
        if edges:
            for (p, c), side in bridges.items():
                if side < k:
                    u, v = int(ids[c_loc[p]]), int(ids[c_loc[c]])
                    piv_e.append((min(u, v), max(u, v)))
    piv_e.sort()
    return RootAnalysis(size, members, piv_v, piv_e)


def _closed_pivotal(spec, edge_key, pool, ids, labels, in_c, comp_size, size, k, chunk=4096):
    """Closed vertices in ``pool`` whose opening lifts the root cluster to ``k``."""
    out = []
    if pool.size == 0:
        return np.zeros(0, np.int64)
    act_pos = spec.positions(ids)
    act_w = spec.weights(ids)
    adj = spec.model.adjacency
    for start in range(0, pool.size, chunk):
        p = pool[start:start + chunk]
        pos = spec.positions(p)
        w = spec.weights(p)
        diff = pos[:, None, :] - act_pos[None, :, :]
        r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        phi = adj.phi(r, w[:, None], act_w[None, :])
        live = phi > 0
        # only vertices with a possible edge into the root cluster matter
        touch = np.any(live[:, in_c], axis=1)
        if not touch.any():
            continue
        rows = np.flatnonzero(touch)
        u = rng.pair_uniforms(edge_key, p[rows][:, None], ids[None, :])
        opened = u < phi[rows]
        for t, row in enumerate(rows):
            hit = opened[t]
            if not hit[in_c].any():
                continue
            labs = np.unique(labels[hit & ~in_c])
            if size + 1 + int(comp_size[labs].sum()) >= k:
                out.append(int(p[row]))
    return np.asarray(sorted(out), dtype=np.int64)


def pivotal_probability(spec: LatticeSpec, lam: float, vertex: int, k: int, samples: int,
                        seed: int):
    """Estimate ``P(vertex closed and pivotal for |C(root)| >= k)``.

    Each replica toggles only the vertex's state: its cluster indicator is
    evaluated with the vertex forced closed and forced open.
    """
    from .stats import Estimate
    vals = np.zeros(samples)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        is_open = np.isin(vertex, inst.open_ids)
        if is_open:
            continue
        closed = _root_size(inst, np.setdiff1d(inst.open_ids, [vertex])) >= k
        opened = _root_size(inst, np.union1d(inst.open_ids, [vertex])) >= k
        vals[r] = float(closed != opened)
    return Estimate.from_samples(vals, seed)


def _root_size(instance: LatticeInstance, open_ids) -> int:
    ids = np.union1d(open_ids, [instance.root])
    g = instance.spec.graph(ids, instance.edge_key)
    members, _, _ = g.bfs(int(np.searchsorted(ids, instance.root)))
    return int(members.size)


def russo_rhs(spec: LatticeSpec, lam: float, k: int, mode: str = "monte-carlo",
              samples: int = 1000, seed: int = 0):
    """Derivative of ``P(|C(root)| >= k)`` in ``lam`` by the pivotal sum.

    ``exact-tiny`` enumerates every configuration (at most 24 random
    coordinates); ``monte-carlo`` averages
    ``sum_v 2^(-nd) Pi(m_v, n) exp(-lam 2^(-nd) Pi(m_v, n)) 1{v pivotal}``
    over independent instances and returns an :class:`Estimate`.
    """
    if mode == "exact-tiny":
        from .oracle import TinyInstance, exact_derivative
        tiny = TinyInstance.from_lattice(spec)
        return exact_derivative(tiny, lam, k)
    if mode != "monte-carlo":
        raise ValueError(f"unknown mode {mode!r}")
    from .stats import Estimate
    vals = np.zeros(samples)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        piv = analyze_root(inst, k).pivotal_vertices
        if piv.size:
            w = spec.mass(piv)
            vals[r] = float(np.sum(w * np.exp(-lam * w)))
    return Estimate.from_samples(vals, seed)
