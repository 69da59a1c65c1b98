"""Ghost field, decision-forest exploration, revealments and influences.

Every vertex ``u`` gets a copy ``u~`` that is open ("green") with
probability ``h = 1 - exp(-gamma)``.  The tree ``T^u`` first queries ``u~``;
if it is green it queries ``u`` and, if ``u`` is open, explores the open
cluster of ``u``:

* after an edge is found open with an unrevealed endpoint, that endpoint is
  queried next;
* otherwise the smallest edge (in the fixed ``(min id, max id)`` order) that
  touches a revealed open vertex, is not yet revealed and touches no revealed
  closed vertex is queried; the tree halts when no such edge remains.

Two variants of the tree at the distinguished vertex ``v`` are provided.
``"copy-only"`` reveals ``v~`` and halts (the formal forest); ``"explore"``
treats ``v`` like any other vertex.  Only the second one makes the revealment
of every vertex equal ``E[1 - exp(-gamma |C(u)|)]``; both compute
``g = 1{some green vertex lies in C(v)}`` and both satisfy the covariance
inequalities.

Edges whose connection probability is zero are deterministic and are never
queried.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .graph import labels_from_edges
from .lattice import LatticeSpec, analyze_root, sample_instance
from .oracle import (ExactDistribution, cluster_masks, enumerate_configs, exact_cov,
                     exact_influence, TinyInstance)
from .stats import Estimate

FORMAL = "copy-only"
UNIFORM = "explore"
ROOT_MODES = (FORMAL, UNIFORM)


def _check_mode(root_mode: str) -> None:
    if root_mode not in ROOT_MODES:
        raise ValueError(f"root_mode must be one of {ROOT_MODES}, got {root_mode!r}")


@dataclass(frozen=True)
class GhostField:
    """Independent green marks on copy vertices, coupled across ``gamma``."""

    gamma: float
    seed: int = 0
    replica: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def h(self) -> float:
        return -math.expm1(-self.gamma)

    def green(self, ids) -> np.ndarray:
        key = rng.stream_key(self.seed, self.replica, rng.STREAM_GHOST)
        return rng.uniforms(key, np.asarray(ids, dtype=np.int64)) < self.h


# ---------------------------------------------------------------------------
# coordinate oracles
# ---------------------------------------------------------------------------


class ArrayOracle:
    """Coordinates read from full arrays.

    Vertices are local indices ``0..n-1`` in increasing id order, so the edge
    order is lexicographic on local pairs.
    """

    def __init__(self, vertex_open, green, edge_open, candidates, root: int = 0):
        self.vertex_open = np.asarray(vertex_open, dtype=bool)
        self.green_ = np.asarray(green, dtype=bool)
        self._edge_open = edge_open
        self._candidates = candidates
        self.root = int(root)
        self.n = self.vertex_open.size

    def query(self, kind: str, index) -> bool:
        if kind == "copy":
            return bool(self.green_[index])
        if kind == "vertex":
            return bool(self.vertex_open[index])
        return bool(self._edge_open(*index))

    def candidates(self, x: int):
        return self._candidates(x)

    @classmethod
    def from_matrix(cls, vertex_open, green, edges, possible, root: int = 0) -> "ArrayOracle":
        """Oracle over a dense symmetric edge-state matrix and possible-edge mask."""
        edges = np.asarray(edges, dtype=bool)
        possible = np.asarray(possible, dtype=bool)
        nbrs = [np.flatnonzero(possible[x]).tolist() for x in range(possible.shape[0])]
        return cls(vertex_open, green, lambda a, b: edges[a, b], lambda x: nbrs[x], root)

    @classmethod
    def from_lattice(cls, instance, ghost: GhostField) -> "ArrayOracle":
        """All vertices of a direct lattice instance (local index = vertex id)."""
        spec = instance.spec
        ids = np.arange(spec.n_vertices)
        g = spec.graph(ids, instance.edge_key)
        is_open = np.zeros(spec.n_vertices, bool)
        is_open[instance.open_ids] = True

        def cand(x):
            c = g.candidates(x)
            c = c[g.edge_prob(np.full(c.size, x), c) > 0]
            return c.tolist()

        return cls(is_open, ghost.green(ids), lambda a, b: bool(g.edge_open(a, b)), cand, spec.root)


class _Need(Exception):
    def __init__(self, coord):
        self.coord = coord


class _PartialOracle:
    """Tiny-instance coordinates from a partial assignment; unknown ones raise ``_Need``."""

    def __init__(self, dist: ExactDistribution, index: dict, assign: dict, nbrs: list):
        self.dist = dist
        self.index = index
        self.assign = assign
        self.nbrs = nbrs
        self.root = dist.tiny.root
        self.n = dist.tiny.n_sites

    def query(self, kind: str, idx) -> bool:
        c = self.index[(kind, idx)]
        if c in self.dist.fixed:
            return bool(self.dist.fixed[c])
        if c not in self.assign:
            raise _Need(c)
        return self.assign[c]

    def candidates(self, x: int):
        return self.nbrs[x]


def _coord_index(dist: ExactDistribution) -> dict:
    out = {}
    for c, (kind, idx, _) in enumerate(dist.coords):
        out[("vertex" if kind == "site" else kind, idx)] = c
    return out


def _tiny_neighbors(tiny: TinyInstance) -> list:
    nbrs = [[] for _ in range(tiny.n_sites)]
    for (i, j), p in tiny.phi.items():
        if p > 0:
            nbrs[i].append(j)
            nbrs[j].append(i)
    return [sorted(x) for x in nbrs]


# ---------------------------------------------------------------------------
# the literal forest
# ---------------------------------------------------------------------------


@dataclass
class TreeLog:
    """Query log of one tree together with its final revealed sets.

    ``queries`` holds ``(kind, index, value)`` in query order.  With state
    recording on, ``states[r]`` is ``(A, B, O, C, I)`` just before query ``r``.
    """

    start: int
    queries: list = field(default_factory=list)
    A: set = field(default_factory=set)
    B: set = field(default_factory=set)
    O: set = field(default_factory=set)
    C: set = field(default_factory=set)
    states: list = field(default_factory=list)


@dataclass
class ExplorationTrace:
    """Per-tree logs of one forest run."""

    trees: list
    root: int
    root_mode: str

    def revealed(self) -> set:
        """Every coordinate ``(kind, index)`` queried by some tree."""
        return {(k, i) for t in self.trees for k, i, _ in t.queries}

    def revealed_vertices(self) -> set:
        return {i for t in self.trees for k, i, _ in t.queries if k == "vertex"}

    def revealed_edges(self) -> set:
        return {i for t in self.trees for k, i, _ in t.queries if k == "edge"}


def _frontier(A, B, revealed, candidates):
    out = set()
    for x in A:
        for y in candidates(x):
            e = (min(x, y), max(x, y))
            if e not in revealed and e[0] not in B and e[1] not in B:
                out.add(e)
    return out


def _run_tree(oracle, u: int, copy_only: bool, record: bool) -> TreeLog:
    log = TreeLog(u)
    revealed = {}

    def snap():
        if record:
            log.states.append((frozenset(log.A), frozenset(log.B), frozenset(log.O),
                               frozenset(log.C), frozenset(_frontier(log.A, log.B, revealed,
                                                                     oracle.candidates))))

    def ask(kind, idx):
        snap()
        val = oracle.query(kind, idx)
        log.queries.append((kind, idx, val))
        return val

    heap: list = []

    def join(z):
        log.A.add(z)
        for y in oracle.candidates(z):
            e = (min(z, y), max(z, y))
            if e not in revealed and y not in log.B:
                heapq.heappush(heap, e)

    if not ask("copy", u) or copy_only:
        return log
    if not ask("vertex", u):
        log.B.add(u)
        return log
    join(u)
    last = None
    while True:
        if last is not None and revealed[last]:
            a, b = last
            z = b if a in log.A else a
            if z not in log.A and z not in log.B:
                if ask("vertex", z):
                    join(z)
                else:
                    log.B.add(z)
                last = None
                continue
        e = None
        while heap:
            cand = heapq.heappop(heap)
            if cand in revealed or cand[0] in log.B or cand[1] in log.B:
                continue
            e = cand
            break
        if e is None:
            return log
        val = ask("edge", e)
        revealed[e] = val
        (log.O if val else log.C).add(e)
        last = e


def run_forest(oracle, root_mode: str = FORMAL, record: bool = False):
    """Run every tree ``T^u`` and return ``(g, trace)``.

    ``g`` is 1 iff the root's copy is green or the root was revealed by a
    tree started at a green open vertex (then a green vertex lies in its
    cluster).
    """
    _check_mode(root_mode)
    trees = []
    for u in range(oracle.n):
        trees.append(_run_tree(oracle, u, u == oracle.root and root_mode == FORMAL, record))
    v = oracle.root
    g = any(k == "copy" and i == v and val for t in trees for k, i, val in t.queries)
    g = g or any(v in t.A or v in t.B for t in trees)
    return int(g), ExplorationTrace(trees, v, root_mode)


def forest_for_lattice(instance, ghost: GhostField, root_mode: str = FORMAL, record: bool = False):
    """``run_forest`` on every vertex of a direct lattice instance."""
    return run_forest(ArrayOracle.from_lattice(instance, ghost), root_mode, record)


def check_trace(trace: ExplorationTrace, oracle) -> list:
    """Violations of the exploration rules in a trace recorded with states."""
    bad = []
    for t in trace.trees:
        seen = set()
        for r, (kind, idx, val) in enumerate(t.queries):
            if (kind, idx) in seen:
                bad.append((t.start, r, "repeated query"))
            seen.add((kind, idx))
            if not t.states:
                continue
            A, B, O, C, I = t.states[r]
            if kind == "edge":
                if not (idx[0] in A or idx[1] in A):
                    bad.append((t.start, r, "edge without revealed open endpoint"))
                if idx[0] in B or idx[1] in B:
                    bad.append((t.start, r, "edge touching a revealed closed vertex"))
            if r > 0:
                pk, pidx, pval = t.queries[r - 1]
                if pk == "edge" and pval:
                    outside = [z for z in pidx if z not in t.states[r - 1][0] and z not in t.states[r - 1][1]]
                    if outside and not (kind == "vertex" and idx == outside[0]):
                        bad.append((t.start, r, "open edge not followed by its endpoint"))
                if kind == "edge" and not (pk == "edge" and pval and any(
                        z not in t.states[r - 1][0] and z not in t.states[r - 1][1] for z in pidx)):
                    if I and idx != min(I):
                        bad.append((t.start, r, "edge is not the minimal frontier edge"))
        # halting
        q = t.queries
        if not q or q[0][:2] != ("copy", t.start):
            bad.append((t.start, 0, "tree does not start at its copy"))
        elif not q[0][2]:
            if len(q) != 1:
                bad.append((t.start, 1, "tree continues after a non-green copy"))
        elif len(q) > 1 and q[1][:2] == ("vertex", t.start) and not q[1][2] and len(q) != 2:
            bad.append((t.start, 2, "tree continues after a closed start vertex"))
        elif len(q) > 2 and t.states:
            if _frontier(t.A, t.B, {e for k, e, _ in q if k == "edge"}, oracle.candidates):
                bad.append((t.start, len(q), "tree halted with a non-empty frontier"))
    return bad


# ---------------------------------------------------------------------------
# exact revealments
# ---------------------------------------------------------------------------


def exact_revealments(dist: ExactDistribution, root_mode: str = FORMAL, method: str = "paths"):
    """Exact ``delta_s`` for every coordinate of ``dist`` and exact ``E[g]``.

    ``paths`` walks the decision forest's branches (each leaf weighted by
    the probability of its queried values); ``configs`` runs the forest on
    every configuration.  Both are exact; the second is for cross-checks.
    """
    if dist.gamma is None:
        raise ValueError("revealments need copy coordinates (gamma)")
    _check_mode(root_mode)
    index = _coord_index(dist)
    nbrs = _tiny_neighbors(dist.tiny)
    delta = np.zeros(len(dist.coords))
    eg = 0.0
    if method == "configs":
        n = dist.tiny.n_sites
        pairs = dist.tiny.edges
        for probs, states in dist.blocks():
            s, e, c = dist.split(states)
            for row in range(probs.size):
                mat = np.zeros((n, n), bool)
                for k, (i, j) in enumerate(pairs):
                    mat[i, j] = mat[j, i] = e[row, k]
                orc = ArrayOracle(s[row], c[row], lambda a, b, m=mat: m[a, b],
                                  lambda x: nbrs[x], dist.tiny.root)
                g, trace = run_forest(orc, root_mode)
                for key in trace.revealed():
                    delta[index[key]] += probs[row]
                eg += probs[row] * g
        return delta, eg
    if method != "paths":
        raise ValueError(f"unknown method {method!r}")
    prob_of = {c: dist.coords[c][2] for c in dist.random}
    stack = [({}, 1.0)]
    while stack:
        assign, weight = stack.pop()
        try:
            g, trace = run_forest(_PartialOracle(dist, index, assign, nbrs), root_mode)
        except _Need as need:
            p = prob_of[need.coord]
            stack.append(({**assign, need.coord: False}, weight * (1.0 - p)))
            stack.append(({**assign, need.coord: True}, weight * p))
            continue
        for key in trace.revealed():
            delta[index[key]] += weight
        eg += weight * g
    return delta, eg


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class InequalityReport:
    """Both sides of an inequality ``lhs <= rhs`` with a per-coordinate table."""

    lhs: float
    rhs: float
    table: list = field(default_factory=list)
    sigma: Optional[float] = None
    name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def holds(self, tol: Optional[float] = None) -> bool:
        if tol is None:
            tol = 1e-12 if self.sigma is None else 4.0 * self.sigma
        return self.slack >= -tol

    def to_dict(self) -> dict:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                "sigma": self.sigma, **self.extra}

    def to_json(self, table_path: Optional[str] = None) -> str:
        d = self.to_dict()
        if table_path is not None:
            d["table"] = str(table_path)
        return json.dumps(d, indent=2, sort_keys=True)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["coordinate", "kind", "delta", "influence"])
        for cid, kind, d, inf in self.table:
            w.writerow([cid, kind, repr(float(d)), repr(float(inf))])
        return buf.getvalue()


def _coord_label(kind, idx) -> str:
    if kind == "edge":
        return f"{idx[0]}-{idx[1]}"
    return str(idx)


def osss_check(tiny: TinyInstance, lam: float, gamma: float, k: int,
               root_mode: str = FORMAL, method: str = "paths") -> InequalityReport:
    """Exact ``|Cov(f, g)| <= 1/2 sum_s delta_s Inf_s`` with ``f = 1{|C(root)| >= k}``."""
    dist = enumerate_configs(tiny, lam, gamma)
    delta, eg = exact_revealments(dist, root_mode, method)
    cov = exact_cov(dist, k)
    table = []
    rhs = 0.0
    for c, (kind, idx, _) in enumerate(dist.coords):
        inf = exact_influence(dist, c, k)
        table.append((_coord_label(kind, idx), kind, float(delta[c]), inf))
        rhs += delta[c] * inf
    return InequalityReport(abs(cov), 0.5 * rhs, table, None, "osss",
                            {"cov": cov, "E_g": eg, "root_mode": root_mode})


def vertex_edge_exact(tiny: TinyInstance, lam: float, k: int, gamma: float,
                      root_mode: str = FORMAL) -> InequalityReport:
    """Both sides of the vertex/edge influence inequality with ``gamma~ = gamma / k``."""
    if gamma <= 0 or k < 1:
        raise ValueError("need gamma > 0 and k >= 1")
    gt = gamma / k
    dist = enumerate_configs(tiny, lam, gt)
    delta, _ = exact_revealments(dist, root_mode)
    theta = 0.0
    mag = 0.0
    h = -math.expm1(-gt)
    for p, states in dist.blocks():
        s, e, _ = dist.split(states)
        size = cluster_masks(tiny, s, e, tiny.root).sum(axis=1)
        theta += float(np.dot(p, size >= k))
        mag += float(np.dot(p, 1.0 - (1.0 - h) ** size))
    edge_sum = 0.0
    vertex_sum = 0.0
    table = []
    for c, (kind, idx, _) in enumerate(dist.coords):
        if kind == "copy":
            continue
        inf = exact_influence(dist, c, k)
        table.append((_coord_label(kind, idx), kind, float(delta[c]), inf))
        if kind == "edge":
            edge_sum += delta[c] * inf
        else:
            vertex_sum += delta[c] * inf
    lhs = (-math.expm1(-gamma) - mag) * theta - edge_sum
    return InequalityReport(lhs, vertex_sum, table, None, "vertex_edge",
                            {"theta": theta, "magnetization": mag, "edge_sum": edge_sum,
                             "gamma_tilde": gt, "root_mode": root_mode})


# ---------------------------------------------------------------------------
# fast revealed sets for Monte Carlo
# ---------------------------------------------------------------------------


_PAIR_CACHE: dict = {}
PAIR_CACHE_MAX = 2 * 10 ** 6


def possible_pairs(spec: LatticeSpec):
    """All vertex pairs ``a < b`` with ``phi > 0`` for finite-range models (cached per spec).

    Returns ``None`` when the range is infinite or the pair list would be too long.
    """
    key = id(spec)
    hit = _PAIR_CACHE.get(key)
    if hit is not None and hit[0] is spec:
        return hit[1]
    N = spec.n_vertices
    adj = spec.model.adjacency
    top = adj.max_range(float(spec.bins.max()))
    out = None
    if math.isfinite(top) and N <= 50000:
        from scipy.spatial import cKDTree
        pos = spec.positions(np.arange(N))
        pr = cKDTree(pos).query_pairs(top * (1 + 1e-12), output_type="ndarray")
        if len(pr) <= PAIR_CACHE_MAX:
            a, b = pr[:, 0].astype(np.int64), pr[:, 1].astype(np.int64)
            swap = a > b
            a[swap], b[swap] = b[swap], a[swap]
            w = spec.weights(np.arange(N))
            r = np.linalg.norm(pos[a] - pos[b], axis=1)
            live = adj.phi(r, w[a], w[b]) > 0
            out = (a[live], b[live])
    if len(_PAIR_CACHE) > 16:
        _PAIR_CACHE.clear()
    _PAIR_CACHE[key] = (spec, out)
    return out


class ForestSummary:
    """Revealed coordinates of the whole forest without replaying every query.

    The open clusters explored are those holding a green open starter.  A
    vertex is revealed iff it is a green starter's own vertex, belongs to an
    explored cluster, or is closed with an open edge into one.  For edges
    between an explored cluster and a closed vertex ``z`` the order matters;
    it is recovered per tree from the sequence in which the tree absorbs
    open vertices (always through the smallest open edge leaving the
    absorbed set, which splits the run into periods).
    """

    def __init__(self, instance, green: np.ndarray, root_mode: str = UNIFORM):
        _check_mode(root_mode)
        spec: LatticeSpec = instance.spec
        self.spec = spec
        self.instance = instance
        self.root_mode = root_mode
        N = spec.n_vertices
        self.N = N
        self.graph = spec.graph(np.arange(N), instance.edge_key)
        self.is_open = np.zeros(N, bool)
        self.is_open[instance.open_ids] = True
        self.green = np.asarray(green, bool)
        pairs = possible_pairs(spec)
        if pairs is not None:
            PI, PJ = pairs
            both = self.is_open[PI] & self.is_open[PJ]
            I, J = PI[both], PJ[both]
            keep = self.graph.edge_open(I, J)
            I, J = I[keep], J[keep]
        else:
            I, J = self.graph.open_edges(self.is_open)
        self._pairs = pairs
        self.I, self.J = I, J
        self.labels = labels_from_edges(N, I, J)
        self.comp_size = np.bincount(self.labels, minlength=N)
        root = spec.root
        starters = self.green & self.is_open
        if root_mode == FORMAL:
            starters[root] = False
        self.starters = np.flatnonzero(starters)
        self.explored_labels = np.unique(self.labels[self.starters])
        self.explored = self.is_open & np.isin(self.labels, self.explored_labels)
        self._closed_edges = None
        self._prim = {}

    # closed vertices with open edges to open vertices ---------------
    def closed_open_edges(self):
        """Open edges ``(z, x)`` with ``z`` closed and ``x`` open."""
        if self._closed_edges is None:
            closed = np.flatnonzero(~self.is_open)
            opened = np.flatnonzero(self.is_open)
            zs, xs = [], []
            g = self.graph
            if self._pairs is not None:
                PI, PJ = self._pairs
                oi, oj = self.is_open[PI], self.is_open[PJ]
                a = np.concatenate([PI[~oi & oj], PJ[oi & ~oj]])
                b = np.concatenate([PJ[~oi & oj], PI[oi & ~oj]])
                hit = g.edge_open(a, b)
                self._closed_edges = (a[hit], b[hit])
                return self._closed_edges
            if closed.size and opened.size:
                for start in range(0, closed.size, 2048):
                    z = closed[start:start + 2048]
                    a, b = np.meshgrid(z, opened, indexing="ij")
                    a, b = a.ravel(), b.ravel()
                    if math.isfinite(g.range):
                        diff = g.positions[a] - g.positions[b]
                        near = np.einsum("ij,ij->i", diff, diff) <= g.range ** 2 * (1 + 1e-12)
                        a, b = a[near], b[near]
                    hit = g.edge_open(a, b)
                    zs.append(a[hit])
                    xs.append(b[hit])
            e = np.empty(0, np.int64)
            self._closed_edges = (np.concatenate(zs) if zs else e, np.concatenate(xs) if xs else e)
        return self._closed_edges

    def cluster_sizes(self) -> np.ndarray:
        """``|C(u)|`` for every vertex ``u`` (a closed vertex counts itself)."""
        size = np.where(self.is_open, self.comp_size[self.labels], 1)
        z, x = self.closed_open_edges()
        if z.size:
            pairs = np.unique(np.stack([z, self.labels[x]], axis=1), axis=0)
            np.add.at(size, pairs[:, 0], self.comp_size[pairs[:, 1]])
        return size

    def vertex_revealed(self) -> np.ndarray:
        rev = self.green.copy()
        if self.root_mode == FORMAL:
            rev[self.spec.root] = False
        rev |= self.explored
        z, x = self.closed_open_edges()
        if z.size:
            rev[z[self.explored[x]]] = True
        return rev

    def copy_revealed(self) -> np.ndarray:
        return np.ones(self.N, bool)

    # edges ------------------------------------------------------------
    def _key(self, a, b):
        a = np.asarray(a, np.int64)
        b = np.asarray(b, np.int64)
        return np.minimum(a, b) * self.N + np.maximum(a, b)

    def _prim_order(self, u: int):
        """Join period of each absorbed vertex and the stop key of each period."""
        if u in self._prim:
            return self._prim[u]
        lab = self.labels[u]
        sel = (self.labels[self.I] == lab)
        I, J = self.I[sel], self.J[sel]
        adj = {}
        for a, b in zip(I.tolist(), J.tolist()):
            kk = min(a, b) * self.N + max(a, b)
            adj.setdefault(a, []).append((kk, b))
            adj.setdefault(b, []).append((kk, a))
        join = {u: 0}
        stops = []
        heap = list(adj.get(u, []))
        heapq.heapify(heap)
        while heap:
            kk, y = heapq.heappop(heap)
            if y in join:
                continue
            stops.append(kk)
            join[y] = len(stops)
            for item in adj.get(y, []):
                if item[1] not in join:
                    heapq.heappush(heap, item)
        stops.append(math.inf)
        self._prim[u] = (join, stops)
        return join, stops

    @staticmethod
    def _position(join_t: int, key: int, stops) -> tuple:
        t = join_t
        while not key < stops[t]:
            t += 1
        return (t, key)

    def edges_revealed(self, a, b) -> np.ndarray:
        """Vectorised :meth:`edge_revealed` (cheap rejection when no endpoint is explored)."""
        a = np.asarray(a, np.int64)
        b = np.asarray(b, np.int64)
        out = np.zeros(a.size, bool)
        for i in np.flatnonzero(self.explored[a] | self.explored[b]):
            out[i] = self.edge_revealed(int(a[i]), int(b[i]))
        return out

    def edge_revealed(self, a: int, b: int) -> bool:
        """Whether the edge ``{a, b}`` is queried by some tree."""
        a, b = int(a), int(b)
        ea, eb = bool(self.explored[a]), bool(self.explored[b])
        if not (ea or eb):
            return False
        if ea and eb:
            return True
        x, z = (a, b) if ea else (b, a)
        if self.is_open[z]:
            return True
        key = int(self._key(x, z))
        zs, xs = self.closed_open_edges()
        into = xs[zs == z]
        lab = self.labels[x]
        into = into[self.labels[into] == lab]
        for u in self.starters[self.labels[self.starters] == lab]:
            join, stops = self._prim_order(int(u))
            pos = self._position(join[x], key, stops)
            if into.size == 0:
                return True
            first = min(self._position(join[int(y)], int(self._key(y, z)), stops) for y in into)
            if pos <= first:
                return True
        return False


def summary_for(instance, ghost: GhostField, root_mode: str = UNIFORM) -> ForestSummary:
    return ForestSummary(instance, ghost.green(np.arange(instance.spec.n_vertices)), root_mode)


# ---------------------------------------------------------------------------
# Monte Carlo estimators
# ---------------------------------------------------------------------------


def _parse_coord(s):
    kind, idx = s
    if kind not in ("vertex", "copy", "edge"):
        raise ValueError(f"unknown coordinate kind {kind!r}")
    return kind, (tuple(sorted(int(v) for v in idx)) if kind == "edge" else int(idx))


def revealment(spec: LatticeSpec, lam: float, gamma: float, s, samples: int, seed: int = 0,
               root_mode: str = UNIFORM) -> Estimate:
    """Frequency with which coordinate ``s = (kind, index)`` is queried by the forest."""
    kind, idx = _parse_coord(s)
    vals = np.zeros(samples)
    for r in range(samples):
        if kind == "copy":
            vals[r] = 1.0
            continue
        inst = sample_instance(spec, lam, seed, r)
        summ = summary_for(inst, GhostField(gamma, seed, r), root_mode)
        if kind == "vertex":
            vals[r] = summ.vertex_revealed()[idx]
        else:
            vals[r] = summ.edge_revealed(*idx)
    return Estimate.from_samples(vals, seed, f"revealment {kind} {idx}")


def magnetization(spec: LatticeSpec, lam: float, gamma: float, u: Optional[int], samples: int,
                  seed: int = 0) -> Estimate:
    """``E[1 - exp(-gamma |C(u)|)]`` from sampled cluster sizes (``u`` defaults to the root)."""
    u = spec.root if u is None else int(u)
    vals = np.zeros(samples)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        size = ForestSummary(inst, np.zeros(spec.n_vertices, bool)).cluster_sizes()[u]
        vals[r] = -math.expm1(-gamma * size)
    return Estimate.from_samples(vals, seed, f"magnetization {u}")


@dataclass
class IdentityCheck:
    """Per-vertex revealment against magnetization on shared replicas."""

    gamma: float
    revealment: np.ndarray
    magnetization: np.ndarray
    sigma: np.ndarray
    samples: int

    @property
    def z(self) -> np.ndarray:
        diff = self.revealment - self.magnetization
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.sigma > 0, diff / self.sigma, np.where(diff == 0, 0.0, np.inf))

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def failures(self, threshold: float = 3.0) -> np.ndarray:
        return np.flatnonzero(np.abs(self.z) > threshold)


def identity_check(spec: LatticeSpec, lam: float, gammas, samples: int, seed: int = 0,
                   root_mode: str = UNIFORM) -> list:
    """Revealment and magnetization of every vertex at each ``gamma``.

    Both are measured on the same configurations; ``sigma`` is the standard
    error of the per-replica difference between the revealment indicator and
    ``1 - exp(-gamma |C(u)|)``.
    """
    gammas = list(gammas)
    N = spec.n_vertices
    s1 = np.zeros((len(gammas), N))
    m1 = np.zeros((len(gammas), N))
    d1 = np.zeros((len(gammas), N))
    d2 = np.zeros((len(gammas), N))
    ids = np.arange(N)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        summ = None
        for gi, gam in enumerate(gammas):
            ghost = GhostField(gam, seed, r)
            green = ghost.green(ids)
            if summ is None:
                summ = ForestSummary(inst, green, root_mode)
                sizes = summ.cluster_sizes()
            else:
                summ = _regreen(summ, green)
            rev = summ.vertex_revealed().astype(float)
            mag = -np.expm1(-gam * sizes)
            s1[gi] += rev
            m1[gi] += mag
            d = rev - mag
            d1[gi] += d
            d2[gi] += d * d
    out = []
    for gi, gam in enumerate(gammas):
        mean_d = d1[gi] / samples
        var_d = (d2[gi] - samples * mean_d ** 2) / (samples - 1)
        out.append(IdentityCheck(gam, s1[gi] / samples, m1[gi] / samples,
                                 np.sqrt(np.maximum(var_d, 0.0) / samples), samples))
    return out


def _regreen(summ: ForestSummary, green: np.ndarray) -> ForestSummary:
    """Same configuration, different ghost field (cluster structure reused)."""
    new = object.__new__(ForestSummary)
    new.__dict__.update(summ.__dict__)
    new.green = np.asarray(green, bool)
    starters = new.green & new.is_open
    if new.root_mode == FORMAL:
        starters[new.spec.root] = False
    new.starters = np.flatnonzero(starters)
    new.explored_labels = np.unique(new.labels[new.starters])
    new.explored = new.is_open & np.isin(new.labels, new.explored_labels)
    new._prim = {}
    return new


def influence(spec: LatticeSpec, lam: float, s, k: int, samples: int, seed: int = 0) -> Estimate:
    """``P(f(omega) != f(omega'))`` where ``omega'`` resamples coordinate ``s`` only.

    ``f = 1{|C(root)| >= k}``.  Copy coordinates have influence 0.
    """
    kind, idx = _parse_coord(s)
    vals = np.zeros(samples)
    if kind == "copy":
        return Estimate.from_samples(vals, seed, "influence copy")
    key = rng.stream_key(seed, 0, rng.STREAM_RESAMPLE)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        fresh = float(rng.uniforms(key, r))
        if kind == "vertex":
            p = float(spec.p_open(lam, [idx])[0])
            now = bool(np.isin(idx, inst.open_ids))
            new = fresh < p
            if now == new:
                continue
            ids_on = np.union1d(inst.open_ids, [idx])
            ids_off = np.setdiff1d(inst.open_ids, [idx])
            f_on = _root_size(inst, ids_on, None) >= k
            f_off = _root_size(inst, ids_off, None) >= k
        else:
            a, b = idx
            g = spec.graph(np.array([a, b]), inst.edge_key)
            p = float(g.edge_prob(0, 1))
            now = bool(g.edge_open(0, 1))
            new = fresh < p
            if now == new:
                continue
            f_on = _root_size(inst, inst.open_ids, (a, b, True)) >= k
            f_off = _root_size(inst, inst.open_ids, (a, b, False)) >= k
        vals[r] = float(f_on != f_off)
    return Estimate.from_samples(vals, seed, f"influence {kind} {idx}")


def _root_size(inst, open_ids, override) -> int:
    spec = inst.spec
    ids = np.union1d(open_ids, [spec.root])
    g = spec.graph(ids, inst.edge_key)
    I, J = g.open_edges()
    if override is not None:
        a, b, state = override
        if a in ids and b in ids:
            la, lb = int(np.searchsorted(ids, a)), int(np.searchsorted(ids, b))
            la, lb = min(la, lb), max(la, lb)
            keep = ~((I == la) & (J == lb))
            I, J = I[keep], J[keep]
            if state:
                I = np.append(I, la)
                J = np.append(J, lb)
    labels = labels_from_edges(ids.size, I, J)
    r = int(np.searchsorted(ids, spec.root))
    return int(np.sum(labels == labels[r]))


@dataclass
class _ReplicaTerms:
    f: float
    mag: float
    vertex: float
    edge: float
    f2: float
    root_revealed: float


def _replica_terms(spec, lam, gt, k, seed, r, root_mode) -> _ReplicaTerms:
    """One replica pair: revealments from ``(omega1, rho1)``, pivotality from an independent ``omega2``."""
    inst1 = sample_instance(spec, lam, seed, 2 * r)
    summ = summary_for(inst1, GhostField(gt, seed, 2 * r), root_mode)
    size = summ.cluster_sizes()[spec.root]
    inst2 = sample_instance(spec, lam, seed, 2 * r + 1)
    rep = analyze_root(inst2, k, vertices=True, edges=True)
    vrev = summ.vertex_revealed()
    vertex = 0.0
    if rep.pivotal_vertices.size:
        pv = rep.pivotal_vertices
        p = spec.p_open(lam, pv)
        vertex = float(np.sum(2.0 * p * (1.0 - p) * vrev[pv]))
    edge = 0.0
    if rep.pivotal_edges:
        g = summ.graph
        for a, b in rep.pivotal_edges:
            q = float(g.edge_prob(a, b))
            if 0.0 < q < 1.0 and summ.edge_revealed(a, b):
                edge += 2.0 * q * (1.0 - q)
    return _ReplicaTerms(float(size >= k), -math.expm1(-gt * size), vertex, edge,
                         float(rep.size >= k), float(vrev[spec.root]))


def osss_monte_carlo(spec: LatticeSpec, lam: float, gamma: float, k: int, samples: int,
                     seed: int = 0, root_mode: str = FORMAL) -> InequalityReport:
    """``|Cov(f, g)| <= 1/2 sum_s delta_s Inf_s`` with per-replica standard errors.

    ``Cov(f, g)`` uses ``E[g | omega] = 1 - exp(-gamma |C(root)|)``.
    """
    terms = [_replica_terms(spec, lam, gamma, k, seed, r, root_mode) for r in range(samples)]
    f = np.array([t.f for t in terms])
    m = np.array([t.mag for t in terms])
    rhs_r = 0.5 * np.array([t.vertex + t.edge for t in terms])
    psi = (f - f.mean()) * (m - m.mean())
    cov = float(psi.mean() * samples / (samples - 1))
    z = rhs_r - np.sign(cov) * psi
    sigma = float(np.std(z, ddof=1) / math.sqrt(samples))
    return InequalityReport(abs(cov), float(rhs_r.mean()), [], sigma, "osss-mc",
                            {"cov": cov, "samples": samples, "root_mode": root_mode})


def vertex_edge_monte_carlo(spec: LatticeSpec, lam: float, k: int, gamma: float, samples: int,
                            seed: int = 0, root_mode: str = FORMAL) -> InequalityReport:
    """Monte Carlo sides of the vertex/edge influence inequality (``gamma~ = gamma / k``).

    Per replica pair the left side is
    ``(1 - e^-gamma - M) F - E`` and the right side ``V``.  ``M`` and the
    revealments come from the forest on the first configuration; ``F`` and
    the pivotal sets from the second, so every product is unbiased.  ``E``
    and ``V`` sum ``delta * Inf`` over edges and vertices.
    """
    if gamma <= 0 or k < 1:
        raise ValueError("need gamma > 0 and k >= 1")
    gt = gamma / k
    terms = [_replica_terms(spec, lam, gt, k, seed, r, root_mode) for r in range(samples)]
    F = np.array([t.f2 for t in terms])
    M = np.array([t.mag for t in terms])
    V = np.array([t.vertex for t in terms])
    E = np.array([t.edge for t in terms])
    lhs_r = (-math.expm1(-gamma) - M) * F - E
    slack_r = V - lhs_r
    sigma = float(np.std(slack_r, ddof=1) / math.sqrt(samples))
    return InequalityReport(float(lhs_r.mean()), float(V.mean()), [], sigma, "vertex-edge-mc",
                            {"theta": float(F.mean()), "magnetization": float(M.mean()),
                             "edge_sum": float(E.mean()), "vertex_sum": float(V.mean()),
                             "gamma_tilde": gt, "samples": samples, "root_mode": root_mode})


def edge_influence_sum(spec: LatticeSpec, lam: float, gamma: float, k: int, samples: int,
                       seed: int = 0, root_mode: str = UNIFORM) -> dict:
    """``sum_e delta(e) Inf_e / delta(root)`` with its standard error.

    Revealments come from ``samples`` configurations with ghost fields
    (even replicas) and edge influences from ``samples`` independent
    configurations (odd replicas).  Every revealment replica is paired with
    every pivotality replica, so the numerator is
    ``sum_e delta_hat(e) Inf_hat(e)`` with the two factors estimated on
    disjoint replica sets, which keeps it unbiased.  The standard error
    combines the two one-sample projections by the delta method.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    # influences: 2 phi (1 - phi) per pivotal edge, per odd replica
    edge_w: dict = {}
    per_b = []
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, 2 * r + 1)
        rep = analyze_root(inst, k, vertices=False, edges=True)
        found = {}
        if rep.pivotal_edges:
            a = np.array([e[0] for e in rep.pivotal_edges])
            b = np.array([e[1] for e in rep.pivotal_edges])
            for e, qe in zip(rep.pivotal_edges, _pair_prob(spec, a, b)):
                if 0.0 < qe < 1.0:
                    found[e] = 2.0 * qe * (1.0 - qe)
        per_b.append(found)
        for e, w in found.items():
            edge_w[e] = edge_w.get(e, 0.0) + w
    edges = sorted(edge_w)
    inf_hat = np.array([edge_w[e] for e in edges]) / samples
    ea = np.array([e[0] for e in edges], dtype=np.int64)
    eb = np.array([e[1] for e in edges], dtype=np.int64)
    hits = np.zeros(len(edges))
    A = np.zeros(samples)
    R = np.zeros(samples)
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, 2 * r)
        summ = summary_for(inst, GhostField(gamma, seed, 2 * r), root_mode)
        R[r] = float(summ.vertex_revealed()[spec.root])
        if edges:
            rev = summ.edges_revealed(ea, eb)
            hits += rev
            A[r] = float(np.dot(inf_hat, rev))
    delta_hat = hits / samples
    index = {e: i for i, e in enumerate(edges)}
    B = np.array([sum(w * delta_hat[index[e]] for e, w in found.items()) for found in per_b])
    num, den = float(A.mean()), float(R.mean())
    if den <= 0:
        return {"value": math.nan, "stderr": math.nan, "numerator": num, "denominator": 0.0,
                "samples": samples}
    ratio = num / den
    se = float(math.sqrt((np.var(A - ratio * R, ddof=1) + np.var(B, ddof=1)) / samples) / den)
    num_se = float(math.sqrt((np.var(A, ddof=1) + np.var(B, ddof=1)) / samples))
    return {"value": float(ratio), "stderr": se, "numerator": num, "numerator_stderr": num_se,
            "denominator": den, "samples": samples}


def _pair_prob(spec: LatticeSpec, a, b) -> np.ndarray:
    """``phi`` between lattice vertices ``a`` and ``b`` (arrays)."""
    diff = spec.positions(a) - spec.positions(b)
    r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return spec.model.adjacency.phi(r, spec.weights(a), spec.weights(b))
