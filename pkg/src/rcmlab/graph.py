"""Random graphs over marked vertex arrays with lazily revealed edges.

Vertices are rows of ``(positions, weights, keys)``.  The edge between two
vertices is open iff the pair variate ``u(key_i, key_j)`` is below
``phi(|x_i - x_j|; w_i, w_j)``; nothing is stored, so any subset of edges can
be queried in any order with identical answers.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import rng
from .model import AdjacencySpec

BRUTE_FORCE_MAX = 3000  # below this many vertices, neighbour scans are plain vectorised loops


class LazyGraph:
    """Random connection graph on a fixed marked vertex set.

    Parameters
    ----------
    adjacency : AdjacencySpec
    positions : (N, d) array
    weights : (N,) array
    keys : (N,) int64 array
        Stable hash keys; the pair variate depends only on the two keys.
    edge_key : numpy.uint64
        Stream key of the edge variates.
    """

    def __init__(self, adjacency: AdjacencySpec, positions, weights, keys, edge_key):
        self.adjacency = adjacency
        self.positions = np.asarray(positions, dtype=float).reshape(len(keys), -1)
        self.weights = np.asarray(weights, dtype=float)
        self.keys = np.asarray(keys, dtype=np.int64)
        self.edge_key = edge_key
        self.n = len(self.keys)
        wmax = float(self.weights.max()) if self.n else 1.0
        self.range = adjacency.max_range(wmax)
        self._tree = None

    # ------------------------------------------------------------------
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.positions)
        return self._tree

    def geometric_csr(self):
        """CSR lists of all pairs within the finite range (cached)."""
        if getattr(self, "_csr", None) is None:
            pairs = self.tree().query_pairs(self.range * (1 + 1e-12), output_type="ndarray")
            a = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
            b = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)
            order = np.argsort(a)
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(a, minlength=self.n), out=indptr[1:])
            self._csr = (indptr, b[order])
        return self._csr

    def edge_open(self, i, j) -> np.ndarray:
        """Open/closed state of the pairs ``(i, j)`` (index arrays, broadcast)."""
        i = np.asarray(i)
        j = np.asarray(j)
        diff = self.positions[i] - self.positions[j]
        r = np.sqrt(np.einsum("...k,...k->...", diff, diff))
        p = self.adjacency.phi(r, self.weights[i], self.weights[j])
        u = rng.pair_uniforms(self.edge_key, self.keys[i], self.keys[j])
        return (u < p) & (i != j)

    def edge_prob(self, i, j) -> np.ndarray:
        diff = self.positions[np.asarray(i)] - self.positions[np.asarray(j)]
        r = np.sqrt(np.einsum("...k,...k->...", diff, diff))
        return self.adjacency.phi(r, self.weights[i], self.weights[j])

    def candidates(self, i: int, pool: Optional[np.ndarray] = None) -> np.ndarray:
        """Indices that may be adjacent to ``i`` (superset, sorted)."""
        if self.range <= 0:
            return np.empty(0, dtype=np.int64)
        if math.isinf(self.range) or self.n <= BRUTE_FORCE_MAX:
            cand = np.arange(self.n) if pool is None else np.asarray(pool)
        else:
            radius = self.adjacency.max_range(float(self.weights[i]))
            cand = np.asarray(sorted(self.tree().query_ball_point(self.positions[i], radius)),
                              dtype=np.int64)
            if pool is not None:
                cand = np.intersect1d(cand, pool)
        return cand[cand != i]

    def neighbors(self, i: int, pool: Optional[np.ndarray] = None) -> np.ndarray:
        """Sorted indices adjacent to ``i`` (within ``pool`` when given)."""
        cand = self.candidates(i, pool)
        if cand.size == 0:
            return cand
        return np.sort(cand[self.edge_open(np.full(cand.size, i), cand)])

    # ------------------------------------------------------------------
    def bfs(self, source: int, active: Optional[np.ndarray] = None,
            size_cap: Optional[int] = None, stop=None):
        """Breadth-first cluster of ``source`` among ``active`` vertices.

        The source is always a member, whether or not it is active.  Returns
        ``(members, generations, capped)`` where ``generations[g]`` is the
        number of vertices at graph distance ``g``.  Exploration also ends
        early (``capped`` set) once ``stop(new_generation)`` returns true.
        """
        free = np.ones(self.n, dtype=bool) if active is None else np.asarray(active, bool).copy()
        free[source] = False
        members = [source]
        generations = [1]
        frontier = np.array([source], dtype=np.int64)
        capped = False
        use_tree = not (math.isinf(self.range) or self.n <= BRUTE_FORCE_MAX)
        while frontier.size:
            if use_tree:
                indptr, nbr = self.geometric_csr()
                starts, ends = indptr[frontier], indptr[frontier + 1]
                counts = ends - starts
                src = np.repeat(frontier, counts)
                offsets = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
                cand = nbr[offsets + np.arange(int(counts.sum()))]
            else:
                pool = np.flatnonzero(free)
                src = np.repeat(frontier, pool.size)
                cand = np.tile(pool, frontier.size)
            keep = free[cand]
            src, cand = src[keep], cand[keep]
            if cand.size == 0:
                break
            hit = np.unique(cand[self.edge_open(src, cand)])
            if hit.size == 0:
                break
            free[hit] = False
            frontier = hit
            members.extend(frontier.tolist())
            generations.append(int(frontier.size))
            if size_cap is not None and len(members) >= size_cap:
                capped = True
                break
            if stop is not None and stop(frontier):
                capped = True
                break
        return np.sort(np.asarray(members, dtype=np.int64)), generations, capped

    def open_edges(self, active: Optional[np.ndarray] = None):
        """All open edges among ``active`` vertices as index arrays ``(I, J)``, ``I < J``."""
        idx = np.arange(self.n) if active is None else np.flatnonzero(active)
        if idx.size < 2 or self.range <= 0:
            e = np.empty(0, dtype=np.int64)
            return e, e
        if math.isinf(self.range) or idx.size <= 400:
            a, b = np.triu_indices(idx.size, k=1)
            I, J = idx[a], idx[b]
            if not math.isinf(self.range):
                diff = self.positions[I] - self.positions[J]
                near = np.einsum("ij,ij->i", diff, diff) <= self.range ** 2 * (1 + 1e-12)
                I, J = I[near], J[near]
        else:
            sub = cKDTree(self.positions[idx])
            pairs = sub.query_pairs(self.range * (1 + 1e-12), output_type="ndarray")
            I, J = idx[pairs[:, 0]], idx[pairs[:, 1]]
            swap = I > J
            I[swap], J[swap] = J[swap], I[swap]
        keep = self.edge_open(I, J)
        return I[keep], J[keep]

    def components(self, active: Optional[np.ndarray] = None, extra=None):
        """Connected-component labels over all vertices.

        Inactive vertices are singletons; ``extra`` optionally forces some
        vertices active (used for the always-included root).
        """
        act = np.ones(self.n, dtype=bool) if active is None else np.asarray(active, bool).copy()
        if extra is not None:
            act[np.asarray(extra)] = True
        I, J = self.open_edges(act)
        return labels_from_edges(self.n, I, J)


SMALL_EDGES = 4096  # below this, label propagation beats the sparse-matrix round trip


def labels_from_edges(n: int, I, J) -> np.ndarray:
    """Component labels of the graph on ``n`` vertices with edges ``(I, J)``.

    Labels are only meaningful up to equality: small graphs are labelled by
    the smallest vertex of each component, large ones by scipy's numbering.
    """
    if n == 0:
        return np.empty(0, dtype=np.int64)
    I = np.asarray(I, dtype=np.int64)
    J = np.asarray(J, dtype=np.int64)
    if I.size <= SMALL_EDGES:
        lab = np.arange(n, dtype=np.int64)
        if I.size == 0:
            return lab
        while True:
            m = np.minimum(lab[I], lab[J])
            new = lab.copy()
            np.minimum.at(new, I, m)
            np.minimum.at(new, J, m)
            new = new[new]
            if np.array_equal(new, lab):
                return lab
            lab = new
    mat = coo_matrix((np.ones(len(I), dtype=np.int8), (I, J)), shape=(n, n))
    _, labels = connected_components(mat, directed=False)
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# pivotality
# ---------------------------------------------------------------------------


def cut_sizes(n_local: int, I, J, root: int):
    """Root-side component sizes after deleting each vertex and each edge.

    Works on a connected graph with local indices ``0..n_local-1`` via an
    iterative depth-first search (low-link values).  Returns
    ``(vertex_cut, edge_cut)`` where ``vertex_cut[v]`` is the size of the
    root's component after deleting ``v`` (``n_local`` for the root itself)
    and ``edge_cut`` maps each tree edge ``(parent, child)`` that is a bridge
    to the root-side size after deleting it.
    """
    adj = [[] for _ in range(n_local)]
    for a, b in zip(np.asarray(I).tolist(), np.asarray(J).tolist()):
        adj[a].append(b)
        adj[b].append(a)
    disc = [-1] * n_local
    low = [0] * n_local
    sub = [1] * n_local
    parent = [-1] * n_local
    removed = [0] * n_local  # size cut off from the root when v is deleted
    bridges = {}
    t = 0
    disc[root] = low[root] = t
    stack = [(root, iter(adj[root]))]
    while stack:
        v, it = stack[-1]
        advanced = False
        for w in it:
            if disc[w] == -1:
                t += 1
                disc[w] = low[w] = t
                parent[w] = v
                stack.append((w, iter(adj[w])))
                advanced = True
                break
            if w != parent[v]:
                low[v] = min(low[v], disc[w])
        if advanced:
            continue
        stack.pop()
        p = parent[v]
        if p >= 0:
            sub[p] += sub[v]
            low[p] = min(low[p], low[v])
            if low[v] >= disc[p]:
                removed[p] += sub[v]
            if low[v] > disc[p]:
                bridges[(p, v)] = n_local - sub[v]
    vertex_cut = np.array([n_local - 1 - removed[v] for v in range(n_local)], dtype=np.int64)
    vertex_cut[root] = n_local
    return vertex_cut, bridges
