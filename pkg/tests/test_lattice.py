import math

import numpy as np
import pytest

from rcmlab.continuum import cluster_of_origin
from rcmlab.lattice import (_root_size, analyze_root, build_lattice, cell_index, coupled_source,
                            distinct_cells, instance_from_points, lattice_cluster,
                            pivotal_probability, russo_rhs, sample_instance, truncation_residual)
from rcmlab.oracle import TinyInstance, exact_theta


def test_geometry(gilbert):
    spec = build_lattice(gilbert, 2, 1)
    assert spec.side == 9 and spec.n_sites == 81 and spec.n_bins == 1
    np.testing.assert_array_equal(spec.positions([spec.root]), [[0.0, 0.0]])
    assert spec.weights([spec.root])[0] == 1.0
    corner = spec.positions([0])[0]
    np.testing.assert_array_equal(corner, [-2.0, -2.0])
    assert spec.vertex_at([0.5, -1.0], 1.0) == spec.vertex_id((5, 2), 0)


def test_open_probabilities(min_reach):
    spec = build_lattice(min_reach, 1, 1, intensity=0.5)
    lam = 0.5
    w = 0.25 * spec.masses
    np.testing.assert_allclose(spec.p_open(lam), 1 - np.exp(-lam * w))
    assert spec.masses.sum() == pytest.approx(1.0, abs=1e-12)


def test_truncation_cap_is_minimal():
    from rcmlab.model import AdjacencySpec, ModelSpec, Reach, WeightDistribution
    model = ModelSpec(AdjacencySpec("min_reach", 2, {"beta": 3.0}, Reach("linear", 1.0)),
                      WeightDistribution.pareto(2.5), intensity=1.0, box=2.0)
    spec = build_lattice(model, 2, 0, truncation_tol=1e-4)
    assert spec.residual >= 1 - 1e-4
    assert truncation_residual(model, 2, 0, spec.H - 1, 1.0) < 1 - 1e-4


def test_direct_instances_monotone_in_intensity(smooth):
    spec = build_lattice(smooth, 2, 1)
    for r in range(5):
        a = sample_instance(spec, 0.5, 3, r).open_ids
        b = sample_instance(spec, 1.5, 3, r).open_ids
        assert set(a.tolist()) <= set(b.tolist())


def test_occupation_rate(smooth):
    spec = build_lattice(smooth, 2, 0)
    lam = 1.0
    opened = np.mean([sample_instance(spec, lam, 1, r).open_ids.size for r in range(300)])
    expected = spec.n_vertices * (1 - math.exp(-lam))
    assert abs(opened - expected) < 4 * math.sqrt(spec.n_vertices * 0.25 / 300)


def test_cell_index_half_open(gilbert):
    spec = build_lattice(gilbert, 1, 1)
    pts = np.array([[-1.25, -1.25], [1.2499, 0.0], [1.25, 0.0], [0.0, 0.0], [-0.25, 0.24]])
    ids = cell_index(spec, pts, np.ones(len(pts)))
    assert ids[0] == 0 and ids[2] == -1
    assert ids[3] == spec.root == ids[4]


@pytest.mark.parametrize("n", [1, 3])
def test_distinct_cells_give_equal_cluster_sizes(gilbert, n):
    spec = build_lattice(gilbert, 2, n)
    seen = 0
    for r in range(60):
        src = coupled_source(spec, 0.5, 7, r)
        inst = instance_from_points(spec, 0.5, src)
        if not distinct_cells(inst):
            continue
        seen += 1
        lat = lattice_cluster(inst).size
        cont = cluster_of_origin(inst.source, margin=0.0).size
        assert lat == cont
    assert seen > 0


def _brute_pivotal(inst, k):
    out = []
    spec = inst.spec
    for v in range(spec.n_vertices):
        if v == inst.root:
            continue
        opened = _root_size(inst, np.union1d(inst.open_ids, [v])) >= k
        closed = _root_size(inst, np.setdiff1d(inst.open_ids, [v])) >= k
        if opened != closed:
            out.append(v)
    return out


@pytest.mark.parametrize("k", [2, 4, 7])
def test_pivotal_vertices_match_brute_force(smooth, k):
    spec = build_lattice(smooth, 1, 1)
    for r in range(6):
        inst = sample_instance(spec, 1.5, 2, r)
        got = analyze_root(inst, k).pivotal_vertices.tolist()
        assert got == _brute_pivotal(inst, k)


@pytest.mark.parametrize("lam,k", [(0.8, 3), (3.0, 6), (3.0, 20)])
def test_pivotal_edges_match_brute_force(smooth, lam, k):
    from rcmlab.graph import labels_from_edges
    spec = build_lattice(smooth, 1, 1)
    for r in range(4):
        inst = sample_instance(spec, lam, 5, r)
        ids = inst.active_ids()
        g = spec.graph(ids, inst.edge_key)
        I, J = g.open_edges()
        present = set(zip(I.tolist(), J.tolist()))
        root = int(np.searchsorted(ids, inst.root))
        expected = []
        for a in range(ids.size):
            for b in range(a + 1, ids.size):
                on = present | {(a, b)}
                off = present - {(a, b)}
                sizes = []
                for edges in (on, off):
                    ii = np.array([e[0] for e in edges], dtype=np.int64)
                    jj = np.array([e[1] for e in edges], dtype=np.int64)
                    lab = labels_from_edges(ids.size, ii, jj)
                    sizes.append(int(np.sum(lab == lab[root])))
                if (sizes[0] >= k) != (sizes[1] >= k):
                    expected.append((int(ids[a]), int(ids[b])))
        got = analyze_root(inst, k, vertices=False, edges=True).pivotal_edges
        assert got == sorted(expected)


def test_russo_monte_carlo_matches_exact_lattice_derivative(gilbert):
    spec = build_lattice(gilbert, 1, 0)
    lam, k = 1.0, 3
    exact = russo_rhs(spec, lam, k, mode="exact-tiny")
    tiny = TinyInstance.from_lattice(spec)
    fd = (exact_theta(tiny, lam + 1e-4, k) - exact_theta(tiny, lam - 1e-4, k)) / 2e-4
    assert exact == pytest.approx(fd, rel=1e-6)
    mc = russo_rhs(spec, lam, k, samples=3000, seed=4)
    assert abs(mc.mean - exact) < 4 * mc.stderr


def test_pivotal_probability_estimate(gilbert):
    spec = build_lattice(gilbert, 1, 0)
    v = spec.vertex_at([1.0, 0.0], 1.0)
    est = pivotal_probability(spec, 1.0, v, 2, 2000, 3)
    from rcmlab.oracle import enumerate_configs, pivotal_probability_exact
    tiny = TinyInstance.from_lattice(spec)
    exact = math.exp(-1.0) * pivotal_probability_exact(enumerate_configs(tiny, 1.0), v, 2)
    assert abs(est.mean - exact) < 4 * est.stderr + 1e-12
