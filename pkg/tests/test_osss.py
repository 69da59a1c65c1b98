import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcmlab.lattice import build_lattice, sample_instance
from rcmlab.oracle import TinyInstance, enumerate_configs, exact_statistic
from rcmlab.osss import (FORMAL, UNIFORM, ArrayOracle, GhostField, check_trace,
                         exact_revealments, forest_for_lattice, identity_check, osss_check,
                         edge_influence_sum, vertex_edge_exact, revealment, summary_for)


def random_tiny(seed, n):
    return TinyInstance.random(np.random.default_rng(seed), n, density=0.8)


@pytest.mark.parametrize("mode", [FORMAL, UNIFORM])
@pytest.mark.parametrize("seed", range(4))
def test_path_and_configuration_revealments_agree(seed, mode):
    dist = enumerate_configs(random_tiny(seed, 4), 0.8, 0.5)
    d1, g1 = exact_revealments(dist, mode, "paths")
    d2, g2 = exact_revealments(dist, mode, "configs")
    np.testing.assert_allclose(d1, d2, atol=1e-13)
    assert g1 == pytest.approx(g2, abs=1e-13)


@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 5), lam=st.floats(0.2, 2.5),
       gamma=st.floats(0.05, 2.0))
@settings(max_examples=25, deadline=None)
def test_vertex_revealment_equals_magnetization(seed, n, lam, gamma):
    tiny = random_tiny(seed, n)
    dist = enumerate_configs(tiny, lam, gamma)
    delta, eg = exact_revealments(dist, UNIFORM)
    for u in range(n):
        mag = exact_statistic(dist, "magnetization", u=u)
        assert delta[dist.coord_index("site", u)] == pytest.approx(mag, abs=1e-12)
        assert delta[dist.coord_index("copy", u)] == pytest.approx(1.0, abs=1e-12)
    # E[g] is the root magnetization whatever the root tree does
    _, eg_formal = exact_revealments(dist, FORMAL)
    root_mag = exact_statistic(dist, "magnetization", u=tiny.root)
    assert eg == pytest.approx(root_mag, abs=1e-12)
    assert eg_formal == pytest.approx(root_mag, abs=1e-12)


@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 4), lam=st.floats(0.2, 2.5),
       gamma=st.floats(0.05, 2.0), k=st.integers(1, 4), mode=st.sampled_from([FORMAL, UNIFORM]))
@settings(max_examples=25, deadline=None)
def test_influence_inequalities_have_non_negative_slack(seed, n, lam, gamma, k, mode):
    tiny = random_tiny(seed, n)
    assert osss_check(tiny, lam, gamma, k, mode).slack >= -1e-12
    assert vertex_edge_exact(tiny, lam, k, gamma, mode).slack >= -1e-12


def test_osss_report_table_and_json():
    rep = osss_check(TinyInstance.path(3), 1.0, 0.5, 2)
    assert rep.holds()
    assert rep.table_csv().startswith("coordinate,kind,delta,influence")
    assert '"slack"' in rep.to_json()


def test_unknown_root_mode():
    with pytest.raises(ValueError):
        osss_check(TinyInstance.two_site(), 1.0, 0.5, 2, "sideways")


@pytest.fixture(scope="module")
def small_spec():
    from rcmlab.model import AdjacencySpec, ModelSpec
    model = ModelSpec(AdjacencySpec("exp_power", 2, {"beta": 3.0, "scale": 1.0}),
                      intensity=1.0, box=1.0)
    return build_lattice(model, 1, 1)


@pytest.mark.parametrize("mode", [FORMAL, UNIFORM])
def test_forest_summary_matches_literal_forest(small_spec, mode):
    spec = small_spec
    ids = np.arange(spec.n_vertices)
    for r in range(6):
        inst = sample_instance(spec, 1.2, 9, r)
        ghost = GhostField(0.6, 9, r)
        _, trace = forest_for_lattice(inst, ghost, mode, record=True)
        assert check_trace(trace, ArrayOracle.from_lattice(inst, ghost)) == []
        summ = summary_for(inst, ghost, mode)
        lit_v = np.zeros(spec.n_vertices, bool)
        lit_v[list(trace.revealed_vertices())] = True
        np.testing.assert_array_equal(summ.vertex_revealed(), lit_v)
        lit_e = trace.revealed_edges()
        a, b = np.triu_indices(spec.n_vertices, 1)
        got = summ.edges_revealed(a, b)
        assert {(int(x), int(y)) for x, y in zip(a[got], b[got])} == lit_e


def test_cluster_sizes_match_lattice_clusters(small_spec):
    from rcmlab.lattice import lattice_cluster
    inst = sample_instance(small_spec, 1.5, 2, 0)
    summ = summary_for(inst, GhostField(0.3, 2, 0))
    assert summ.cluster_sizes()[small_spec.root] == lattice_cluster(inst).size


def test_monte_carlo_identity_against_exact_lattice():
    from rcmlab.model import AdjacencySpec, ModelSpec
    model = ModelSpec(AdjacencySpec("gilbert", 2, {"radius": 1.0}), intensity=0.8, box=1.0)
    spec = build_lattice(model, 1, 0)
    lam, gamma = 0.8, 0.4
    tiny = TinyInstance.from_lattice(spec)
    dist = enumerate_configs(tiny, lam, gamma)
    delta, _ = exact_revealments(dist, UNIFORM)
    (chk,) = identity_check(spec, lam, [gamma], 4000, seed=3)
    exact = np.array([delta[dist.coord_index("site", u)] for u in range(spec.n_vertices)])
    se = np.sqrt(exact * (1 - exact) / 4000)
    assert np.all(np.abs(chk.revealment - exact) < 4.5 * se)
    assert np.all(np.abs(chk.z) < 4.5)
    one = revealment(spec, lam, gamma, ("vertex", spec.root), 4000, seed=3)
    assert one.mean == pytest.approx(chk.revealment[spec.root])


# Exact edge influences (k = 3, lam = 1) on the 3 x 3 lattice with
# phi(r) = 1{r <= 1} (1 - exp(-r^-3)), from full enumeration of the 21 site
# and edge coordinates: edges at the centre vertex, and the outer ring.
CENTRE_EDGE_INFLUENCE = 0.08649753481678384
RING_EDGE_INFLUENCE = 0.015267438845503923


def test_edge_influence_sum_against_frozen_influences():
    from rcmlab.model import AdjacencySpec, ModelSpec, Reach, WeightDistribution
    model = ModelSpec(AdjacencySpec("min_reach", 2, {"beta": 3.0}, Reach("linear", 1.0)),
                      WeightDistribution.point(), 1.0, 1.0)
    spec = build_lattice(model, 1, 0)
    lam, gamma, k, samples = 1.0, 0.3, 3, 600
    centre = spec.root
    num, var = 0.0, 0.0
    a, b = np.triu_indices(spec.n_vertices, 1)
    near = np.linalg.norm(spec.positions(a) - spec.positions(b), axis=1) <= 1.0
    edges = list(zip(a[near].tolist(), b[near].tolist()))
    assert len(edges) == 12
    for e in edges:
        inf = CENTRE_EDGE_INFLUENCE if centre in e else RING_EDGE_INFLUENCE
        r = revealment(spec, lam, gamma, ("edge", e), samples, seed=5)
        num += r.mean * inf
        var += (r.stderr * inf) ** 2
    res = edge_influence_sum(spec, lam, gamma, k, samples, seed=1)
    assert abs(res["numerator"] - num) < 4 * math.sqrt(var + res["numerator_stderr"] ** 2)
    assert res["value"] == pytest.approx(res["numerator"] / res["denominator"])
