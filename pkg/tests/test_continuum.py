import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rcmlab.continuum import (all_clusters, augment, boundary_margin, cluster_labels,
                              cluster_of_origin, neighbors, sample_ppp, with_origin)


def test_point_count_is_poisson(gilbert):
    model = gilbert.with_(intensity=2.0, box=2.0)
    counts = np.array([sample_ppp(model, 3, r).size for r in range(400)])
    mean = 2.0 * 4.0 ** 2
    assert abs(counts.mean() - mean) < 4 * np.sqrt(mean / counts.size)
    assert abs(counts.var(ddof=1) / mean - 1) < 0.25


def test_positions_uniform_in_box(gilbert):
    cfg = sample_ppp(gilbert.with_(intensity=20.0), 1)
    assert np.all(np.abs(cfg.positions) <= gilbert.box)
    assert stats.kstest((cfg.positions[:, 0] + 3) / 6, "uniform").pvalue > 1e-3


def test_weights_follow_the_law(min_reach):
    cfg = sample_ppp(min_reach.with_(intensity=50.0), 2)
    w = min_reach.weights
    assert stats.kstest(cfg.weights, w.cdf).pvalue > 1e-3


def test_same_address_same_configuration(min_reach):
    a = sample_ppp(min_reach, 10, 4)
    b = sample_ppp(min_reach, 10, 4)
    c = sample_ppp(min_reach, 10, 5)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


@given(l1=st.floats(0.05, 2.0), l2=st.floats(0.05, 2.0), replica=st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_intensity_coupling_only_adds_points_and_grows_clusters(l1, l2, replica):
    from rcmlab.model import AdjacencySpec, ModelSpec
    model = ModelSpec(AdjacencySpec("gilbert", 2, {"radius": 1.0}), intensity=2.0, box=3.0)
    lo, hi = sorted((l1, l2))
    top = with_origin(model, 1, replica)
    small, big = top.thin(lo), top.thin(hi)
    assert set(small.keys.tolist()) <= set(big.keys.tolist())
    low = with_origin(model.with_(intensity=lo), 1, replica)
    np.testing.assert_array_equal(np.sort(low.keys), np.sort(small.keys))
    c_small = set(small.keys[cluster_of_origin(small).members].tolist())
    c_big = set(big.keys[cluster_of_origin(big).members].tolist())
    assert c_small <= c_big


def test_restrict_keeps_augmented_points(gilbert):
    cfg = with_origin(gilbert.with_(intensity=3.0), 4)
    small = cfg.restrict(1.0)
    assert np.all(np.abs(small.positions) <= 1.0)
    assert small.augmented.sum() == 1
    assert small.size == int(np.sum(np.all(np.abs(cfg.positions) <= 1.0, axis=1)))


def test_augment_does_not_disturb_existing_edges(smooth):
    cfg = sample_ppp(smooth, 6)
    I, J = cfg.graph().open_edges()
    aug = augment(cfg, [(np.zeros(2), 1.0), (np.array([1.0, 1.0]), 1.0)])
    I2, J2 = aug.graph().open_edges()
    old = {(a, b) for a, b in zip(I.tolist(), J.tolist())}
    new = {(a, b) for a, b in zip(I2.tolist(), J2.tolist()) if b < cfg.size}
    assert old == new
    one_by_one = augment(augment(cfg, [(np.zeros(2), 1.0)]), [(np.array([1.0, 1.0]), 1.0)])
    np.testing.assert_array_equal(one_by_one.keys, aug.keys)


def test_augment_rejects_bad_points(gilbert):
    cfg = sample_ppp(gilbert, 1)
    with pytest.raises(ValueError):
        augment(cfg, [(np.zeros(2), 0.5)])
    with pytest.raises(ValueError):
        augment(cfg, [(np.array([10.0, 0.0]), 1.0)])
    with pytest.raises(ValueError):
        augment(cfg, [(np.zeros(2), 1.0), (np.zeros(2), 1.0)])


def test_clusters_partition_and_neighbors_agree(smooth):
    cfg = sample_ppp(smooth.with_(intensity=1.5), 8)
    clusters = all_clusters(cfg)
    members = np.concatenate([c.members for c in clusters])
    np.testing.assert_array_equal(np.sort(members), np.arange(cfg.size))
    labels = cluster_labels(cfg)
    for i in range(0, cfg.size, 7):
        for j in neighbors(cfg, i):
            assert labels[i] == labels[j]


def test_boundary_margin(gilbert, smooth):
    assert boundary_margin(gilbert) == 1.0
    assert boundary_margin(smooth) == pytest.approx(np.log(2) ** (-1 / 3), rel=1e-9)


def test_empty_intensity(gilbert):
    cfg = with_origin(gilbert.with_(intensity=0.0), 1)
    assert cfg.size == 1 and cluster_of_origin(cfg).size == 1
