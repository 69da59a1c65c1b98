import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcmlab.oracle import (EnumerationError, TinyInstance, density_derivative, enumerate_configs,
                           exact_derivative, exact_statistic, exact_theta, pivotal_sum, russo_sum)


def naive(tiny, lam, fn, gamma=None):
    """Sum ``P(omega) fn(sizes, green)`` over all configurations, in plain python."""
    n = tiny.n_sites
    edges = list(itertools.combinations(range(n), 2))
    ps = [1 - math.exp(-lam * w) for w in tiny.masses]
    pe = [tiny.phi.get(e, 0.0) for e in edges]
    h = 0.0 if gamma is None else 1 - math.exp(-gamma)
    ncopy = n if gamma is not None else 0
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n + len(edges) + ncopy):
        s, e, c = bits[:n], bits[n:n + len(edges)], bits[n + len(edges):]
        prob = 1.0
        for b, p in zip(s, ps):
            prob *= p if b else 1 - p
        for b, p in zip(e, pe):
            prob *= p if b else 1 - p
        for b in c:
            prob *= h if b else 1 - h
        if prob == 0.0:
            continue

        def cluster(u):
            seen, stack = {u}, [u]
            while stack:
                v = stack.pop()
                for (a, b), on in zip(edges, e):
                    if on and v in (a, b):
                        w = b if v == a else a
                        if w not in seen and s[w]:
                            seen.add(w)
                            stack.append(w)
            return seen

        total += prob * fn(cluster, s, c)
    return total


def random_tiny(seed, n):
    return TinyInstance.random(np.random.default_rng(seed), n, density=0.8)


def test_two_site_hand_values():
    tiny = TinyInstance.two_site(1.0, 0.5)
    dist = enumerate_configs(tiny, 1.0, 0.5)
    p = 1 - math.exp(-1.0)
    assert exact_statistic(dist, "theta", k=2) == pytest.approx(0.5 * p, abs=1e-14)
    assert exact_statistic(dist, "theta", k=2) == pytest.approx(0.31606027941, abs=1e-11)
    assert russo_sum(tiny, 1.0, 2) == pytest.approx(0.5 * math.exp(-1.0), abs=1e-14)
    mag = 1 - ((1 - 0.5 * p) * math.exp(-0.5) + 0.5 * p * math.exp(-1.0))
    assert exact_statistic(dist, "magnetization") == pytest.approx(mag, abs=1e-14)


def test_path_hand_values():
    tiny = TinyInstance.path(3, 1.0, 0.5)
    p = 1 - math.exp(-2.0)
    assert exact_theta(tiny, 2.0, 3) == pytest.approx(0.25 * p * p, abs=1e-14)
    assert exact_theta(tiny, 2.0, 1) == 1.0


@pytest.mark.parametrize("seed", range(6))
def test_matches_naive_enumeration(seed):
    tiny = random_tiny(seed, 4)
    lam, gamma = 0.9, 0.4
    dist = enumerate_configs(tiny, lam, gamma)
    for k in (1, 2, 3, 4):
        ref = naive(tiny, lam, lambda cl, s, c: len(cl(0)) >= k)
        assert exact_statistic(enumerate_configs(tiny, lam), "theta", k=k) == pytest.approx(ref, abs=1e-13)
    for u in range(tiny.n_sites):
        ref = naive(tiny, lam, lambda cl, s, c: 1 - math.exp(-gamma * len(cl(u))))
        assert exact_statistic(dist, "magnetization", u=u) == pytest.approx(ref, abs=1e-13)
    ef = naive(tiny, lam, lambda cl, s, c: len(cl(0)) >= 2, gamma)
    eg = naive(tiny, lam, lambda cl, s, c: any(c[v] for v in cl(0)), gamma)
    efg = naive(tiny, lam, lambda cl, s, c: len(cl(0)) >= 2 and any(c[v] for v in cl(0)), gamma)
    assert exact_statistic(dist, "cov", k=2) == pytest.approx(efg - ef * eg, abs=1e-13)


def test_influence_matches_resampling_definition():
    tiny = random_tiny(11, 4)
    lam, k = 1.2, 3
    dist = enumerate_configs(tiny, lam)
    for c, (kind, idx, p) in enumerate(dist.coords):
        if not 0 < p < 1:
            continue
        # P(f(omega) != f(omega')) with coordinate c resampled independently
        def flip(value):
            t = TinyInstance(tiny.masses, tiny.phi, tiny.root)
            if kind == "site":
                m = list(t.masses)
                m[idx] = 1e6 if value else 0.0
                t = TinyInstance(tuple(m), t.phi, t.root)
            else:
                ph = dict(t.phi)
                ph[idx] = 1.0 if value else 0.0
                t = TinyInstance(t.masses, ph, t.root)
            return t
        on = exact_theta(flip(True), lam, k)
        off = exact_theta(flip(False), lam, k)
        # f increasing, so P(f1 != f0) = P(f1) - P(f0)
        ref = 2 * p * (1 - p) * (on - off)
        assert exact_statistic(dist, "influence", k=k, coord=c) == pytest.approx(ref, abs=1e-12)


@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 5), lam=st.floats(0.2, 3.0),
       k=st.integers(1, 5))
@settings(max_examples=30, deadline=None)
def test_four_derivative_routes_agree(seed, n, lam, k):
    tiny = random_tiny(seed, n)
    a = russo_sum(tiny, lam, k)
    b = density_derivative(tiny, lam, k)
    c = pivotal_sum(tiny, lam, k)
    d = exact_derivative(tiny, lam, k, step=1e-4)
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(c, abs=1e-12)
    assert a == pytest.approx(d, rel=1e-6, abs=1e-9)


@given(seed=st.integers(0, 10 ** 6), lam=st.floats(0.1, 2.0))
@settings(max_examples=20, deadline=None)
def test_theta_monotone(seed, lam):
    tiny = random_tiny(seed, 4)
    th = [exact_theta(tiny, lam, k) for k in range(1, 6)]
    assert th[0] == pytest.approx(1.0, abs=1e-14) and th[-1] == 0.0
    assert all(x >= y - 1e-15 for x, y in zip(th, th[1:]))
    assert exact_theta(tiny, lam * 1.5, 3) >= th[2] - 1e-15


def test_enumeration_cap():
    tiny = TinyInstance((1.0,) * 8, {e: 0.5 for e in itertools.combinations(range(8), 2)})
    with pytest.raises(EnumerationError):
        enumerate_configs(tiny, 1.0, 0.5)


def test_step_bounds():
    with pytest.raises(ValueError):
        exact_derivative(TinyInstance.two_site(), 1.0, 2, step=1e-2)


def test_round_trip():
    tiny = random_tiny(3, 5)
    back = TinyInstance.from_dict(tiny.to_dict())
    assert back.masses == tiny.masses and back.phi == tiny.phi
