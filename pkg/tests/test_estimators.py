import math

import numpy as np
import pytest

from rcmlab.continuum import boundary_margin, with_origin
from rcmlab.estimators import (BracketError, FitError, PreconditionError, TailCurve, _crossing,
                               _reach_one, convergence_study, differential_inequality,
                               domination_check, estimate_chi, estimate_tail, fit_exponential_rate,
                               locate_critical, ratio_diagnostics, reach_matrix, reaches_boundary,
                               supercritical_profile)
from rcmlab.model import gw_bounds


def test_tail_curve_from_sizes():
    sizes = np.array([1, 1, 2, 3, 5])
    c = TailCurve.from_sizes(sizes, 4, 0.5, 3.0)
    assert c.theta.tolist() == [1.0, 0.6, 0.4, 0.2]
    # unbiased binomial variance over m = 5
    assert c.stderr[1] == pytest.approx(math.sqrt(0.6 * 0.4 * 5 / 4 / 5))
    assert c.stderr[0] == 0.0
    assert c.is_monotone()
    assert c.to_csv().splitlines()[0] == "k,theta,stderr,samples"


def test_estimate_tail_non_increasing_and_deterministic(gilbert):
    a = estimate_tail(gilbert, 0.5, 3.0, 10, 300, seed=3)
    b = estimate_tail(gilbert, 0.5, 3.0, 10, 300, seed=3)
    assert a.theta[0] == 1.0
    assert np.all(np.diff(a.theta) <= 0)
    assert np.array_equal(a.theta, b.theta)


def test_estimate_tail_monotone_in_intensity(gilbert):
    lo = estimate_tail(gilbert, 0.3, 3.0, 8, 200, seed=4)
    hi = estimate_tail(gilbert, 0.6, 3.0, 8, 200, seed=4)
    # coupled replicas: sizes grow pointwise with the intensity
    assert np.all(hi.sizes >= lo.sizes)


def test_fit_exponential_rate_recovers_slope():
    k = np.arange(1, 21)
    theta = 0.8 * np.exp(-0.3 * k)
    c = TailCurve(k, theta, 0.01 * theta, 0.1, 5.0, samples=1000)
    fit = fit_exponential_rate(c, window=(3, 18))
    assert fit.slope == pytest.approx(-0.3, abs=1e-10)
    assert fit.intercept == pytest.approx(math.log(0.8), abs=1e-10)
    assert fit.r2 == pytest.approx(1.0)


def test_fit_exponential_rate_rejects_zeros_and_noise():
    k = np.arange(1, 11)
    theta = np.exp(-k.astype(float))
    theta[-1] = 0.0
    with pytest.raises(FitError, match="zero"):
        fit_exponential_rate(TailCurve(k, theta, 0.01 * theta, 0.1, 5.0), window=(1, 10))
    theta = np.exp(-k.astype(float))
    with pytest.raises(FitError, match="relative standard error"):
        fit_exponential_rate(TailCurve(k, theta, 0.5 * theta, 0.1, 5.0), window=(1, 10))
    with pytest.raises(FitError, match="fewer than two"):
        fit_exponential_rate(TailCurve(k, theta, 0.01 * theta, 0.1, 5.0), window=(4, 4))


def test_estimate_chi_mean_and_cap_warning(gilbert):
    res = estimate_chi(gilbert, 0.3, 3.0, 400, seed=2)
    assert res.estimate.mean == pytest.approx(res.sizes.mean())
    assert res.cap_fraction == 0.0
    with pytest.warns(RuntimeWarning, match="size cap"):
        capped = estimate_chi(gilbert, 3.0, 3.0, 20, seed=2, size_cap=2)
    assert capped.cap_fraction > 0.1


def test_chi_below_branching_bound(gilbert):
    bound = gw_bounds(gilbert.adjacency, gilbert.weights, 0.2)["chi_upper"]
    res = estimate_chi(gilbert, 0.2, 3.0, 2000, seed=9)
    assert res.estimate.mean <= bound + 3 * res.estimate.stderr


def test_crossing_interpolates_sign_change():
    # three boxes: ratios P1/P0 = 0.5 and P2/P1 = 0.4 then 0.6, so D goes -0.1 -> 0.1
    P = np.array([[1.0, 0.5, 0.2], [1.0, 0.5, 0.3]])
    assert _crossing(np.array([1.0, 2.0]), P) == pytest.approx(1.5)


def test_crossing_is_strict():
    # D = -0.1, 0, 0.1: touching zero is not a crossing
    P = np.array([[1.0, 0.5, 0.2], [1.0, 0.5, 0.25], [1.0, 0.5, 0.3]])
    assert math.isnan(_crossing(np.array([1.0, 2.0, 3.0]), P))


@pytest.mark.parametrize("replica", range(16))
def test_reach_fast_path_matches_bfs(gilbert, replica):
    # enough intensities that the bisection over lam takes several steps
    lams = np.array([0.4, 0.6, 0.8, 1.0, 1.2, 1.5, 2.0])
    Ls = np.array([1.5, 2.5, 3.5])
    margin = boundary_margin(gilbert)
    fast = _reach_one(gilbert, lams, Ls, 8, margin, replica)
    top = with_origin(gilbert, 8, replica, intensity=2.0, box=3.5)
    for a, lam in enumerate(lams):
        cfg = top.thin(lam)
        for b, L in enumerate(Ls):
            assert fast[a, b] == reaches_boundary(cfg, L, margin)


def test_reach_matrix_monotone(gilbert):
    R = reach_matrix(gilbert, [0.5, 1.0, 2.0], [1.5, 2.5], 100, seed=1)
    assert R.shape == (100, 3, 2)
    # more intensity never loses reach; a larger box never gains it
    assert np.all(R[:, 1:, :] >= R[:, :-1, :])
    assert np.all(R[:, :, 1:] <= R[:, :, :-1])


def test_locate_critical_small_grid(gilbert):
    floor = gw_bounds(gilbert.adjacency, gilbert.weights, 1.0)["lambda_T_lower"]
    lams = [0.2, 0.8, 1.2, 1.5, 1.8, 2.4]
    try:
        est = locate_critical(gilbert, lams, [2.0, 4.0, 6.0], 150, seed=2, resamples=50)
    except BracketError:
        pytest.skip("no crossing at this sample size")
    assert est.dropped == [0.2]
    assert 0.8 <= est.lambda_hat <= 2.4
    assert est.lambda_T_lower == pytest.approx(floor)
    assert est.curves_csv().splitlines()[0] == "lam,L,reach"


def test_locate_critical_needs_three_boxes_and_a_bracket(gilbert):
    with pytest.raises(ValueError):
        locate_critical(gilbert, [1.0, 2.0], [2.0, 4.0], 10)
    with pytest.raises(BracketError):
        locate_critical(gilbert, [0.01, 0.1], [2.0, 4.0, 6.0], 10)


def test_supercritical_profile_shapes(gilbert):
    prof = supercritical_profile(gilbert, 1.5, [1.5, 2.5, 3.5], 60, seed=3, points=4)
    assert prof.lam_check == pytest.approx(2.25)
    assert len(prof.reach_check) == 3
    assert prof.fit_lams[0] == 1.5 and prof.fit_lams[-1] == pytest.approx(1.95)
    fitted = [float(r) for r in (line.split(",")[3] for line in prof.fit_csv().splitlines()[1:])]
    assert len(fitted) == 4
    head = prof.summary_csv().splitlines()[0]
    assert head == "lambda_hat,lam_check,slope,slope_stderr,intercept,r2,curvature"


def test_convergence_small(gilbert):
    tab = convergence_study(gilbert, 0.5, 2, [0, 1, 2], 3, 0.1, 200, seed=5)
    assert [r.n for r in tab.rows] == [0, 1, 2]
    assert all(r.mismatches == 0 for r in tab.rows)
    assert tab.rows[-1].distinct >= tab.rows[0].distinct
    assert all(0.0 <= r.gap <= 1.0 for r in tab.rows)
    assert tab.to_csv().splitlines()[0].startswith("n,theta_n")


def test_ratio_diagnostics_small(min_reach):
    tab = ratio_diagnostics(min_reach, 0.5, 0.1, [1, 2], 3, 60, seed=1, L=1, n=1, resamples=40)
    base = tab.rows[0]
    assert base.delta_ratio == 1.0 and base.pivotal_ratio == 1.0
    assert tab.rows[1].delta_ratio >= 1.0
    with pytest.raises(PreconditionError, match="bin"):
        ratio_diagnostics(min_reach, 0.5, 0.1, [1, 2.3], 3, 5, L=1, n=1)
    with pytest.raises(PreconditionError, match="contain 1"):
        ratio_diagnostics(min_reach, 0.5, 0.1, [2, 4], 3, 5, L=1, n=1)


def test_ratio_diagnostics_needs_reach(gilbert):
    with pytest.raises(PreconditionError, match="reach"):
        ratio_diagnostics(gilbert, 0.5, 0.1, [1], 3, 5, L=1, n=0)


def test_differential_inequality_reports_constant(gilbert):
    res = differential_inequality(gilbert, [0.3, 0.5, 0.7], 3.0, 3, 200, seed=1)
    assert len(res["rows"]) == 3
    assert res["csv"].splitlines()[0] == "lam,theta,chi,dtheta,lhs"
    theta = [row[1] for row in res["rows"]]
    # coupled replicas: theta(k) is non-decreasing in the intensity
    assert theta == sorted(theta)
    assert math.isnan(res["constant"]) or math.isfinite(res["constant"])


def test_domination_holds_and_count_matches(min_reach):
    eps = 1.0 - math.exp(-4.0)
    rep = domination_check(min_reach, (2.0, 4.0), eps, 1.0, 1.0, 200, seed=6, box=4.0)
    assert rep.edge_violations == 0
    assert rep.size_violations == 0
    assert abs(rep.count_z) < 4.5


def test_domination_preconditions(min_reach):
    with pytest.raises(PreconditionError, match="eps"):
        domination_check(min_reach, (2.0, 4.0), 0.999, 1.0, 1.0, 5)
    with pytest.raises(PreconditionError, match="interval"):
        domination_check(min_reach, (0.5, 4.0), 0.5, 1.0, 1.0, 5)
