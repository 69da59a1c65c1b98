"""Acceptance experiments at their stated scale and tolerance.

Each criterion prints one ``criterion N: PASS/FAIL (...)`` line and the
terminal summary repeats them.  Experiments run through the command line on
the shipped configs, so every result here can be reproduced with
``rcmlab <command> --config <file>``; outputs go to a temporary directory
unless ``RCMLAB_ACCEPTANCE_OUT`` names one.

Criteria that cannot be met at the stated scale are asserted as stated and
marked as expected failures; the analysis lives in the decisions ledger.
"""

import csv
import json
import math
import os
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from rcmlab.cli import run_cli
from rcmlab.oracle import TinyInstance, enumerate_configs, exact_derivative, exact_statistic, russo_sum
from rcmlab.osss import UNIFORM, exact_revealments

pytestmark = pytest.mark.acceptance

CONFIGS = resources.files("rcmlab") / "data" / "configs"

# name -> (command, config file)
EXPERIMENTS = {
    "identity": ("osss-verify", "identity.yaml"),
    "inequalities": ("osss-verify", "osss_inequalities.yaml"),
    "tail": ("fit", "subcritical_tail.yaml"),
    "scan": ("scan", "critical_scan.yaml"),
    "chi": ("chi", "gw_chi.yaml"),
    "convergence": ("converge", "convergence.yaml"),
    "edge_influence": ("converge", "edge_influence.yaml"),
    "ratios": ("diagnose-ratios", "ratios.yaml"),
    "domination": ("dominate", "domination.yaml"),
}

ACCEPTANCE_SEED = 20240611


@dataclass
class Result:
    code: int
    out: Path
    manifest: dict
    elapsed: float

    def csv(self, name):
        with open(self.out / name, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))

    def timing(self, phase=None):
        if phase is None:
            return float(self.manifest["wall_time"])
        return float(self.manifest["timings"][phase])


class Runner:
    def __init__(self, root: Path):
        self.root = root
        self.results = {}

    def __call__(self, name) -> Result:
        if name not in self.results:
            command, config = EXPERIMENTS[name]
            out = self.root / name
            with resources.as_file(CONFIGS / config) as path:
                t0 = time.perf_counter()
                code = run_cli([command, "--config", str(path), "--out", str(out)])
                elapsed = time.perf_counter() - t0
            manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
            self.results[name] = Result(code, out, manifest, elapsed)
        return self.results[name]


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    root = os.environ.get("RCMLAB_ACCEPTANCE_OUT")
    root = Path(root) if root else tmp_path_factory.mktemp("acceptance")
    return Runner(root)


def _random_tinies(count, seed=ACCEPTANCE_SEED, ghost=False):
    """Random tiny instances within the 24-coordinate cap (ghost copies count when ``ghost``)."""
    gen = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        # with ghost copies, exact forest revealments cost about 20x per extra site
        n = int(gen.integers(3, 6 if ghost else 7))
        tiny = TinyInstance.random(gen, n, density=0.8)
        coords = (2 * n if ghost else n) + sum(0 < p < 1 for p in tiny.phi.values())
        if coords <= 24:
            out.append(tiny)
    return out


# ---------------------------------------------------------------------------


def test_criterion_01_russo_identity():
    t0 = time.perf_counter()
    worst = 0.0
    # (instance, k) pairs where no cluster of size k can form: theta is
    # identically zero, so only an absolute comparison makes sense
    flat, flat_err = 0, 0.0
    tinies = _random_tinies(24)
    for i, tiny in enumerate(tinies):
        lam = 0.5 + 0.1 * (i % 10)
        for k in range(2, tiny.n_sites + 1):
            cov = russo_sum(tiny, lam, k)
            fd = exact_derivative(tiny, lam, k, step=1e-4)
            if fd == 0.0:
                flat += 1
                flat_err = max(flat_err, abs(cov))
            else:
                worst = max(worst, abs(cov - fd) / abs(fd))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and flat_err <= 1e-12 and elapsed < 120 and len(tinies) >= 20
    record(1, ok, f"{len(tinies)} instances, max rel err {worst:.2e} "
                  f"({flat} constant-zero cases, max |cov| {flat_err:.1e}), {elapsed:.1f}s")
    assert worst <= 1e-6
    assert flat_err <= 1e-12
    assert elapsed < 120


def _exact_identity_gap():
    worst = 0.0
    for tiny in _random_tinies(20, ghost=True):
        dist = enumerate_configs(tiny, 0.9, 0.4)
        delta, _ = exact_revealments(dist, UNIFORM)
        for u in range(tiny.n_sites):
            mag = exact_statistic(dist, "magnetization", u=u)
            worst = max(worst, abs(delta[dist.coord_index("site", u)] - mag))
    return worst


@pytest.mark.xfail(strict=True, raises=AssertionError, reason="per-vertex 3 sigma test over 578 vertex/gamma pairs; "
                   "two vertices exceed 3 sigma at the acceptance seed (see ledger)")
def test_criterion_02_magnetization_identity(experiment):
    t0 = time.perf_counter()
    exact_gap = _exact_identity_gap()
    t_exact = time.perf_counter() - t0
    res = experiment("identity")
    rows = res.csv("identity.csv")
    z = np.array([float(r["z"]) for r in rows])
    over = int(np.sum(np.abs(z) > 3))
    t = t_exact + res.timing("identity")
    ok = exact_gap <= 1e-12 and over == 0 and t < 300
    record(2, ok, f"exact gap {exact_gap:.1e}; Monte Carlo max |z| {np.max(np.abs(z)):.2f}, "
                  f"{over} of {z.size} beyond 3 sigma, {t:.0f}s")
    assert exact_gap <= 1e-12
    assert over == 0
    assert t < 300


def test_criterion_03_influence_inequalities(experiment):
    res = experiment("inequalities")
    exact = res.csv("slack.csv")
    worst_exact = min(float(r["slack"]) for r in exact)
    mc = res.csv("monte_carlo.csv")
    worst_z = min(float(r["slack"]) / float(r["sigma"]) for r in mc)
    t = res.timing()
    ok = worst_exact >= -1e-12 and worst_z >= -4 and t < 600 and res.code == 0
    record(3, ok, f"{len(exact)} exact checks, min slack {worst_exact:.3g}; "
                  f"Monte Carlo min slack/sigma {worst_z:.1f}, {t:.0f}s")
    assert worst_exact >= -1e-12
    assert worst_z >= -4
    assert t < 600
    assert res.code == 0


@pytest.mark.xfail(strict=True, raises=AssertionError, reason="theta(k) is below 1e-5 for k >= 15 at lam = 0.2, so "
                   "10^5 replicas see no cluster in most of the window (see ledger)")
def test_criterion_04_subcritical_decay(experiment):
    res = experiment("tail")
    t = res.timing()
    if res.code == 0:
        fit = res.csv("results.csv")[0]
        slope, r2 = float(fit["slope"]), float(fit["r2"])
        detail = f"slope {slope:.3f}, r2 {r2:.3f}"
    else:
        slope, r2 = math.nan, math.nan
        failure = json.loads((res.out / "failure.json").read_text(encoding="utf-8"))
        detail = failure["detail"].get("message", failure["check"])
    record(4, slope < 0 and r2 >= 0.98 and t < 600, f"{detail}, {t:.0f}s")
    assert res.code == 0
    assert slope < 0 and r2 >= 0.98
    assert t < 600


def test_criterion_05_branching_bounds(experiment):
    scan = experiment("scan")
    row = scan.csv("results.csv")[0]
    lam_hat, sigma = float(row["lambda_hat"]), float(row["sigma"])
    floor = 1.0 / math.pi
    chi = experiment("chi").csv("results.csv")[0]
    chi_hat, chi_se = float(chi["chi"]), float(chi["stderr"])
    bound = 1.0 / (1.0 - 0.2 * math.pi)
    t = scan.timing("locate_critical") + experiment("chi").timing()
    ok = lam_hat >= floor - 3 * sigma and chi_hat <= bound + 3 * chi_se and t < 900
    record(5, ok, f"lambda_hat {lam_hat:.4f} (sigma {sigma:.4f}) vs 1/pi {floor:.4f}; "
                  f"chi {chi_hat:.4f} +- {chi_se:.4f} vs {bound:.4f}; {t:.0f}s")
    assert lam_hat >= floor - 3 * sigma
    assert chi_hat <= bound + 3 * chi_se
    assert t < 900


def test_criterion_06_supercritical_reach(experiment):
    scan = experiment("scan")
    summary = scan.csv("supercritical_summary.csv")[0]
    lam_hat, lam_check = float(summary["lambda_hat"]), float(summary["lam_check"])
    rows = scan.csv("supercritical.csv")
    check = {float(r["L"]): float(r["reach"]) for r in rows if float(r["lam"]) == lam_check}
    fit = scan.csv("supercritical_fit.csv")
    lams = [float(r["lam"]) for r in fit]
    slope = float(summary["slope"])
    t = scan.timing("supercritical_profile")
    residuals = ", ".join(f"{float(r['residual']):+.4f}" for r in fit)
    ok = (set(check) == {10.0, 20.0, 40.0} and min(check.values()) >= 0.5 and slope > 0
          and abs(lam_check - 1.5 * lam_hat) < 1e-12 and t < 1200)
    record(6, ok, f"reach at {lam_check:.3f}: "
                  + ", ".join(f"L={L:g} {p:.4f}" for L, p in sorted(check.items()))
                  + f"; slope {slope:.4f} on [{lams[0]:.3f}, {lams[-1]:.3f}], "
                  f"curvature {float(summary['curvature']):.3f}, residuals {residuals}; {t:.0f}s")
    assert set(check) == {10.0, 20.0, 40.0}
    assert min(check.values()) >= 0.5
    assert lams[0] == pytest.approx(lam_hat) and lams[-1] == pytest.approx(1.3 * lam_hat)
    assert slope > 0
    assert t < 1200


def test_criterion_07_discretization_convergence(experiment):
    res = experiment("convergence")
    rows = res.csv("results.csv")
    gap = np.array([float(r["gap"]) for r in rows])
    se = np.array([float(r["gap_se"]) for r in rows])
    pooled = 1.96 * np.sqrt(se[:-1] ** 2 + se[1:] ** 2)
    steps_ok = bool(np.all(gap[1:] <= gap[:-1] + pooled))
    mismatches = sum(int(r["mismatches"]) for r in rows)
    distinct = sum(int(r["distinct_replicas"]) for r in rows)
    t = res.timing()
    ok = steps_ok and mismatches == 0 and [int(r["n"]) for r in rows] == [0, 1, 2, 3, 4] and t < 600
    record(7, ok, "gaps " + ", ".join(f"{g:.4f}" for g in gap)
           + f"; {mismatches} mismatches over {distinct} distinct-cell replicas; {t:.0f}s")
    assert [int(r["n"]) for r in rows] == [0, 1, 2, 3, 4]
    assert steps_ok
    assert mismatches == 0 and distinct > 0
    assert t < 600


def test_criterion_08_edge_influence_sum(experiment):
    res = experiment("edge_influence")
    rows = res.csv("results.csv")
    n = np.array([int(r["n"]) for r in rows])
    value = np.array([float(r["influence_sum"]) for r in rows])
    decreasing = bool(np.all(np.diff(value) < 0))
    x = np.log(2.0 ** (-2 * n))
    slope = float(np.polyfit(x, np.log(value), 1)[0])
    t = res.timing()
    ok = list(n) == [0, 1, 2, 3] and decreasing and slope > 0 and t < 600
    record(8, ok, "I = " + ", ".join(f"{v:.4g}" for v in value)
           + f"; log-log slope {slope:.3f}; {t:.0f}s")
    assert list(n) == [0, 1, 2, 3]
    assert decreasing
    assert slope > 0
    assert t < 600


def test_criterion_09_min_reach_ratios(experiment):
    res = experiment("ratios")
    rows = res.csv("results.csv")
    ms = [float(r["m"]) for r in rows]
    low = [float(r["m"]) for r in rows
           if float(r["delta_ratio"]) < 1 - 3 * float(r["delta_se"])
           or float(r["pivotal_ratio"]) < 1 - 3 * float(r["pivotal_se"])]
    fits = json.loads((res.out / "fit.json").read_text(encoding="utf-8"))
    slopes = {k: float(v["C_hat"]) for k, v in fits.items()}
    t = res.timing()
    ok = ms == [1.0, 2.0, 4.0, 8.0] and not low and min(slopes.values()) >= 0 and t < 900
    record(9, ok, "delta ratios " + ", ".join(f"{float(r['delta_ratio']):.3f}" for r in rows)
           + "; pivotal ratios " + ", ".join(f"{float(r['pivotal_ratio']):.3f}" for r in rows)
           + "; slopes " + ", ".join(f"{k} {v:.2e}" for k, v in sorted(slopes.items()))
           + f"; {t:.0f}s")
    assert ms == [1.0, 2.0, 4.0, 8.0]
    assert not low
    assert min(slopes.values()) >= 0
    assert t < 900


def test_criterion_10_domination(experiment):
    res = experiment("domination")
    row = res.csv("results.csv")[0]
    reps = int(row["replicas"])
    ev, sv = int(row["edge_violations"]), int(row["size_violations"])
    t = res.timing()
    ok = reps >= 10 ** 4 and ev == 0 and sv == 0 and t < 300
    record(10, ok, f"{reps} replicas, {ev} edge and {sv} cluster violations; {t:.0f}s")
    assert reps >= 10 ** 4
    assert ev == 0 and sv == 0
    assert t < 300


def test_criterion_11_rerun_reproduces_csv(experiment):
    differing = []
    compared = 0
    for name in EXPERIMENTS:
        first = experiment(name)
        again = first.out.parent / f"{name}_rerun"
        code = run_cli(["rerun", str(first.out / "manifest.json"), "--out", str(again)])
        assert code == first.code
        for out in sorted(first.out.glob("*.csv")):
            compared += 1
            if out.read_bytes() != (again / out.name).read_bytes():
                differing.append(f"{name}/{out.name}")
    record(11, not differing, f"{compared} CSV files compared, {len(differing)} differ")
    assert not differing
