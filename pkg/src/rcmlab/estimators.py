"""Monte Carlo experiments: tails, susceptibility, boundary reach, critical point,
rate fits, weight-ratio diagnostics, lattice convergence and domination.

Replica ``r`` of every experiment is a pure function of ``(seed, r)``.
Continuum replicas are coupled across intensities (lower intensities are
prefixes of higher ones) and across boxes (smaller boxes are restrictions),
so per-replica observables are monotone in the intensity.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Sequence

import numpy as np

from . import rng
from .continuum import (PointConfiguration, augment, boundary_margin, cluster_of_origin,
                        origin_index, sample_ppp, touches, with_origin)
from .graph import labels_from_edges
from .lattice import (analyze_root, build_lattice, continuum_source_size, coupled_source,
                      distinct_cells, instance_from_points, lattice_cluster, russo_rhs,
                      sample_instance)
from .model import ModelSpec, gw_bounds
from .stats import Estimate, bootstrap, weighted_linear_fit


_THREADS = 1


def set_threads(n: int) -> None:
    """Cap on worker processes for replica loops (1 runs in-process)."""
    global _THREADS
    _THREADS = max(1, int(n))


def map_replicas(fn, replicas: Sequence[int]) -> list:
    """``[fn(r) for r in replicas]``, split over worker processes when allowed.

    Results come back in replica order, so reductions do not depend on the
    worker count.  ``fn`` must be picklable (a module-level function or a
    ``functools.partial`` of one).
    """
    replicas = list(replicas)
    if _THREADS <= 1 or len(replicas) < 64:
        return [fn(r) for r in replicas]
    from concurrent.futures import ProcessPoolExecutor
    chunk = max(1, len(replicas) // (8 * _THREADS))
    with ProcessPoolExecutor(max_workers=_THREADS) as pool:
        return list(pool.map(fn, replicas, chunksize=chunk))


class BracketError(ValueError):
    """The intensity grid does not bracket a crossing."""


class FitError(ValueError):
    """A rate fit was requested on unusable data."""


class PreconditionError(ValueError):
    """Parameters violate a documented precondition."""


# ---------------------------------------------------------------------------
# csv helpers
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """Deterministic text for a CSV cell (``repr`` of floats round-trips exactly)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header))
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# tails and susceptibility
# ---------------------------------------------------------------------------


@dataclass
class TailCurve:
    """``theta(k) = P(|C(origin)| >= k)`` for ``k = 1..k_max`` from one set of replicas."""

    k: np.ndarray
    theta: np.ndarray
    stderr: np.ndarray
    lam: float
    L: float
    tag: str = "continuum"
    n: Optional[int] = None
    samples: int = 0
    seed: int = 0
    sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64), repr=False)
    capped: np.ndarray = field(default_factory=lambda: np.zeros(0, bool), repr=False)

    @classmethod
    def from_sizes(cls, sizes, k_max: int, lam: float, L: float, seed: int = 0,
                   capped=None, tag: str = "continuum", n: Optional[int] = None) -> "TailCurve":
        sizes = np.asarray(sizes, dtype=np.int64)
        k = np.arange(1, k_max + 1)
        ind = sizes[:, None] >= k[None, :]
        theta = ind.mean(axis=0)
        m = sizes.size
        sd = np.sqrt(theta * (1.0 - theta) * m / max(m - 1, 1))
        cap = np.zeros(m, bool) if capped is None else np.asarray(capped, bool)
        return cls(k, theta, sd / math.sqrt(m), float(lam), float(L), tag, n, m, seed, sizes, cap)

    def estimates(self) -> list:
        return [Estimate(float(t), float(s), self.samples, str(self.seed), f"theta({k})")
                for k, t, s in zip(self.k, self.theta, self.stderr)]

    def is_monotone(self, z: float = 3.0) -> bool:
        pooled = np.sqrt(self.stderr[1:] ** 2 + self.stderr[:-1] ** 2)
        return bool(np.all(self.theta[1:] <= self.theta[:-1] + z * pooled))

    def to_csv(self) -> str:
        rows = [(int(k), t, s, self.samples) for k, t, s in zip(self.k, self.theta, self.stderr)]
        return csv_text(["k", "theta", "stderr", "samples"], rows)

    def replicas_csv(self) -> str:
        return csv_text(["replica", "size", "capped"],
                        [(r, int(s), bool(c)) for r, (s, c) in enumerate(zip(self.sizes, self.capped))])


def _origin_size(model, lam, L, seed, size_cap, replica):
    cfg = with_origin(model, seed, replica, intensity=lam, box=L)
    res = cluster_of_origin(cfg, margin=0.0, size_cap=size_cap)
    return res.size, res.capped


def origin_sizes(model: ModelSpec, lam: float, L: float, samples: int, seed: int,
                 size_cap: Optional[int] = None, first: int = 0):
    """Origin cluster sizes of replicas ``first..first+samples-1``; returns ``(sizes, capped)``."""
    fn = partial(_origin_size, model, float(lam), float(L), seed, size_cap)
    res = map_replicas(fn, range(first, first + samples))
    sizes = np.array([r[0] for r in res], dtype=np.int64).reshape(samples)
    capped = np.array([r[1] for r in res], dtype=bool).reshape(samples)
    return sizes, capped


def estimate_tail(model: ModelSpec, lam: float, L: float, k_max: int, samples: int,
                  seed: int = 0) -> TailCurve:
    """Tail curve of the origin cluster in ``[-L, L]^d`` (explorations stop at ``k_max``)."""
    if lam < 0:
        raise ValueError("intensity must be non-negative")
    sizes, capped = origin_sizes(model, lam, L, samples, seed, size_cap=k_max)
    return TailCurve.from_sizes(np.minimum(sizes, k_max), k_max, lam, L, seed, capped)


@dataclass
class ChiResult:
    estimate: Estimate
    cap_fraction: float
    size_cap: int
    sizes: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, np.int64))
    warning: Optional[str] = None


def estimate_chi(model: ModelSpec, lam: float, L: float, samples: int, seed: int = 0,
                 size_cap: int = 10 ** 6) -> ChiResult:
    """Mean origin cluster size; a warning is raised if over 10% of replicas hit the cap."""
    sizes, capped = origin_sizes(model, lam, L, samples, seed, size_cap=size_cap)
    frac = float(capped.mean())
    msg = None
    if frac > 0.1:
        msg = (f"{frac:.1%} of replicas reached the size cap {size_cap}; "
               "the intensity is probably at or above the critical point")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return ChiResult(Estimate.from_samples(sizes, seed, f"chi({lam})"), frac, size_cap, sizes, msg)


# ---------------------------------------------------------------------------
# boundary reach and the critical point
# ---------------------------------------------------------------------------


def reaches_boundary(cfg: PointConfiguration, L: float, margin: float) -> bool:
    """Whether the origin cluster of ``cfg`` restricted to ``[-L, L]^d`` comes within ``margin`` of a face."""
    sub = cfg.restrict(L)
    o = origin_index(sub)
    pos = sub.positions
    if touches(pos[[o]], L, margin):
        return True
    _, _, hit = sub.graph().bfs(o, stop=lambda f: touches(pos[f], L, margin))
    return bool(hit)


def reach_matrix(model: ModelSpec, lams: Sequence[float], Ls: Sequence[float], samples: int,
                 seed: int = 0, margin: Optional[float] = None, first: int = 0) -> np.ndarray:
    """Boolean array ``[replica, lam, L]`` of boundary reach on coupled replicas.

    Each replica is sampled once at the largest intensity and box; smaller
    intensities are thinnings and smaller boxes restrictions of it.
    """
    lams = np.asarray(sorted(lams), dtype=float)
    Ls = np.asarray(sorted(Ls), dtype=float)
    margin = boundary_margin(model) if margin is None else float(margin)
    fn = partial(_reach_one, model, lams, Ls, seed, margin)
    res = map_replicas(fn, range(first, first + samples))
    return np.asarray(res, dtype=bool).reshape(samples, lams.size, Ls.size)


def _reach_one(model, lams, Ls, seed, margin, replica) -> np.ndarray:
    top = with_origin(model, seed, replica, intensity=float(lams[-1]), box=float(Ls[-1]))
    if math.isfinite(model.adjacency.max_range(model.weights.support_max)):
        return _reach_all_edges(top, lams, Ls, margin)
    out = np.zeros((lams.size, Ls.size), bool)
    for a, lam in enumerate(lams):
        cfg = top.thin(lam) if a < lams.size - 1 else top
        for b, L in enumerate(Ls):
            out[a, b] = reaches_boundary(cfg, L, margin)
    return out


def _reach_all_edges(cfg: PointConfiguration, lams, Ls, margin: float) -> np.ndarray:
    """Boundary reach for every ``(lam, L)`` from one pass over the open edges of ``cfg``."""
    g = cfg.graph()
    I, J = g.open_edges()
    o = origin_index(cfg)
    pos = cfg.positions
    extent = np.max(np.abs(pos), axis=1) if cfg.size else np.zeros(0)
    out = np.zeros((len(lams), len(Ls)), bool)

    def reach(a, L):
        keep = (cfg.augmented | (cfg.heights <= lams[a])) & (cfg.augmented | (extent <= L))
        sel = keep[I] & keep[J]
        labels = labels_from_edges(cfg.size, I[sel], J[sel])
        return touches(pos[labels == labels[o]], L, margin)

    # alive sets are nested in lam, so reach is monotone in lam: locate the
    # first reaching intensity (lowest first, then bisection)
    for b, L in enumerate(Ls):
        lo, hi = 0, len(lams)
        if reach(0, L):
            hi = 0
        else:
            lo = 1
        while lo < hi:
            mid = (lo + hi) // 2
            if reach(mid, L):
                hi = mid
            else:
                lo = mid + 1
        out[lo:, b] = True
    return out


def estimate_percolation(model: ModelSpec, lam: float, Ls: Sequence[float], samples: int,
                         seed: int = 0, margin: Optional[float] = None) -> list:
    """Boundary-reach probability of the origin cluster for each box half-width."""
    if list(Ls) != sorted(Ls):
        raise ValueError("box sizes must be increasing")
    m = reach_matrix(model, [lam], Ls, samples, seed, margin)
    return [Estimate.from_samples(m[:, 0, b].astype(float), seed, f"reach(L={L})")
            for b, L in enumerate(Ls)]


def _crossing(lams: np.ndarray, P: np.ndarray) -> float:
    """Intensity where the two largest-box ratio curves ``P_{L_{j+1}} / P_{L_j}`` cross."""
    with np.errstate(divide="ignore", invalid="ignore"):
        Q = P[:, 1:] / P[:, :-1]
    D = Q[:, -1] - Q[:, -2]
    for a in range(lams.size - 1):
        d0, d1 = D[a], D[a + 1]
        if not (np.isfinite(d0) and np.isfinite(d1)):
            continue
        if d0 < 0 < d1:
            return float(lams[a] + (lams[a + 1] - lams[a]) * (-d0) / (d1 - d0))
    return math.nan


@dataclass
class CriticalEstimate:
    lambda_hat: float
    ci: tuple
    sigma: float
    lambda_T_lower: float
    lams: np.ndarray
    Ls: np.ndarray
    reach: np.ndarray = field(repr=False)
    failed_resamples: int = 0
    dropped: list = field(default_factory=list)

    @property
    def above_floor(self) -> bool:
        return self.lambda_hat >= self.lambda_T_lower - 3.0 * self.sigma

    def to_dict(self) -> dict:
        return {"lambda_hat": self.lambda_hat, "lambda_c_hat": self.lambda_hat,
                "lambda_T_hat": self.lambda_hat, "ci_low": self.ci[0], "ci_high": self.ci[1],
                "sigma": self.sigma, "lambda_T_lower": self.lambda_T_lower,
                "failed_resamples": self.failed_resamples}

    def curves_csv(self) -> str:
        P = self.reach.mean(axis=0)
        rows = [(lam, L, P[a, b]) for a, lam in enumerate(self.lams) for b, L in enumerate(self.Ls)]
        return csv_text(["lam", "L", "reach"], rows)


def locate_critical(model: ModelSpec, lams: Sequence[float], Ls: Sequence[float], samples: int,
                    seed: int = 0, resamples: int = 1000, margin: Optional[float] = None
                    ) -> CriticalEstimate:
    """Critical intensity from crossings of boundary-reach ratio curves.

    With ``P_L(lam)`` the boundary-reach probability, the ratios
    ``P_{L_{j+1}}(lam) / P_{L_j}(lam)`` tend to 0 below and to 1 above the
    critical point; the estimate is where the ratio curves of the two
    largest box pairs cross.  Grid points below the branching lower bound
    are dropped.  The interval is a bootstrap percentile interval over
    replicas.

    Raises
    ------
    BracketError
        If the curves do not cross inside the grid.
    """
    Ls = np.asarray(sorted(Ls), dtype=float)
    if Ls.size < 3:
        raise ValueError("need at least three box sizes")
    floor = float(gw_bounds(model.adjacency, model.weights, 1.0)["lambda_T_lower"])
    grid = np.asarray(sorted(lams), dtype=float)
    dropped = grid[grid < floor].tolist()
    grid = grid[grid >= floor]
    if grid.size < 2:
        raise BracketError("fewer than two grid points above the branching lower bound")
    R = reach_matrix(model, grid, Ls, samples, seed, margin)
    lam_hat = _crossing(grid, R.mean(axis=0))
    if not math.isfinite(lam_hat):
        raise BracketError("boundary-reach ratio curves do not cross inside the grid")
    flat = R.reshape(samples, -1).astype(np.float64)
    shape = R.shape[1:]
    boots = bootstrap(lambda d: _crossing(grid, d.mean(axis=0).reshape(shape)), flat, resamples, seed)
    ok = np.isfinite(boots)
    b = boots[ok]
    ci = (float(np.percentile(b, 2.5)), float(np.percentile(b, 97.5))) if b.size else (math.nan, math.nan)
    sigma = float(np.std(b, ddof=1)) if b.size > 1 else math.nan
    return CriticalEstimate(lam_hat, ci, sigma, floor, grid, Ls, R, int((~ok).sum()), dropped)


@dataclass
class SupercriticalProfile:
    """Boundary reach above the critical estimate and a linear fit of it against ``lam``."""

    lambda_hat: float
    lam_check: float
    Ls: np.ndarray
    reach_check: list
    fit_lams: np.ndarray
    fit_reach: list
    fit: object
    curvature: float

    def to_dict(self) -> dict:
        return {"lambda_hat": self.lambda_hat, "lam_check": self.lam_check,
                "reach_check": {fmt(L): e.to_dict() for L, e in zip(self.Ls, self.reach_check)},
                "fit": self.fit.to_dict(), "curvature": self.curvature}

    def to_csv(self) -> str:
        rows = [(self.lam_check, L, e.mean, e.stderr) for L, e in zip(self.Ls, self.reach_check)]
        rows += [(lam, self.Ls[-1], e.mean, e.stderr) for lam, e in zip(self.fit_lams, self.fit_reach)]
        return csv_text(["lam", "L", "reach", "stderr"], rows)

    def fit_csv(self) -> str:
        """Fit points with fitted values and residuals."""
        rows = []
        for lam, e, res in zip(self.fit_lams, self.fit_reach, self.fit.residuals):
            rows.append((lam, e.mean, e.stderr, e.mean - res, res))
        return csv_text(["lam", "reach", "stderr", "fitted", "residual"], rows)

    def summary_csv(self) -> str:
        f = self.fit
        return csv_text(["lambda_hat", "lam_check", "slope", "slope_stderr", "intercept", "r2",
                         "curvature"],
                        [(self.lambda_hat, self.lam_check, f.slope, f.slope_stderr, f.intercept,
                          f.r2, self.curvature)])


def supercritical_profile(model: ModelSpec, lambda_hat: float, Ls: Sequence[float], samples: int,
                          seed: int = 0, factor: float = 1.5, span: float = 0.3, points: int = 7,
                          margin: Optional[float] = None) -> SupercriticalProfile:
    """Boundary reach at ``factor * lambda_hat`` for every box and a fit on ``[lambda_hat, (1 + span) lambda_hat]``.

    All intensities share coupled replicas.  The fit regresses the
    largest-box reach on ``lam`` (weights from the standard errors);
    ``curvature`` is the quadratic coefficient of an unweighted parabola
    through the same points, reported as the residual structure.
    """
    Ls = np.asarray(sorted(Ls), dtype=float)
    fit_lams = np.linspace(lambda_hat, (1.0 + span) * lambda_hat, points)
    check = factor * lambda_hat
    grid = np.unique(np.append(fit_lams, check))
    R = reach_matrix(model, grid, Ls, samples, seed, margin)
    a_check = int(np.flatnonzero(grid == check)[0])
    reach_check = [Estimate.from_samples(R[:, a_check, b], seed, f"reach(lam={check}, L={L})")
                   for b, L in enumerate(Ls)]
    fit_reach = [Estimate.from_samples(R[:, int(np.flatnonzero(grid == lam)[0]), -1], seed,
                                       f"reach(lam={lam}, L={Ls[-1]})") for lam in fit_lams]
    y = np.array([e.mean for e in fit_reach])
    se = np.array([e.stderr for e in fit_reach])
    w = 1.0 / np.maximum(se, 1e-12) ** 2
    fit = weighted_linear_fit(fit_lams, y, w)
    curvature = float(np.polyfit(fit_lams, y, 2)[0])
    return SupercriticalProfile(float(lambda_hat), float(check), Ls, reach_check, fit_lams,
                                fit_reach, fit, curvature)


# ---------------------------------------------------------------------------
# exponential rate
# ---------------------------------------------------------------------------


@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float
    slope_stderr: float
    k: np.ndarray
    log_theta: np.ndarray
    weights: np.ndarray

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2,
                "slope_stderr": self.slope_stderr}


def fit_exponential_rate(curve: TailCurve, window=(5, 40), max_rel_err: float = 0.25) -> RateFit:
    """Weighted least squares of ``log theta(k)`` on ``k`` over ``window`` (inclusive).

    Weights are ``(theta / stderr)^2``, the inverse delta-method variance of
    ``log theta``; without standard errors the points are weighted equally.

    Raises
    ------
    FitError
        If the window holds a zero or a relative standard error of at least
        ``max_rel_err``.
    """
    lo, hi = window
    sel = (curve.k >= lo) & (curve.k <= hi)
    k = curve.k[sel].astype(float)
    th = curve.theta[sel]
    se = curve.stderr[sel]
    if k.size < 2:
        raise FitError("the window holds fewer than two points")
    if np.any(th <= 0):
        zeros = k[th <= 0].astype(int).tolist()
        raise FitError(f"theta is zero at k = {zeros[:5]}{'...' if len(zeros) > 5 else ''}; "
                       "increase the number of samples or shrink the window")
    rel = se / th
    if np.any(rel >= max_rel_err):
        bad = k[rel >= max_rel_err].astype(int).tolist()
        raise FitError(f"relative standard error >= {max_rel_err} at k = {bad[:5]}; "
                       "increase the number of samples or shrink the window")
    if np.all(se == 0):
        w = np.ones_like(k)
    else:
        floor = np.min(se[se > 0])
        w = (th / np.maximum(se, floor)) ** 2
    y = np.log(th)
    fit = weighted_linear_fit(k, y, w)
    return RateFit(fit.slope, fit.intercept, fit.r2, fit.slope_stderr, k, y, w)


# ---------------------------------------------------------------------------
# weight-ratio diagnostics
# ---------------------------------------------------------------------------


@dataclass
class RatioRow:
    m: float
    reach_term: float
    delta_ratio: float
    delta_se: float
    delta_ci: tuple
    pivotal_ratio: float
    pivotal_se: float
    pivotal_ci: tuple


@dataclass
class RatioTable:
    rows: list
    delta_fit: dict
    pivotal_fit: dict
    samples: int
    lam: float
    gamma: float
    k: int

    def to_csv(self) -> str:
        return csv_text(["m", "R_m_d", "delta_ratio", "delta_se", "delta_lo", "delta_hi",
                         "pivotal_ratio", "pivotal_se", "pivotal_lo", "pivotal_hi"],
                        [(r.m, r.reach_term, r.delta_ratio, r.delta_se, *r.delta_ci,
                          r.pivotal_ratio, r.pivotal_se, *r.pivotal_ci) for r in self.rows])


def _probe_sizes(spec, inst, probe_key, ms_bins):
    """``|C|`` of a probe vertex at the origin site for each weight bin.

    The probe replaces the lattice vertex of the same bin (the root stays
    present for the other weights); its edge to an open vertex ``x`` is open iff a variate keyed by ``x`` alone is below
    ``phi``, so the probe's randomness is shared across weights.
    """
    N = spec.n_vertices
    g = spec.graph(np.arange(N), inst.edge_key)
    site0 = spec.root // spec.n_bins
    out = []
    active = inst.active_ids()
    u_all = rng.uniforms(probe_key, active)
    for b in ms_bins:
        probe = site0 * spec.n_bins + b
        keep = active != probe
        opened = active[keep]
        u = u_all[keep]
        if opened.size == 0:
            out.append(1)
            continue
        mask = np.zeros(N, bool)
        mask[opened] = True
        I, J = g.open_edges(mask)
        loc = -np.ones(N, np.int64)
        loc[opened] = np.arange(opened.size)
        labels = labels_from_edges(opened.size, loc[I], loc[J])
        sizes = np.bincount(labels, minlength=opened.size)
        r = np.linalg.norm(spec.positions(opened), axis=1)
        phi = spec.model.adjacency.phi(r, spec.bins[b], spec.weights(opened))
        hit = np.unique(labels[u < phi])
        out.append(1 + int(sizes[hit].sum()))
    return np.asarray(out)


def _ratio_fit(x, ratios, ses):
    ok = np.isfinite(ratios) & (ratios > 0) & np.isfinite(ses)
    if ok.sum() < 2:
        return {"C_hat": math.nan, "intercept": math.nan, "r2": math.nan}
    y = np.log(ratios[ok])
    w = 1.0 / np.maximum((ses[ok] / ratios[ok]) ** 2, 1e-12)
    fit = weighted_linear_fit(np.asarray(x)[ok], y, w)
    return {"C_hat": fit.slope, "intercept": fit.intercept, "r2": fit.r2}


def ratio_diagnostics(model: ModelSpec, lam: float, gamma: float, ms: Sequence[float], k: int,
                      samples: int, seed: int = 0, L: int = 3, n: int = 1,
                      resamples: int = 1000, truncation_tol: float = 1e-6) -> RatioTable:
    """Revealment and pivotal-sum ratios against weight 1 on the lattice ``(L, n)``.

    The revealment of ``(0, m)`` is measured through
    ``E[1 - exp(-gamma |C(0, m)|)]`` with a probe vertex whose edge variates
    are shared across ``m``.  The pivotal sum is
    ``sum_u P((u, m) closed and pivotal for |C(root)| >= k)``.  ``log`` of
    each ratio is regressed on ``R(m)^d``; the slope is the fitted
    constant.  Intervals are bootstrap percentiles over replicas.
    """
    adj = model.adjacency
    if adj.reach is None:
        raise PreconditionError("ratio diagnostics need a model with a reach function")
    spec = build_lattice(model, L, n, truncation_tol, intensity=lam)
    bins = []
    for m in ms:
        hit = np.flatnonzero(np.isclose(spec.bins, m))
        if hit.size == 0:
            raise PreconditionError(f"weight {m} is not a bin of the lattice (H = {spec.H})")
        bins.append(int(hit[0]))
    if 1.0 not in [float(m) for m in ms]:
        raise PreconditionError("the weight list must contain 1")
    base = [float(m) for m in ms].index(1.0)
    D = np.zeros((samples, len(ms)))
    S = np.zeros((samples, len(ms)))
    d = spec.d
    for r in range(samples):
        inst = sample_instance(spec, lam, seed, r)
        size = _probe_sizes(spec, inst, rng.stream_key(seed, r, rng.STREAM_SECOND), bins)
        D[r] = -np.expm1(-gamma * size)
        piv = analyze_root(inst, k).pivotal_vertices
        if piv.size:
            closed = ~np.isin(piv, inst.open_ids)
            b = piv[closed] % spec.n_bins
            for j, bj in enumerate(bins):
                S[r, j] = np.count_nonzero(b == bj)
    x = np.array([float(adj.reach(m)) ** d for m in ms])

    def ratios(mat):
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = mat.mean(axis=0)
            return mean / mean[base]

    both = np.concatenate([D, S], axis=1)
    J = len(ms)
    boot = bootstrap(lambda z: np.concatenate([ratios(z[:, :J]), ratios(z[:, J:])]), both,
                     resamples, seed)
    rd, rs = ratios(D), ratios(S)
    bd, bs = boot[:, :J], boot[:, J:]
    rows = []
    for j, m in enumerate(ms):
        def summary(col):
            c = col[np.isfinite(col)]
            if c.size < 2:
                return math.nan, (math.nan, math.nan)
            return float(np.std(c, ddof=1)), (float(np.percentile(c, 2.5)), float(np.percentile(c, 97.5)))
        sd_d, ci_d = summary(bd[:, j])
        sd_s, ci_s = summary(bs[:, j])
        if j == base:
            sd_d = sd_s = 0.0
        rows.append(RatioRow(float(m), float(x[j]), float(rd[j]), sd_d, ci_d, float(rs[j]), sd_s, ci_s))
    sel = np.array([j != base for j in range(J)])
    fit_d = _ratio_fit(x[sel], rd[sel], np.array([r.delta_se for r in rows])[sel])
    fit_s = _ratio_fit(x[sel], rs[sel], np.array([r.pivotal_se for r in rows])[sel])
    # bootstrap intervals of the fitted constants
    cd, cs = [], []
    for row in range(boot.shape[0]):
        cd.append(_ratio_fit(x[sel], bd[row, sel], np.array([r.delta_se for r in rows])[sel])["C_hat"])
        cs.append(_ratio_fit(x[sel], bs[row, sel], np.array([r.pivotal_se for r in rows])[sel])["C_hat"])
    for fit, arr in ((fit_d, np.array(cd)), (fit_s, np.array(cs))):
        a = arr[np.isfinite(arr)]
        fit["ci"] = (float(np.percentile(a, 2.5)), float(np.percentile(a, 97.5))) if a.size else (math.nan,) * 2
        fit["sigma"] = float(np.std(a, ddof=1)) if a.size > 1 else math.nan
    return RatioTable(rows, fit_d, fit_s, samples, lam, gamma, k)


# ---------------------------------------------------------------------------
# lattice convergence
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    n: int
    theta_n: float
    theta_n_se: float
    theta_L: float
    gap: float
    gap_se: float
    distinct: int
    mismatches: int
    influence_sum: float = math.nan
    influence_se: float = math.nan
    russo_gap: float = math.nan
    russo_se: float = math.nan


@dataclass
class ConvergenceTable:
    rows: list
    samples: int
    k: int
    lam: float
    L: int
    diffs: np.ndarray = field(repr=False, default=None)

    def gap_non_increasing(self, z: float = 1.96) -> bool:
        g = [r.gap for r in self.rows]
        s = [r.gap_se for r in self.rows]
        return all(g[i + 1] <= g[i] + z * math.hypot(s[i], s[i + 1]) for i in range(len(g) - 1))

    def influence_decreasing(self) -> bool:
        v = [r.influence_sum for r in self.rows]
        return all(v[i + 1] < v[i] for i in range(len(v) - 1))

    def influence_slope(self, d: int) -> float:
        """Slope of ``log I`` against ``log 2^(-n d)``."""
        n = np.array([r.n for r in self.rows], dtype=float)
        v = np.array([r.influence_sum for r in self.rows])
        fit = weighted_linear_fit(-n * d * math.log(2.0), np.log(v))
        return fit.slope

    def to_csv(self) -> str:
        return csv_text(["n", "theta_n", "theta_n_se", "theta_L", "gap", "gap_se", "distinct_replicas",
                         "mismatches", "influence_sum", "influence_se", "russo_gap", "russo_se"],
                        [(r.n, r.theta_n, r.theta_n_se, r.theta_L, r.gap, r.gap_se, r.distinct,
                          r.mismatches, r.influence_sum, r.influence_se, r.russo_gap, r.russo_se)
                         for r in self.rows])


def convergence_study(model: ModelSpec, lam: float, L: int, ns: Sequence[int], k: int,
                      gamma: float, samples: int, seed: int = 0, influence_samples: int = 0,
                      russo_samples: int = 0, truncation_tol: float = 1e-6) -> ConvergenceTable:
    """Coupled lattice-versus-continuum tails and edge-influence sums per mesh level.

    Each replica's continuum points (plus the origin) are drawn once and
    binned into every mesh.  ``gap`` is ``|mean(1{|C_n| >= k} - 1{|C| >= k})|``
    with ``C`` the continuum origin cluster in ``[-L, L]^d``.  On replicas
    where every point has its own cell the lattice and continuum cluster
    sizes are compared exactly (``mismatches``).  With
    ``influence_samples > 0`` the normalised edge-influence sum is measured
    on direct lattice samples; with ``russo_samples > 0`` the pivotal-sum
    derivative is compared with a common-random-numbers difference quotient.
    """
    from .osss import edge_influence_sum
    specs = {n: build_lattice(model, L, n, truncation_tol, intensity=lam) for n in ns}
    first = specs[ns[0]]
    cont = np.zeros(samples, bool)
    lat = np.zeros((samples, len(ns)), bool)
    distinct = np.zeros(len(ns), np.int64)
    mismatch = np.zeros(len(ns), np.int64)
    for r in range(samples):
        src = coupled_source(first, lam, seed, r)
        cont[r] = cluster_of_origin(src.restrict(float(L)), margin=0.0).size >= k
        for j, n in enumerate(ns):
            inst = instance_from_points(specs[n], lam, src)
            size = lattice_cluster(inst).size
            lat[r, j] = size >= k
            if distinct_cells(inst):
                distinct[j] += 1
                if size != continuum_source_size(inst):
                    mismatch[j] += 1
    diffs = lat.astype(float) - cont[:, None].astype(float)
    rows = []
    for j, n in enumerate(ns):
        est = Estimate.from_samples(lat[:, j].astype(float), seed)
        dd = Estimate.from_samples(diffs[:, j], seed)
        row = ConvergenceRow(int(n), est.mean, est.stderr, float(cont.mean()), abs(dd.mean), dd.stderr,
                             int(distinct[j]), int(mismatch[j]))
        if influence_samples:
            res = edge_influence_sum(specs[n], lam, gamma, k, influence_samples, seed)
            row.influence_sum, row.influence_se = res["value"], res["stderr"]
        if russo_samples:
            row.russo_gap, row.russo_se = _russo_gap(specs[n], lam, k, russo_samples, seed)
        rows.append(row)
    return ConvergenceTable(rows, samples, k, lam, L, diffs)


def _russo_gap(spec, lam, k, samples, seed, rel_step: float = 0.1):
    """Pivotal-sum derivative minus a central difference quotient on the same replicas."""
    h = rel_step * lam
    piv = russo_rhs(spec, lam, k, "monte-carlo", samples, seed)
    diff = np.zeros(samples)
    for r in range(samples):
        hi = sample_instance(spec, lam + h, seed, r)
        lo = sample_instance(spec, lam - h, seed, r)
        diff[r] = (float(lattice_cluster(hi).size >= k) - float(lattice_cluster(lo).size >= k)) / (2 * h)
    fd = Estimate.from_samples(diff, seed)
    return piv.mean - fd.mean, math.hypot(piv.stderr, fd.stderr)


# ---------------------------------------------------------------------------
# differential inequality diagnostic
# ---------------------------------------------------------------------------


def differential_inequality(model: ModelSpec, lams: Sequence[float], L: float, k: int,
                            samples: int, seed: int = 0, size_cap: int = 10 ** 5) -> dict:
    """``(k / chi - 1) theta(k)`` against the difference-quotient derivative of ``theta(k)``.

    Replicas are coupled across the grid.  The fitted constant is the
    smallest ``c`` with ``(k / chi - 1) theta <= c dtheta/dlam`` at every grid
    point where the derivative is positive.  Reported, not asserted.
    """
    lams = np.asarray(sorted(lams), dtype=float)
    sizes = np.zeros((samples, lams.size), np.int64)
    for a, lam in enumerate(lams):
        sizes[:, a], _ = origin_sizes(model, lam, L, samples, seed, size_cap=size_cap)
    theta = (sizes >= k).mean(axis=0)
    chi = sizes.mean(axis=0)
    deriv = np.gradient(theta, lams)
    lhs = (k / chi - 1.0) * theta
    ok = deriv > 0
    c = float(np.max(lhs[ok] / deriv[ok])) if ok.any() else math.nan
    rows = [(lam, th, ch, dv, lh) for lam, th, ch, dv, lh in zip(lams, theta, chi, deriv, lhs)]
    return {"constant": c, "rows": rows,
            "csv": csv_text(["lam", "theta", "chi", "dtheta", "lhs"], rows)}


# ---------------------------------------------------------------------------
# stochastic domination
# ---------------------------------------------------------------------------


@dataclass
class DominationReport:
    replicas: int
    edge_violations: int
    size_violations: int
    g_edges: int
    restricted_edges: int
    count_mean: float
    count_expected: float
    count_z: float
    sizes: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"replicas": self.replicas, "edge_violations": self.edge_violations,
                "size_violations": self.size_violations, "g_edges": self.g_edges,
                "restricted_edges": self.restricted_edges, "count_mean": self.count_mean,
                "count_expected": self.count_expected, "count_z": self.count_z}


def check_lower_bound(model: ModelSpec, B, eps: float, r2: float, grid: int = 33):
    """Grid check of ``phi(r; a, b) >= eps`` on ``(0, r2] x B x B``; returns the first violation or None."""
    lo, hi = B
    rs = np.linspace(r2 / grid, r2, grid)
    ws = np.linspace(lo, hi, 9)
    R, A, Bb = np.meshgrid(rs, ws, ws, indexing="ij")
    phi = model.adjacency.phi(R, A, Bb)
    bad = np.argwhere(phi < eps)
    if bad.size:
        i, j, l = bad[0]
        return float(rs[i]), float(ws[j]), float(ws[l])
    return None


def domination_check(model: ModelSpec, B, eps: float, r2: float, lam: float, samples: int,
                     seed: int = 0, box: Optional[float] = None) -> DominationReport:
    """Coupled comparison of the restricted marked model with the model ``eps 1{r <= r2}``.

    Both graphs live on the points with weights in ``B`` plus the origin
    (given weight ``min B``) and use the same edge variates, so an edge of
    the second model is an edge of the first whenever ``phi >= eps`` on
    ``(0, r2] x B x B``.

    Raises
    ------
    PreconditionError
        If the lower bound fails on the checking grid.
    """
    lo, hi = float(B[0]), float(B[1])
    if not 1.0 <= lo <= hi:
        raise PreconditionError("B must be an interval [lo, hi] with 1 <= lo <= hi")
    if eps < 0 or eps > 1 or r2 <= 0:
        raise PreconditionError("need 0 <= eps <= 1 and r2 > 0")
    viol = check_lower_bound(model, (lo, hi), eps, r2)
    if viol is not None:
        raise PreconditionError(f"phi(r={viol[0]}; a={viol[1]}, b={viol[2]}) < eps = {eps}")
    box = float(model.box if box is None else box)
    ev = sv = ge = re = 0
    counts = np.zeros(samples)
    sizes = np.zeros((samples, 2), np.int64)
    for r in range(samples):
        cfg = sample_ppp(model, seed, r, intensity=lam, box=box)
        keep = (cfg.weights >= lo) & (cfg.weights <= hi)
        sub = cfg._subset(keep)
        counts[r] = sub.size
        sub = augment(sub, [(np.zeros(model.dimension), lo)])
        o = origin_index(sub)
        g = sub.graph()
        I, J = g.open_edges()
        pairs = g.tree().query_pairs(r2, output_type="ndarray") if sub.size > 1 else np.zeros((0, 2), int)
        a = np.minimum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
        b = np.maximum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
        u = rng.pair_uniforms(g.edge_key, sub.keys[a], sub.keys[b])
        gsel = u < eps
        ga, gb = a[gsel], b[gsel]
        restricted = set(zip(I.tolist(), J.tolist()))
        missing = sum((x, y) not in restricted for x, y in zip(ga.tolist(), gb.tolist()))
        ev += int(missing)
        ge += int(ga.size)
        re += int(I.size)
        lab_g = labels_from_edges(sub.size, ga, gb)
        lab_r = labels_from_edges(sub.size, I, J)
        sg = int(np.sum(lab_g == lab_g[o]))
        sr = int(np.sum(lab_r == lab_r[o]))
        sizes[r] = (sg, sr)
        sv += int(sg > sr)
    expected = lam * float(model.weights.interval_mass(lo, hi)) * (2 * box) ** model.dimension
    z = (counts.mean() - expected) / math.sqrt(expected / samples) if expected > 0 else 0.0
    return DominationReport(samples, ev, sv, ge, re, float(counts.mean()), expected, float(z), sizes)
