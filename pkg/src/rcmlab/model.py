"""Adjacency functions, weight distributions and the analytic bounds built on them.

An adjacency function ``phi(r; a, b)`` gives the probability that two marked
points at Euclidean distance ``r`` with weights ``a`` and ``b`` are joined.
Weights live on ``[1, inf)`` and follow a distribution ``pi`` that is either a
point mass at 1, a (possibly truncated) Pareto law or a finite discrete law.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special
from scipy.interpolate import RegularGridInterpolator

MONO_TOL = 1e-12


class DomainError(ValueError):
    """Raised when an adjacency function is evaluated outside its domain."""


class DivergenceError(ArithmeticError):
    """Raised when a numerically integrated tail does not appear summable."""

    def __init__(self, message: str, partial: float = math.inf):
        super().__init__(message)
        self.partial = partial


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d, ``2 pi^(d/2) / Gamma(d/2)``."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


# ---------------------------------------------------------------------------
# weight distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightDistribution:
    """Weight law on ``[1, inf)``.

    Parameters
    ----------
    kind : {"point", "pareto", "discrete"}
        ``point`` is the point mass at 1, ``pareto`` has density
        ``alpha m^(-alpha-1)`` on ``[1, inf)`` (renormalised to ``[1, m_max]``
        when ``m_max`` is given) and ``discrete`` is a finite list of atoms.
    alpha : float, optional
        Pareto shape.
    m_max : float, optional
        Pareto truncation point.
    atoms, probs : tuple of float, optional
        Support and probabilities of a discrete law.
    """

    kind: str = "point"
    alpha: Optional[float] = None
    m_max: Optional[float] = None
    atoms: tuple = ()
    probs: tuple = ()

    def __post_init__(self):
        if self.kind == "point":
            return
        if self.kind == "pareto":
            if self.alpha is None or not self.alpha > 0:
                raise ValueError("pareto weights need alpha > 0")
            if self.m_max is not None and not self.m_max > 1:
                raise ValueError("pareto truncation m_max must exceed 1")
            return
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms, dtype=float)
            probs = np.asarray(self.probs, dtype=float)
            if atoms.ndim != 1 or atoms.size == 0 or atoms.shape != probs.shape:
                raise ValueError("discrete weights need matching atoms and probs")
            if np.any(atoms < 1):
                raise ValueError("discrete atoms must be >= 1")
            if np.any(np.diff(atoms) <= 0):
                raise ValueError("discrete atoms must be strictly increasing")
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
                raise ValueError("discrete probabilities must be >= 0 and sum to 1")
            if np.any(np.diff(probs) > 1e-15):
                raise ValueError("discrete probabilities must be non-increasing in m")
            return
        raise ValueError(f"unknown weight kind {self.kind!r}")

    # constructors -----------------------------------------------------------
    @classmethod
    def point(cls) -> "WeightDistribution":
        return cls("point")

    @classmethod
    def pareto(cls, alpha: float, m_max: Optional[float] = None) -> "WeightDistribution":
        return cls("pareto", alpha=float(alpha), m_max=None if m_max is None else float(m_max))

    @classmethod
    def discrete(cls, mapping) -> "WeightDistribution":
        items = sorted((float(m), float(q)) for m, q in dict(mapping).items())
        return cls("discrete", atoms=tuple(m for m, _ in items), probs=tuple(q for _, q in items))

    # basic properties -------------------------------------------------------
    @property
    def is_continuous(self) -> bool:
        return self.kind == "pareto"

    @property
    def is_bounded(self) -> bool:
        return self.kind != "pareto" or self.m_max is not None

    @property
    def support_max(self) -> float:
        if self.kind == "point":
            return 1.0
        if self.kind == "discrete":
            return float(self.atoms[-1])
        return math.inf if self.m_max is None else float(self.m_max)

    def _pareto_norm(self) -> float:
        return 1.0 if self.m_max is None else -math.expm1(-self.alpha * math.log(self.m_max))

    def sf(self, m) -> np.ndarray:
        """Tail mass ``pi((m, inf))``."""
        m = np.asarray(m, dtype=float)
        if self.kind == "point":
            return np.where(m < 1.0, 1.0, 0.0)
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms)
            probs = np.asarray(self.probs)
            return np.array([probs[atoms > x].sum() for x in np.ravel(m)]).reshape(m.shape)
        mm = np.maximum(m, 1.0)
        tail = mm ** (-self.alpha)
        if self.m_max is not None:
            tail = np.where(mm >= self.m_max, 0.0, tail - self.m_max ** (-self.alpha))
        return tail / self._pareto_norm()

    def cdf(self, m) -> np.ndarray:
        return 1.0 - self.sf(m)

    def interval_mass(self, lo, hi) -> np.ndarray:
        """``pi([lo, hi])`` for continuous laws (no atoms, so endpoints do not matter)."""
        if self.kind != "pareto":
            raise ValueError("interval_mass is defined for continuous weights only")
        lo = np.maximum(np.asarray(lo, dtype=float), 1.0)
        hi = np.asarray(hi, dtype=float)
        if self.m_max is not None:
            lo = np.minimum(lo, self.m_max)
            hi = np.minimum(hi, self.m_max)
        hi = np.maximum(hi, lo)
        # difference of tails, written to keep precision for small masses
        a = self.alpha
        out = lo ** (-a) * (-np.expm1(-a * (np.log(hi) - np.log(lo))))
        return out / self._pareto_norm()

    def density(self, m) -> np.ndarray:
        if self.kind != "pareto":
            raise ValueError("density is defined for continuous weights only")
        m = np.asarray(m, dtype=float)
        inside = m >= 1.0
        if self.m_max is not None:
            inside &= m <= self.m_max
        out = np.zeros_like(m)
        out[inside] = self.alpha * m[inside] ** (-self.alpha - 1.0)
        return out / self._pareto_norm()

    def ppf(self, u) -> np.ndarray:
        """Inverse distribution function; maps ``[0, 1)`` onto the support."""
        u = np.asarray(u, dtype=float)
        if self.kind == "point":
            return np.ones_like(u)
        if self.kind == "discrete":
            cum = np.cumsum(self.probs)
            cum[-1] = 1.0
            idx = np.searchsorted(cum, u, side="right")
            return np.asarray(self.atoms)[np.minimum(idx, len(self.atoms) - 1)]
        q = u * self._pareto_norm()
        return np.maximum(np.exp(-np.log1p(-q) / self.alpha), 1.0)

    def quantile_cap(self, level: float = 1e-9) -> float:
        """Point beyond which at most ``level`` of the mass lies."""
        if self.is_bounded:
            return self.support_max
        return float(level ** (-1.0 / self.alpha))

    def expect(self, g: Callable[[np.ndarray], np.ndarray]) -> float:
        """``int g dpi`` by quadrature (continuous) or summation (atoms)."""
        if self.kind == "point":
            return float(np.asarray(g(np.array([1.0])))[0])
        if self.kind == "discrete":
            return float(np.dot(self.probs, g(np.asarray(self.atoms))))
        hi = self.support_max
        val, _ = integrate.quad(lambda m: float(g(np.array([m]))[0] * self.density(m)),
                                1.0, hi, epsabs=1e-12, epsrel=1e-12, limit=400)
        return float(val)

    def to_dict(self) -> dict:
        if self.kind == "point":
            return {"kind": "point"}
        if self.kind == "pareto":
            out = {"kind": "pareto", "alpha": self.alpha}
            if self.m_max is not None:
                out["m_max"] = self.m_max
            return out
        return {"kind": "discrete", "atoms": list(self.atoms), "probs": list(self.probs)}


def sample_weight(weights: WeightDistribution, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw weights by inversion; one uniform per weight."""
    return weights.ppf(rng.random(size))


def weight_bins(weights: WeightDistribution, n: int, H: Optional[float] = None) -> np.ndarray:
    """Weight grid ``M_n`` (or ``M_H`` when ``H`` is given).

    Continuous laws use ``1 + l / 2^n``; discrete laws use their atoms, with 1
    added (mass zero) when it is not an atom so that the root weight exists.
    """
    if weights.kind == "point":
        return np.array([1.0])
    if weights.kind == "discrete":
        atoms = np.asarray(weights.atoms, dtype=float)
        if atoms[0] > 1.0:
            atoms = np.concatenate([[1.0], atoms])
        if H is not None:
            atoms = atoms[atoms <= H]
        return atoms
    if H is None:
        if weights.m_max is None:
            raise ValueError("untruncated continuous weights need a cap H")
        H = weights.m_max
    step = 2.0 ** (-n)
    count = int(math.floor((H - 1.0) / step + 1e-9)) + 1
    m = 1.0 + step * np.arange(count)
    if weights.m_max is not None:
        m = m[m < weights.m_max]
    return m


def weight_mass(weights: WeightDistribution, m, n: int) -> np.ndarray:
    """Bin mass ``Pi(m, n)``: ``pi([m, m + 2^-n])`` or ``pi({m})`` for atoms."""
    m = np.asarray(m, dtype=float)
    if weights.kind == "point":
        return np.where(m == 1.0, 1.0, 0.0)
    if weights.kind == "discrete":
        lookup = dict(zip(weights.atoms, weights.probs))
        return np.array([lookup.get(float(x), 0.0) for x in np.ravel(m)]).reshape(m.shape)
    return weights.interval_mass(m, m + 2.0 ** (-n))


# ---------------------------------------------------------------------------
# reach functions and adjacency functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reach:
    """Non-decreasing reach ``R(m)``: ``linear`` (s*m), ``power`` (s*m^p), ``log1p`` (s*log(1+m))."""

    kind: str = "linear"
    scale: float = 1.0
    power: float = 1.0

    def __post_init__(self):
        if self.kind not in ("linear", "power", "log1p"):
            raise ValueError(f"unknown reach kind {self.kind!r}")
        if not self.scale > 0 or not self.power >= 0:
            raise ValueError("reach needs scale > 0 and power >= 0")

    def __call__(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind == "linear":
            return self.scale * m
        if self.kind == "power":
            return self.scale * m ** self.power
        return self.scale * np.log1p(m)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "scale": self.scale}
        if self.kind == "power":
            out["power"] = self.power
        return out


def _exp_power(r, a, b, p):
    beta, scale = p["beta"], p["scale"]
    with np.errstate(divide="ignore", over="ignore"):
        x = (r / scale) ** (-beta)
    return -np.expm1(-x)


def _min_reach(r, a, b, p):
    beta = p["beta"]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        x = (a * b) / r ** beta
    return -np.expm1(-x)


def _gilbert(r, a, b, p):
    return np.where(r <= p["radius"], 1.0, 0.0)


def _power_law(r, a, b, p):
    return (1.0 + r / p["scale"]) ** (-p["exponent"])


def _saturating(r, a, b, p):
    return r / (p["scale"] + r)


def _zero(r, a, b, p):
    return np.zeros(np.broadcast(r, a, b).shape)


# name -> (function, default params, weighted)
FORMS = {
    "gilbert": (_gilbert, {"radius": 1.0}, False),
    "exp_power": (_exp_power, {"beta": 3.0, "scale": 1.0}, False),
    "min_reach": (_min_reach, {"beta": 3.0}, True),
    "power_law": (_power_law, {"exponent": 1.0, "scale": 1.0}, False),
    "saturating": (_saturating, {"scale": 1.0}, False),
    "zero": (_zero, {}, False),
}


@dataclass(frozen=True)
class AdjacencySpec:
    """An isotropic adjacency function ``phi(r; a, b)``.

    Parameters
    ----------
    kind : str
        One of ``FORMS`` or ``"tabulated"``.
    dimension : int
        Ambient dimension ``d >= 2``.
    params : dict
        Form parameters (defaults filled in).
    reach : Reach, optional
        Reach function; when present ``phi`` is forced to zero for
        ``r > R(min(a, b))``.
    table : dict, optional
        For ``tabulated``: ``r`` grid, optional ``a`` grid and a value array
        of shape ``(len(r),)`` or ``(len(r), len(a), len(a))``.
    """

    kind: str = "gilbert"
    dimension: int = 2
    params: dict = field(default_factory=dict)
    reach: Optional[Reach] = None
    table: Optional[dict] = None

    def __post_init__(self):
        if int(self.dimension) < 2:
            raise ValueError("dimension must be at least 2")
        if self.kind == "tabulated":
            self._init_table()
            return
        if self.kind not in FORMS:
            raise ValueError(f"unknown adjacency kind {self.kind!r}")
        _, defaults, _ = FORMS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = dict(defaults)
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        if self.kind == "min_reach" and self.reach is None:
            object.__setattr__(self, "reach", Reach("linear", 1.0))

    def _init_table(self):
        if not self.table or "r" not in self.table or "values" not in self.table:
            raise ValueError("tabulated adjacency needs 'r' and 'values'")
        r = np.asarray(self.table["r"], dtype=float)
        vals = np.asarray(self.table["values"], dtype=float)
        if np.any(np.diff(r) <= 0) or r[0] != 0.0:
            raise ValueError("tabulated r grid must start at 0 and increase")
        if np.any(vals < 0) or np.any(vals > 1):
            raise ValueError("tabulated values must lie in [0, 1]")
        if "a" in self.table:
            a = np.asarray(self.table["a"], dtype=float)
            if vals.shape != (r.size, a.size, a.size):
                raise ValueError("tabulated values must have shape (len(r), len(a), len(a))")
            if not np.allclose(vals, np.swapaxes(vals, 1, 2), atol=0, rtol=0):
                raise ValueError("tabulated values must be symmetric in (a, b)")
            interp = RegularGridInterpolator((r, a, a), vals, bounds_error=False, fill_value=None)
        else:
            if vals.shape != r.shape:
                raise ValueError("tabulated values must match the r grid")
            interp = None
        object.__setattr__(self, "_interp", interp)

    # ------------------------------------------------------------------
    @property
    def weighted(self) -> bool:
        if self.kind == "tabulated":
            return "a" in self.table
        return FORMS[self.kind][2]

    def phi(self, r, a=1.0, b=1.0) -> np.ndarray:
        """Vectorised ``phi`` without domain checks (hot path)."""
        r = np.asarray(r, dtype=float)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "tabulated":
            out = self._eval_table(r, a, b)
        else:
            fn = FORMS[self.kind][0]
            out = np.asarray(fn(r, a, b, self.params), dtype=float)
            out = np.broadcast_to(out, np.broadcast(r, a, b).shape)
        if self.reach is not None:
            out = np.where(r > self.reach(np.minimum(a, b)), 0.0, out)
        return np.clip(out, 0.0, 1.0)

    def _eval_table(self, r, a, b):
        rg = np.asarray(self.table["r"], dtype=float)
        vals = np.asarray(self.table["values"], dtype=float)
        if self._interp is None:
            out = np.interp(r, rg, vals, right=vals[-1])
            return np.broadcast_to(out, np.broadcast(r, a, b).shape)
        ag = np.asarray(self.table["a"], dtype=float)
        rr, aa, bb = np.broadcast_arrays(r, a, b)
        pts = np.stack([np.minimum(rr, rg[-1]), np.clip(aa, ag[0], ag[-1]),
                        np.clip(bb, ag[0], ag[-1])], axis=-1)
        lo = np.minimum(pts[..., 1], pts[..., 2])
        hi = np.maximum(pts[..., 1], pts[..., 2])
        pts[..., 1], pts[..., 2] = lo, hi  # exact symmetry
        return self._interp(pts)

    def max_range(self, a_max: float = 1.0) -> float:
        """Distance beyond which ``phi`` vanishes for weights up to ``a_max``."""
        if self.kind == "zero":
            return 0.0
        bound = math.inf
        if self.kind == "gilbert":
            bound = self.params["radius"]
        if self.kind == "tabulated":
            rg = np.asarray(self.table["r"])
            vals = np.asarray(self.table["values"])
            if np.all(vals.reshape(rg.size, -1)[-1] == 0):
                bound = float(rg[-1])
        if self.reach is not None:
            bound = min(bound, float(self.reach(a_max)))
        return bound

    def typical_range(self) -> float:
        """Radius where ``phi(r; 1, 1)`` falls to 1/2 (bisection); used as a boundary margin."""
        if self.phi(0.0) < 0.5:
            return 0.0
        lo, hi = 0.0, 1.0
        while self.phi(hi) >= 0.5:
            hi *= 2.0
            if hi > 1e12:
                return math.inf
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.phi(mid) >= 0.5:
                lo = mid
            else:
                hi = mid
        return lo

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dimension": int(self.dimension)}
        if self.kind == "tabulated":
            out["table"] = {k: np.asarray(v).tolist() for k, v in self.table.items()}
        else:
            out.update(self.params)
        if self.reach is not None:
            out["reach"] = self.reach.to_dict()
        return out


def eval_adjacency(spec: AdjacencySpec, r, a=1.0, b=1.0):
    """Evaluate ``phi(r; a, b)`` with domain checks.

    Raises
    ------
    DomainError
        If ``r < 0`` or a weight is below 1.
    """
    r_arr = np.asarray(r, dtype=float)
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if np.any(r_arr < 0) or np.any(np.isnan(r_arr)):
        raise DomainError("distance must be non-negative")
    if np.any(a_arr < 1) or np.any(b_arr < 1):
        raise DomainError("weights must be at least 1")
    out = spec.phi(r_arr, a_arr, b_arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    """Full description of a weighted random connection model in a box ``[-L, L]^d``."""

    adjacency: AdjacencySpec
    weights: WeightDistribution = field(default_factory=WeightDistribution.point)
    intensity: float = 1.0
    box: float = 10.0

    def __post_init__(self):
        if not self.intensity >= 0:
            raise ValueError("intensity must be non-negative")
        if not self.box > 0:
            raise ValueError("box half-width must be positive")

    @property
    def dimension(self) -> int:
        return int(self.adjacency.dimension)

    def with_(self, **changes) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, **changes)

    def to_dict(self) -> dict:
        adj = self.adjacency.to_dict()
        reach = adj.pop("reach", None)
        out = {"dimension": self.dimension, "intensity": self.intensity, "box": self.box,
               "adjacency": {k: v for k, v in adj.items() if k != "dimension"},
               "weights": self.weights.to_dict()}
        if reach is not None:
            out["reach"] = reach
        return out


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    A1_ok: bool
    A2_ok: bool
    A3_ok: bool
    violations: list

    def to_json(self) -> str:
        return json.dumps({"A1_ok": self.A1_ok, "A2_ok": self.A2_ok, "A3_ok": self.A3_ok,
                           "violations": self.violations}, indent=2)


def check_assumptions(spec: AdjacencySpec, r_grid: Sequence[float],
                      a_grid: Sequence[float] = (1.0,), b_grid: Optional[Sequence[float]] = None,
                      tol: float = MONO_TOL) -> AssumptionReport:
    """Scan a grid for violations of monotonicity in ``r`` and in the weights.

    Isotropy holds by construction since ``phi`` only sees the distance.
    Violations are reported for consecutive grid points, which is where any
    failure of monotonicity must show up.
    """
    r = np.asarray(r_grid, dtype=float)
    a = np.asarray(a_grid, dtype=float)
    b = a if b_grid is None else np.asarray(b_grid, dtype=float)
    if np.any(np.diff(r) <= 0) or np.any(np.diff(a) <= 0) or np.any(np.diff(b) <= 0):
        raise ValueError("grids must be sorted and strictly increasing")
    R, A, B = np.meshgrid(r, a, b, indexing="ij")
    vals = spec.phi(R, A, B)
    violations = []
    # A.2: non-increasing in r
    inc = np.argwhere(vals[:-1] < vals[1:] - tol)
    for i, j, k in inc:
        violations.append({"assumption": "A2", "r1": r[i], "r2": r[i + 1], "a": a[j], "b": b[k],
                           "phi1": float(vals[i, j, k]), "phi2": float(vals[i + 1, j, k])})
    a2 = len(inc) == 0
    # A.3: non-decreasing in the first weight, and symmetric
    dec = np.argwhere(vals[:, 1:, :] < vals[:, :-1, :] - tol)
    for i, j, k in dec:
        violations.append({"assumption": "A3", "r": r[i], "a1": a[j], "a2": a[j + 1], "b": b[k],
                           "phi1": float(vals[i, j, k]), "phi2": float(vals[i, j + 1, k])})
    swapped = spec.phi(R, B, A)
    asym = np.argwhere(np.abs(vals - swapped) > 0)
    for i, j, k in asym:
        violations.append({"assumption": "A3-symmetry", "r": r[i], "a": a[j], "b": b[k]})
    a3 = len(dec) == 0 and len(asym) == 0
    for v in violations:
        for key, val in v.items():
            if isinstance(val, np.floating):
                v[key] = float(val)
    return AssumptionReport(True, a2, a3, violations)


# ---------------------------------------------------------------------------
# neighbourhood integrals
# ---------------------------------------------------------------------------


def _iota(spec: AdjacencySpec, weights: WeightDistribution, r: float, a: float) -> float:
    """``int phi(r; a, b) pi(db)``."""
    if not spec.weighted or weights.kind == "point":
        return float(spec.phi(r, a, 1.0))
    if weights.kind == "discrete":
        return float(np.dot(weights.probs, spec.phi(r, a, np.asarray(weights.atoms))))
    hi = weights.support_max
    pts = None
    if spec.reach is not None and spec.reach.kind == "linear":
        # phi(r; a, b) switches off below b = r / scale
        knot = r / spec.reach.scale
        if 1.0 < knot < min(hi, 1e300):
            pts = [knot]
    f = lambda b: float(spec.phi(r, a, b)) * float(weights.density(b))
    if math.isinf(hi):
        if pts:
            v1, _ = integrate.quad(f, 1.0, pts[0], epsabs=1e-12, epsrel=1e-10, limit=200)
            v2, _ = integrate.quad(f, pts[0], math.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
            return v1 + v2
        v, _ = integrate.quad(f, 1.0, math.inf, epsabs=1e-12, epsrel=1e-10, limit=200)
        return v
    v, _ = integrate.quad(f, 1.0, hi, points=pts, epsabs=1e-12, epsrel=1e-10, limit=200)
    return v


def neighborhood_integral(spec: AdjacencySpec, weights: WeightDistribution, a: float = 1.0,
                          tol: float = 1e-8, tail_tol: float = 1e-10,
                          divergence_bound: float = 1e8, max_blocks: int = 400) -> float:
    """``int_0^inf iota(r; a) r^(d-1) dr`` with ``iota(r; a) = int phi(r; a, b) pi(db)``.

    Finite-range functions are integrated up to their range.  Otherwise the
    radial axis is split into doubling blocks ``[R, 2R]`` and integration
    stops once the geometric extrapolation of the block increments,
    ``inc * rho / (1 - rho)``, falls below ``tail_tol``.

    Raises
    ------
    DivergenceError
        If the partial integral exceeds ``divergence_bound`` or the block
        increments stop shrinking.
    """
    if a < 1:
        raise DomainError("weight must be at least 1")
    d = spec.dimension
    g = lambda r: _iota(spec, weights, r, a) * r ** (d - 1)
    opts = dict(epsabs=tol * 1e-2, epsrel=1e-10, limit=400)
    top = spec.max_range(a)
    if math.isfinite(top):
        if top <= 0:
            return 0.0
        pts = None
        if spec.weighted and spec.reach is not None and weights.kind == "discrete":
            knots = [float(spec.reach(m)) for m in weights.atoms]
            pts = sorted({k for k in knots if 0 < k < top}) or None
        val, _ = integrate.quad(g, 0.0, top, points=pts, **opts)
        return float(val)
    total, _ = integrate.quad(g, 0.0, 1.0, **opts)
    lo, prev, growing = 1.0, None, 0
    for _ in range(max_blocks):
        inc, _ = integrate.quad(g, lo, 2.0 * lo, **opts)
        total += inc
        if total > divergence_bound:
            raise DivergenceError("neighbourhood integral exceeds the divergence bound", total)
        if prev is not None and prev > 0:
            rho = inc / prev
            if rho >= 1.0:
                growing += 1
                if growing >= 8:
                    raise DivergenceError("block increments are not decreasing", total)
            else:
                growing = 0
                if inc * rho / (1.0 - rho) < tail_tol:
                    return float(total)
        elif prev is not None and inc == 0.0:
            return float(total)
        prev = inc
        lo *= 2.0
    raise DivergenceError("tail did not settle within the block budget", total)


@dataclass
class NBBounds:
    I_inf: float
    I_sup: float
    ok: bool
    certified: bool = False
    sup_upper: float = math.inf
    diverged: bool = False
    a_grid: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("I_inf", "I_sup", "ok", "certified", "sup_upper", "diverged", "a_grid")}


def nb_bounds(spec: AdjacencySpec, weights: WeightDistribution,
              a_grid: Optional[Sequence[float]] = None, grid_size: int = 24, **quad) -> NBBounds:
    """Lower and upper neighbourhood integrals over a grid of weights.

    ``certified`` records whether the grid supremum is provably the
    supremum: always for non-weighted functions, and for bounded weights since
    the integral is non-decreasing in ``a`` and the grid ends at the top of the
    support.  For reach-limited functions ``sup_upper = E[R(m)^d] / d`` is a
    rigorous bound valid for every ``a``.
    """
    d = spec.dimension
    if a_grid is None:
        if spec.weighted:
            cap = weights.quantile_cap(1e-9)
            a_grid = np.unique(np.concatenate([[1.0], np.geomspace(1.0, cap, grid_size)]))
        else:
            a_grid = [1.0]
    a_grid = [float(x) for x in a_grid]
    try:
        I_inf = neighborhood_integral(spec, weights, 1.0, **quad)
        values = [neighborhood_integral(spec, weights, x, **quad) if x != 1.0 else I_inf
                  for x in a_grid]
    except DivergenceError:
        return NBBounds(math.nan, math.inf, False, diverged=True, a_grid=a_grid)
    I_sup = max([I_inf] + values)
    certified = (not spec.weighted) or (weights.is_bounded and max(a_grid) >= weights.support_max)
    sup_upper = math.inf
    if spec.reach is not None:
        try:
            sup_upper = weights.expect(lambda m: spec.reach(m) ** d) / d
        except Exception:  # pragma: no cover - heavy tails
            sup_upper = math.inf
    if certified:
        sup_upper = min(sup_upper, I_sup)
    ok = bool(0 < I_inf <= I_sup < math.inf)
    return NBBounds(float(I_inf), float(I_sup), ok, bool(certified), float(sup_upper), False, a_grid)


def gw_bounds(spec: AdjacencySpec, weights: WeightDistribution, lam: float,
              I_sup: Optional[float] = None) -> dict:
    """Branching-process bounds: ``lambda_T >= 1/(s_d I_sup)`` and the susceptibility series."""
    if I_sup is None:
        nb = nb_bounds(spec, weights)
        if not nb.ok:
            raise DivergenceError("neighbourhood bounds are not finite")
        I_sup = nb.I_sup
    s_d = sphere_area(spec.dimension)
    rate = lam * s_d * I_sup
    chi = 1.0 / (1.0 - rate) if rate < 1.0 else math.inf
    return {"lambda_T_lower": 1.0 / (s_d * I_sup), "chi_upper": chi, "s_d": s_d,
            "I_sup": I_sup, "branching_rate": rate}


# ---------------------------------------------------------------------------
# exponential moment check
# ---------------------------------------------------------------------------


@dataclass
class EMCResult:
    finite: bool
    partial_sum: float
    log_partial_sum: float
    inconclusive: bool = False
    detail: str = ""

    def to_dict(self) -> dict:
        return {"finite": self.finite, "partial_sum": self.partial_sum,
                "log_partial_sum": self.log_partial_sum, "inconclusive": self.inconclusive,
                "detail": self.detail}


def emc_check(reach: Reach, weights: WeightDistribution, C: float, eps: float, d: int = 2,
              cutoff_log: float = 60.0, window: int = 6, ratio_max: float = 0.9) -> EMCResult:
    """Check ``int exp(C R(m)^(d+eps)) pi(dm) < inf``.

    Bounded laws are finite outright.  For a Pareto tail the integral is
    split into unit blocks in ``s = log m`` up to ``s = cutoff_log``.  The
    ratio test: finite if the last ``window`` block ratios are all at most
    ``ratio_max`` (geometric tail); infinite if the blocks are growing at the
    cutoff or a block overflows; inconclusive otherwise.
    """
    q = d + eps
    if weights.kind == "point":
        val = math.exp(C * float(reach(1.0)) ** q)
        return EMCResult(True, val, math.log(val), detail="point mass")
    if weights.kind == "discrete":
        logs = C * reach(np.asarray(weights.atoms)) ** q + np.log(np.maximum(weights.probs, 1e-300))
        logs = logs[np.asarray(weights.probs) > 0]
        lse = float(special.logsumexp(logs))
        return EMCResult(True, math.exp(lse) if lse < 700 else math.inf, lse, detail="finite support")

    alpha = weights.alpha
    norm = weights._pareto_norm()
    top = math.log(weights.m_max) if weights.m_max is not None else cutoff_log

    def log_f(s):  # integrand in s = log m, including the Jacobian
        m = np.exp(s)
        return C * reach(m) ** q + math.log(alpha / norm) - alpha * s

    edges = np.arange(0.0, top, 1.0)
    edges = np.append(edges, top)
    block_logs = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        s = np.linspace(lo, hi, 257)
        lf = log_f(s)
        w = np.full(s.size, (hi - lo) / (s.size - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        block_logs.append(float(special.logsumexp(lf, b=w)))
    block_logs = np.array(block_logs)
    lse = float(special.logsumexp(block_logs))
    partial = math.exp(lse) if lse < 700 else math.inf
    if weights.m_max is not None:
        return EMCResult(True, partial, lse, detail="bounded support")
    if lse > 700:
        return EMCResult(False, partial, lse, detail="partial sum overflows")
    ratios = np.exp(np.diff(block_logs[-(window + 1):]))
    if np.all(ratios <= ratio_max):
        return EMCResult(True, partial, lse, detail=f"last {window} block ratios <= {ratio_max}")
    if np.all(ratios >= 1.0):
        return EMCResult(False, partial, lse, detail="block increments growing at the cutoff")
    return EMCResult(False, partial, lse, inconclusive=True, detail="ratio test ambiguous")
