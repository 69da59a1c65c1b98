"""Tail of the origin cluster for the Gilbert disk model below the branching
bound, with the susceptibility against 1 / (1 - lam pi).

    python demos/subcritical_tail.py [samples]
"""

import math
import sys

from rcmlab.estimators import estimate_chi, estimate_tail, fit_exponential_rate
from rcmlab.model import AdjacencySpec, ModelSpec, gw_bounds


def main(samples=20000):
    model = ModelSpec(AdjacencySpec("gilbert", 2, {"radius": 1.0}), intensity=0.2, box=20.0)
    curve = estimate_tail(model, 0.2, 20.0, 12, samples, seed=1)
    for k, t, s in zip(curve.k, curve.theta, curve.stderr):
        print(f"theta({k:2d}) = {t:.5f} +- {s:.5f}")
    fit = fit_exponential_rate(curve, window=(2, 7))
    print(f"log-linear fit on k in [2, 7]: slope {fit.slope:.3f}, r2 {fit.r2:.4f}")

    chi = estimate_chi(model, 0.2, 20.0, samples, seed=2).estimate
    bound = gw_bounds(model.adjacency, model.weights, 0.2)["chi_upper"]
    print(f"chi(0.2) = {chi.mean:.4f} +- {chi.stderr:.4f}, branching bound {bound:.4f} "
          f"(1/(1 - 0.2 pi) = {1 / (1 - 0.2 * math.pi):.4f})")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
