"""Command-line front end.

Every command reads a YAML config (``model`` / ``experiment`` / ``output``
sections), writes a JSON manifest before any result file and rewrites it
with the wall time once the results are in.  Flags override config values,
which override defaults.

Exit codes: 0 on success, 1 on usage or config errors, 2 when a check
fails (a ``failure.json`` is written next to the manifest).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
import tempfile
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import estimators as est
from .config import REQUIRED, ConfigError, file_hash, load_config
from .continuum import cluster_labels, model_hash, sample_ppp, with_origin
from .estimators import csv_text
from .model import (DivergenceError, check_assumptions, emc_check, gw_bounds, nb_bounds)

COMMANDS = ("sample", "render", "tail", "chi", "scan", "fit", "converge", "osss-verify",
            "oracle-fixtures", "bounds", "diagnose-ratios", "dominate")

# sample/render and tail/fit share a schema so one config serves both commands
REALIZATION = {"seed": 0, "samples": 1, "origin": False, "size_px": 800, "weighted": None}
TAIL = {"seed": 0, "samples": 1000, "lam": None, "L": None, "k_max": 40, "window": [5, 40],
        "min_r2": 0.98}

SCHEMAS = {
    "sample": REALIZATION,
    "render": REALIZATION,
    "tail": TAIL,
    "chi": {"seed": 0, "samples": 1000, "lam": None, "L": None, "size_cap": 10 ** 6,
            "differential": None},
    "scan": {"seed": 0, "samples": 400, "lams": REQUIRED, "Ls": REQUIRED, "resamples": 1000,
             "margin": None, "supercritical": None},
    "fit": TAIL,
    "converge": {"seed": 0, "samples": 1000, "lam": None, "L": 3, "ns": [0, 1, 2, 3], "k": 3,
                 "gamma": 0.1, "influence_samples": 0, "russo_samples": 0,
                 "truncation_tol": 1e-6},
    "osss-verify": {"seed": 0, "fixtures": None, "lam": 1.0, "gamma": 0.5, "k": 2,
                    "monte_carlo": None},
    "oracle-fixtures": {"lam": 1.0, "gamma": 0.5, "k": 2},
    "bounds": {"r_max": 5.0, "r_points": 200, "a_grid": None, "emc": None},
    "diagnose-ratios": {"seed": 0, "samples": 1000, "lam": None, "gamma": 0.1, "ms": [1, 2, 4, 8],
                        "k": 3, "L": 3, "n": 1, "resamples": 1000},
    "dominate": {"seed": 0, "samples": 1000, "lam": None, "B": REQUIRED, "eps": REQUIRED,
                 "r2": REQUIRED, "box": None},
}

MC_KEYS = {"L": 8, "n": 0, "lam": 0.5, "gammas": [0.05, 0.2], "samples": 1000,
           "inequality_samples": None, "k": 3,
           "gamma": 0.5, "identity": True, "inequalities": True}
SUPER_KEYS = {"samples": 1000, "Ls": [10, 20, 40], "factor": 1.5, "span": 0.3, "points": 7,
              "lambda_hat": None}
DIFF_KEYS = {"lams": REQUIRED, "k": 5, "samples": None}

NO_CONFIG = {"oracle-fixtures", "osss-verify"}


class UsageError(Exception):
    """Bad command line."""


class CheckFailed(Exception):
    """An assertion-style check failed; ``detail`` goes to ``failure.json``."""

    def __init__(self, check: str, detail: dict):
        super().__init__(check)
        self.check = check
        self.detail = detail


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcmlab", description="Weighted random connection model experiments.")
    p.add_argument("--version", action="version", version=f"rcmlab {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name, help=f"run the {name} command")
        s.add_argument("--config", type=Path, required=name not in NO_CONFIG,
                       help="YAML config file")
        _common(s)
    r = sub.add_parser("rerun", help="repeat a run from its manifest")
    r.add_argument("manifest", type=Path)
    _common(r)
    return p


def _common(s):
    s.add_argument("--seed", type=_seed, default=None, help="128-bit seed (decimal or 0x hex)")
    s.add_argument("--threads", type=int, default=None, help="maximum worker processes")
    s.add_argument("--out", type=Path, default=None, help="output directory")
    s.add_argument("--format", choices=("csv", "json"), default=None,
                   help="format of the aggregated results")
    s.add_argument("--samples", type=int, default=None, help="number of replicas")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}")
    if not 0 <= v < 2 ** 128:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^128)")
    return v


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------


class Run:
    """Output directory, manifest bookkeeping and the resolved settings of one command."""

    def __init__(self, command: str, args, config_path: Optional[Path], config_text: Optional[str]):
        self.command = command
        self.config_path = config_path
        self.config_text = config_text
        if config_path is not None:
            self.model, self.exp, self.out_cfg = load_config(config_path, SCHEMAS[command])
            self.config_hash = file_hash(config_path)
        else:
            self.model, self.exp, self.out_cfg = None, _defaults(SCHEMAS[command]), {"dir": "out", "format": "csv"}
            self.config_hash = None
        if args.seed is not None and "seed" in self.exp:
            self.exp["seed"] = args.seed
        if args.samples is not None:
            if args.samples < 2 and command not in ("sample", "render"):
                raise UsageError("--samples must be at least 2")
            self.exp["samples"] = args.samples
        self.format = args.format or self.out_cfg.get("format", "csv")
        if self.format not in ("csv", "json"):
            raise ConfigError("output.format must be csv or json")
        self.dir = Path(args.out if args.out is not None else self.out_cfg.get("dir", "out"))
        self.threads = args.threads or 1
        est.set_threads(self.threads)
        self.outputs: dict = {}
        self.timings: dict = {}  # seconds per phase, for commands with several stages
        self.started = None
        self.t0 = None

    @property
    def seed(self) -> int:
        return int(self.exp.get("seed", 0))

    def lam(self) -> float:
        v = self.exp.get("lam")
        return float(self.model.intensity if v is None else v)

    def box(self) -> float:
        v = self.exp.get("L")
        return float(self.model.box if v is None else v)

    def manifest(self, status: str) -> dict:
        m = {"artifact_version": __version__, "command": self.command, "status": status,
             "config_path": None if self.config_path is None else str(self.config_path),
             "config_hash": self.config_hash, "config_text": self.config_text,
             "seed": str(self.seed), "experiment": _jsonable(self.exp), "format": self.format,
             "threads": self.threads, "started": self.started,
             "outputs": dict(sorted(self.outputs.items()))}
        if self.model is not None:
            m["model_hash"] = model_hash(self.model)
        if self.t0 is not None and status != "running":
            m["finished"] = _now()
            m["wall_time"] = time.perf_counter() - self.t0
            if self.timings:
                m["timings"] = dict(self.timings)
        return m

    def begin(self, planned) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.started = _now()
        self.t0 = time.perf_counter()
        for name in planned:
            self.outputs[name] = name
        self._write_manifest("running")

    def _write_manifest(self, status: str) -> None:
        (self.dir / "manifest.json").write_text(json.dumps(self.manifest(status), indent=2,
                                                           sort_keys=True) + "\n", encoding="utf-8")

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        path.write_text(text, encoding="utf-8")
        self.outputs[name] = name
        return path

    def write_json(self, name: str, data) -> Path:
        return self.write(name, json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")

    def results(self, rows_header, rows, data) -> None:
        """Aggregated results in the requested format."""
        if self.format == "csv":
            self.write("results.csv", csv_text(rows_header, rows))
        else:
            self.write_json("results.json", data)

    def finish(self, status: str = "ok") -> None:
        # drop planned names that were never produced
        self.outputs = {k: v for k, v in self.outputs.items() if (self.dir / v).exists()}
        self._write_manifest(status)


def _defaults(schema: dict) -> dict:
    return {k: v for k, v in schema.items() if v is not REQUIRED}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    return x


def _section(run: Run, key: str, schema: dict) -> Optional[dict]:
    data = run.exp.get(key)
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"experiment.{key}: expected a mapping")
    problems = []
    for k in sorted(set(data) - set(schema)):
        problems.append(f"experiment.{key}.{k}: unknown key")
    out = {}
    for k, v in schema.items():
        if k in data:
            out[k] = data[k]
        elif v is REQUIRED:
            problems.append(f"experiment.{key}.{k}: missing required key")
        else:
            out[k] = v
    if problems:
        raise ConfigError("; ".join(problems))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_sample(run: Run) -> None:
    names = []
    for r in range(int(run.exp["samples"])):
        names += [f"points_{r}.csv", f"header_{r}.json", f"clusters_{r}.csv"]
    run.begin(names)
    for r in range(int(run.exp["samples"])):
        cfg = (with_origin if run.exp["origin"] else sample_ppp)(run.model, run.seed, r)
        run.write(f"points_{r}.csv", cfg.to_csv())
        run.write_json(f"header_{r}.json", cfg.header())
        labels = cluster_labels(cfg)
        run.write(f"clusters_{r}.csv", csv_text(["id", "cluster"], enumerate(labels.tolist())))


def cmd_render(run: Run) -> None:
    from .render import render_svg
    n = int(run.exp["samples"])
    run.begin([f"realization_{r}.svg" for r in range(n)])
    for r in range(n):
        cfg = (with_origin if run.exp["origin"] else sample_ppp)(run.model, run.seed, r)
        run.write(f"realization_{r}.svg",
                  render_svg(cfg, int(run.exp["size_px"]), run.exp["weighted"]))


def cmd_tail(run: Run) -> None:
    run.begin(["replicas.csv", f"results.{run.format}"])
    curve = est.estimate_tail(run.model, run.lam(), run.box(), int(run.exp["k_max"]),
                              int(run.exp["samples"]), run.seed)
    run.write("replicas.csv", curve.replicas_csv())
    rows = [(int(k), t, s, curve.samples) for k, t, s in zip(curve.k, curve.theta, curve.stderr)]
    run.results(["k", "theta", "stderr", "samples"], rows,
                {"lam": curve.lam, "L": curve.L, "k": curve.k, "theta": curve.theta,
                 "stderr": curve.stderr, "samples": curve.samples})
    if not curve.is_monotone():
        raise CheckFailed("tail-monotone", {"theta": curve.theta})


def cmd_chi(run: Run) -> None:
    diff = _section(run, "differential", DIFF_KEYS)
    run.begin(["replicas.csv", f"results.{run.format}"] + (["differential.csv"] if diff else []))
    lam = run.lam()
    with np.errstate(all="ignore"):
        res = est.estimate_chi(run.model, lam, run.box(), int(run.exp["samples"]), run.seed,
                               int(run.exp["size_cap"]))
    run.write("replicas.csv", csv_text(["replica", "size"], enumerate(res.sizes.tolist())))
    bound = _chi_bound(run.model, lam)
    e = res.estimate
    run.results(["lam", "chi", "stderr", "samples", "cap_fraction", "chi_upper"],
                [(lam, e.mean, e.stderr, e.samples, res.cap_fraction, bound)],
                {"lam": lam, **e.to_dict(), "cap_fraction": res.cap_fraction, "chi_upper": bound,
                 "warning": res.warning})
    if diff:
        samples = int(diff["samples"] or run.exp["samples"])
        d = est.differential_inequality(run.model, diff["lams"], run.box(), int(diff["k"]),
                                        samples, run.seed)
        run.write("differential.csv", d["csv"])
    if math.isfinite(bound) and e.mean > bound + 3 * e.stderr:
        raise CheckFailed("chi-upper-bound", {"chi": e.mean, "stderr": e.stderr, "bound": bound})


def _chi_bound(model, lam) -> float:
    try:
        return float(gw_bounds(model.adjacency, model.weights, lam)["chi_upper"])
    except DivergenceError:
        return math.inf


def cmd_scan(run: Run) -> None:
    sup = _section(run, "supercritical", SUPER_KEYS)
    extra = ["supercritical.csv", "supercritical_fit.csv", "supercritical_summary.csv"]
    run.begin(["curves.csv", f"results.{run.format}"] + (extra if sup else []))
    failure = None
    try:
        t0 = time.perf_counter()
        crit = est.locate_critical(run.model, run.exp["lams"], run.exp["Ls"],
                                   int(run.exp["samples"]), run.seed, int(run.exp["resamples"]),
                                   run.exp["margin"])
    except est.BracketError as exc:
        raise CheckFailed("bracket", {"message": str(exc)})
    run.timings["locate_critical"] = time.perf_counter() - t0
    run.write("curves.csv", crit.curves_csv())
    data = crit.to_dict()
    if not crit.above_floor:
        failure = ("critical-floor", data)
    if sup:
        lam_hat = crit.lambda_hat if sup["lambda_hat"] is None else float(sup["lambda_hat"])
        t0 = time.perf_counter()
        prof = est.supercritical_profile(run.model, lam_hat, sup["Ls"], int(sup["samples"]),
                                         run.seed, float(sup["factor"]), float(sup["span"]),
                                         int(sup["points"]), run.exp["margin"])
        run.timings["supercritical_profile"] = time.perf_counter() - t0
        run.write("supercritical.csv", prof.to_csv())
        run.write("supercritical_fit.csv", prof.fit_csv())
        run.write("supercritical_summary.csv", prof.summary_csv())
        data["supercritical"] = prof.to_dict()
        low = [e.mean for e in prof.reach_check if e.mean < 0.5]
        if failure is None and (low or prof.fit.slope <= 0):
            failure = ("supercritical", prof.to_dict())
    run.results(["lambda_hat", "ci_low", "ci_high", "sigma", "lambda_T_lower"],
                [(crit.lambda_hat, crit.ci[0], crit.ci[1], crit.sigma, crit.lambda_T_lower)], data)
    if failure:
        raise CheckFailed(*failure)


def cmd_fit(run: Run) -> None:
    run.begin(["tail.csv", f"results.{run.format}"])
    curve = est.estimate_tail(run.model, run.lam(), run.box(), int(run.exp["k_max"]),
                              int(run.exp["samples"]), run.seed)
    run.write("tail.csv", curve.to_csv())
    try:
        fit = est.fit_exponential_rate(curve, tuple(run.exp["window"]))
    except est.FitError as exc:
        raise CheckFailed("fit", {"message": str(exc)})
    d = fit.to_dict()
    run.results(["slope", "intercept", "r2", "slope_stderr"],
                [(fit.slope, fit.intercept, fit.r2, fit.slope_stderr)], d)
    if not (fit.slope < 0 and fit.r2 >= float(run.exp["min_r2"])):
        raise CheckFailed("fit-quality", d)


def cmd_converge(run: Run) -> None:
    run.begin(["diffs.csv", f"results.{run.format}"])
    e = run.exp
    tab = est.convergence_study(run.model, run.lam(), int(e["L"]), list(e["ns"]), int(e["k"]),
                                float(e["gamma"]), int(e["samples"]), run.seed,
                                int(e["influence_samples"]), int(e["russo_samples"]),
                                float(e["truncation_tol"]))
    run.write("diffs.csv", csv_text(["replica"] + [f"n{n}" for n in e["ns"]],
                                    [(r, *row) for r, row in enumerate(tab.diffs.tolist())]))
    if run.format == "csv":
        run.write("results.csv", tab.to_csv())
    else:
        run.write_json("results.json", {"rows": [r.__dict__ for r in tab.rows]})
    problems = {}
    if not tab.gap_non_increasing():
        problems["gap"] = [r.gap for r in tab.rows]
    if any(r.mismatches for r in tab.rows):
        problems["mismatches"] = [r.mismatches for r in tab.rows]
    if int(e["influence_samples"]) and not tab.influence_decreasing():
        problems["influence"] = [r.influence_sum for r in tab.rows]
    if problems:
        raise CheckFailed("convergence", problems)


def cmd_osss_verify(run: Run) -> None:
    from .oracle import TinyInstance, build_fixtures
    from .osss import (FORMAL, UNIFORM, identity_check, osss_check, osss_monte_carlo,
                       vertex_edge_exact, vertex_edge_monte_carlo)
    from .lattice import build_lattice
    mc = _section(run, "monte_carlo", MC_KEYS)
    planned = ["slack.csv", f"results.{run.format}"]
    if mc:
        planned += ["identity.csv", "monte_carlo.csv"]
    run.begin(planned)
    e = run.exp
    if e["fixtures"]:
        data = json.loads(Path(e["fixtures"]).read_text(encoding="utf-8"))
    else:
        data = _shipped_fixtures()
    lam, gamma, k = float(data.get("lam", e["lam"])), float(data.get("gamma", e["gamma"])), int(data.get("k", e["k"]))
    rows = []
    bad = []
    for name in sorted(data["instances"]):
        tiny = TinyInstance.from_dict(data["instances"][name]["instance"])
        for mode in (FORMAL, UNIFORM):
            rep = osss_check(tiny, lam, gamma, k, mode)
            ve = vertex_edge_exact(tiny, lam, k, gamma * k, mode)
            for label, r in (("osss", rep), ("vertex-edge", ve)):
                rows.append((name, mode, label, r.lhs, r.rhs, r.slack))
                if not r.holds():
                    bad.append((name, mode, label, r.slack))
    run.write("slack.csv", csv_text(["instance", "root_mode", "inequality", "lhs", "rhs", "slack"], rows))
    results = {"exact": [dict(zip(["instance", "root_mode", "inequality", "lhs", "rhs", "slack"], r))
                         for r in rows]}
    if mc:
        if run.model is None:
            raise ConfigError("monte_carlo section needs a model section")
        spec = build_lattice(run.model, int(mc["L"]), int(mc["n"]), intensity=float(mc["lam"]))
        # --samples overrides the replica count of the Monte Carlo section
        samples = int(e.get("samples") or mc["samples"])
        id_rows, mc_rows = [], []
        if mc["identity"]:
            t0 = time.perf_counter()
            for chk in identity_check(spec, float(mc["lam"]), mc["gammas"], samples, run.seed):
                z = chk.z
                for v in range(spec.n_vertices):
                    id_rows.append((chk.gamma, v, chk.revealment[v], chk.magnetization[v],
                                    chk.sigma[v], z[v]))
                fails = chk.failures()
                if fails.size:
                    bad.append(("identity", chk.gamma, int(fails.size), chk.max_abs_z()))
            run.timings["identity"] = time.perf_counter() - t0
        run.write("identity.csv", csv_text(["gamma", "vertex", "revealment", "magnetization",
                                            "sigma", "z"], id_rows))
        if mc["inequalities"]:
            samples = int(e.get("samples") or mc["inequality_samples"] or samples)
            t0 = time.perf_counter()
            for mode in (FORMAL, UNIFORM):
                o = osss_monte_carlo(spec, float(mc["lam"]), float(mc["gamma"]) / int(mc["k"]),
                                     int(mc["k"]), samples, run.seed, mode)
                p = vertex_edge_monte_carlo(spec, float(mc["lam"]), int(mc["k"]), float(mc["gamma"]),
                                      samples, run.seed, mode)
                for label, r in (("osss", o), ("vertex-edge", p)):
                    mc_rows.append((mode, label, r.lhs, r.rhs, r.slack, r.sigma))
                    if not r.holds():
                        bad.append(("mc", mode, label, r.slack, r.sigma))
            run.timings["inequalities"] = time.perf_counter() - t0
        run.write("monte_carlo.csv", csv_text(["root_mode", "inequality", "lhs", "rhs", "slack",
                                               "sigma"], mc_rows))
        results["monte_carlo"] = mc_rows
    if run.format == "csv":
        run.write("results.csv", csv_text(["checks", "failures"], [(len(rows), len(bad))]))
    else:
        run.write_json("results.json", results)
    if bad:
        raise CheckFailed("slack", {"failures": bad})


def _shipped_fixtures() -> dict:
    path = Path(__file__).parent / "data" / "oracle_fixtures.json"
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    from .oracle import build_fixtures
    return build_fixtures()


def cmd_oracle_fixtures(run: Run) -> None:
    from .oracle import build_fixtures
    run.begin(["oracle_fixtures.json"])
    data = build_fixtures(float(run.exp["lam"]), float(run.exp["gamma"]), int(run.exp["k"]))
    run.write("oracle_fixtures.json", json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_bounds(run: Run) -> None:
    run.begin(["assumptions.json", f"results.{run.format}"])
    m = run.model
    adj = m.adjacency
    r = np.linspace(0.0, float(run.exp["r_max"]), int(run.exp["r_points"]))[1:]
    a = run.exp["a_grid"]
    if a is None:
        top = m.weights.support_max
        a = [1.0] if not adj.weighted else list(np.linspace(1.0, min(top, 10.0), 10))
    rep = check_assumptions(adj, r, a)
    run.write("assumptions.json", rep.to_json() + "\n")
    nb = nb_bounds(adj, m.weights)
    out = {"nb": nb.to_dict()}
    if nb.ok:
        out["gw"] = gw_bounds(adj, m.weights, m.intensity, nb.I_sup)
    emc = run.exp["emc"]
    if emc is not None and adj.reach is not None:
        out["emc"] = emc_check(adj.reach, m.weights, float(emc["C"]), float(emc["eps"]),
                               m.dimension).to_dict()
    gw = out.get("gw", {})
    run.results(["I_inf", "I_sup", "ok", "lambda_T_lower", "chi_upper"],
                [(nb.I_inf, nb.I_sup, nb.ok, gw.get("lambda_T_lower", math.nan),
                  gw.get("chi_upper", math.nan))], out)


def cmd_diagnose_ratios(run: Run) -> None:
    run.begin([f"results.{run.format}", "fit.json"])
    e = run.exp
    tab = est.ratio_diagnostics(run.model, run.lam(), float(e["gamma"]), list(e["ms"]), int(e["k"]),
                                int(e["samples"]), run.seed, int(e["L"]), int(e["n"]),
                                int(e["resamples"]))
    if run.format == "csv":
        run.write("results.csv", tab.to_csv())
    else:
        run.write_json("results.json", {"rows": [r.__dict__ for r in tab.rows]})
    run.write_json("fit.json", {"delta": tab.delta_fit, "pivotal": tab.pivotal_fit})
    low = [r.m for r in tab.rows
           if r.delta_ratio < 1 - 3 * r.delta_se or r.pivotal_ratio < 1 - 3 * r.pivotal_se]
    neg = [n for n, f in (("delta", tab.delta_fit), ("pivotal", tab.pivotal_fit))
           if not f["C_hat"] >= 0]
    if low or neg:
        raise CheckFailed("ratios", {"below_one": low, "negative_slope": neg})


def cmd_dominate(run: Run) -> None:
    run.begin(["replicas.csv", f"results.{run.format}"])
    e = run.exp
    rep = est.domination_check(run.model, tuple(e["B"]), float(e["eps"]), float(e["r2"]), run.lam(),
                               int(e["samples"]), run.seed, e["box"])
    run.write("replicas.csv", csv_text(["replica", "size_g", "size_restricted"],
                                       [(r, a, b) for r, (a, b) in enumerate(rep.sizes.tolist())]))
    d = rep.to_dict()
    run.results(list(d), [tuple(d.values())], d)
    if rep.edge_violations or rep.size_violations:
        raise CheckFailed("domination", d)


HANDLERS = {"sample": cmd_sample, "render": cmd_render, "tail": cmd_tail, "chi": cmd_chi,
            "scan": cmd_scan, "fit": cmd_fit, "converge": cmd_converge,
            "osss-verify": cmd_osss_verify, "oracle-fixtures": cmd_oracle_fixtures,
            "bounds": cmd_bounds, "diagnose-ratios": cmd_diagnose_ratios, "dominate": cmd_dominate}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def run_command(command: str, args, config_path: Optional[Path]) -> int:
    text = None if config_path is None else _read_text(config_path)
    run = Run(command, args, config_path, text)
    try:
        HANDLERS[command](run)
    except CheckFailed as exc:
        run.write_json("failure.json", {"command": command, "check": exc.check, "detail": exc.detail})
        run.finish("failed")
        print(f"rcmlab {command}: check failed: {exc.check}", file=sys.stderr)
        return 2
    except est.PreconditionError as exc:
        if run.t0 is not None:
            run.write_json("failure.json", {"command": command, "check": "precondition",
                                            "detail": {"message": str(exc)}})
            run.finish("failed")
        print(f"rcmlab {command}: {exc}", file=sys.stderr)
        return 1
    run.finish("ok")
    return 0


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def rerun(manifest_path: Path, args) -> int:
    """Repeat a run with the config text, seed and settings stored in its manifest."""
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    if m.get("artifact_version") != __version__:
        print(f"warning: manifest written by version {m.get('artifact_version')}", file=sys.stderr)
    exp = m.get("experiment", {})
    if args.seed is None and "seed" in exp:
        args.seed = int(m["seed"])
    if args.samples is None and "samples" in exp:
        args.samples = int(exp["samples"])
    if args.format is None:
        args.format = m.get("format")
    if args.out is None:
        raise UsageError("rerun needs --out")
    if m.get("config_text") is None:
        return run_command(m["command"], args, None)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "config.yaml"
        path.write_text(m["config_text"], encoding="utf-8")
        return run_command(m["command"], args, path)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        if args.command == "rerun":
            return rerun(args.manifest, args)
        return run_command(args.command, args, args.config)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"rcmlab: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
