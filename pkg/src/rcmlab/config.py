"""YAML configuration files with strict key checking.

A config has three sections::

    model:
      dimension: 2
      intensity: 0.2
      box: 20
      adjacency: {kind: gilbert, radius: 1.0}
      weights: {kind: point}
      reach: {kind: linear, scale: 1.0}      # optional
    experiment:
      seed: 1
      samples: 1000
      ...                                    # command specific
    output:
      dir: out
      format: csv

Unknown keys are rejected and all missing keys are reported in one error.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Mapping

import yaml

from .model import FORMS, AdjacencySpec, ModelSpec, Reach, WeightDistribution


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


_REQUIRED = object()

MODEL_KEYS = {"dimension": 2, "intensity": _REQUIRED, "box": _REQUIRED,
              "adjacency": _REQUIRED, "weights": {"kind": "point"}, "reach": None}
WEIGHT_KEYS = {"point": {}, "pareto": {"alpha": _REQUIRED, "m_max": None},
               "discrete": {"atoms": _REQUIRED, "probs": _REQUIRED}}
REACH_KEYS = {"kind": _REQUIRED, "scale": 1.0, "power": 1.0}
OUTPUT_KEYS = {"dir": "out", "format": "csv"}


def merge_schema(section: str, data: Mapping | None, schema: Mapping, problems: list) -> dict:
    """Fill defaults, collecting unknown and missing keys into ``problems``."""
    data = {} if data is None else dict(data)
    if not isinstance(data, dict):
        problems.append(f"{section}: expected a mapping")
        return {}
    for key in sorted(set(data) - set(schema)):
        problems.append(f"{section}.{key}: unknown key")
    out = {}
    for key, default in schema.items():
        if key in data:
            out[key] = data[key]
        elif default is _REQUIRED:
            problems.append(f"{section}.{key}: missing required key")
        else:
            out[key] = default
    return out


def parse_model(data: Mapping, problems: list | None = None) -> ModelSpec | None:
    """Build a :class:`ModelSpec` from the ``model`` section."""
    own = problems is None
    problems = [] if own else problems
    m = merge_schema("model", data, MODEL_KEYS, problems)
    adj = weights = reach = None
    if isinstance(m.get("adjacency"), Mapping):
        a = dict(m["adjacency"])
        kind = a.pop("kind", None)
        if kind is None:
            problems.append("model.adjacency.kind: missing required key")
        elif kind == "tabulated":
            adj = ("tabulated", {"table": a.pop("table", None)})
            for key in a:
                problems.append(f"model.adjacency.{key}: unknown key")
        elif kind not in FORMS:
            problems.append(f"model.adjacency.kind: unknown kind {kind!r}")
        else:
            defaults = FORMS[kind][1]
            for key in sorted(set(a) - set(defaults)):
                problems.append(f"model.adjacency.{key}: unknown key")
            adj = (kind, {"params": {k: v for k, v in a.items() if k in defaults}})
    elif "adjacency" in m:
        problems.append("model.adjacency: expected a mapping")
    if isinstance(m.get("weights"), Mapping):
        w = dict(m["weights"])
        kind = w.pop("kind", "point")
        if kind not in WEIGHT_KEYS:
            problems.append(f"model.weights.kind: unknown kind {kind!r}")
        else:
            weights = (kind, merge_schema("model.weights", w, WEIGHT_KEYS[kind], problems))
    if m.get("reach") is not None:
        reach = merge_schema("model.reach", m["reach"], REACH_KEYS, problems)
    if problems:
        if own:
            raise ConfigError("; ".join(problems))
        return None
    try:
        r = Reach(reach["kind"], float(reach["scale"]), float(reach["power"])) if reach else None
        kind, kw = adj
        spec = AdjacencySpec(kind, int(m["dimension"]), reach=r, **kw)
        wk, wp = weights
        if wk == "point":
            wd = WeightDistribution.point()
        elif wk == "pareto":
            wd = WeightDistribution.pareto(wp["alpha"], wp["m_max"])
        else:
            wd = WeightDistribution.discrete(dict(zip(wp["atoms"], wp["probs"])))
        return ModelSpec(spec, wd, float(m["intensity"]), float(m["box"]))
    except (ValueError, TypeError) as exc:
        if own:
            raise ConfigError(f"model: {exc}") from exc
        problems.append(f"model: {exc}")
        return None


def load_model(path) -> ModelSpec:
    """Load only the ``model`` section of a config file (or a bare model mapping)."""
    data = read_yaml(path)
    return parse_model(data.get("model", data))


def read_yaml(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at top level")
    return data


def file_hash(path) -> str:
    """SHA-256 of the raw file bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_config(path, experiment_schema: Mapping[str, Any]) -> tuple[ModelSpec, dict, dict]:
    """Load and validate a full config; returns ``(model, experiment, output)``."""
    data = read_yaml(path)
    problems: list = []
    for key in sorted(set(data) - {"model", "experiment", "output"}):
        problems.append(f"{key}: unknown top-level section")
    if "model" not in data:
        problems.append("model: missing required section")
    model = parse_model(data.get("model") or {}, problems) if "model" in data else None
    exp = merge_schema("experiment", data.get("experiment"), experiment_schema, problems)
    out = merge_schema("output", data.get("output"), OUTPUT_KEYS, problems)
    if problems:
        raise ConfigError("; ".join(problems))
    return model, exp, out


REQUIRED = _REQUIRED
