"""Declarative run configuration (one JSON document).

Top-level keys: ``graph, forcing, states, bindings, schedule, trainer,
outputs, seed``. Relative paths resolve against the config file's folder.
Example documents live in the ``configs/`` folder of the source tree and
are described in its README.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import NodeBinding, load_forcing_csv
from .errors import EcoDistillError, ValidationError
from .graph import Edge, NodeAttributes, WatershedGraph, build_from_flow_direction_grid, load_d8_grid
from .process.hbv import HbvParams
from .process.nitrification import NitrifParamsDelGrosso, NitrifParamsParton
from .process.nitrogen import NitrogenParams
from .process.paramfile import load_params
from .simulator import AggregateOp, MessageSpec, Schedule, UpdaterBinding
from .synthetic import seasonal_forcing
from .updaters import DELGROSSO, HbvUpdater, LinearUpdater, NitrificationUpdater, NitrogenUpdater

TOP_KEYS = ("graph", "forcing", "states", "bindings", "schedule", "trainer", "outputs", "seed")
REQUIRED = ("graph", "forcing", "bindings", "schedule", "seed")


class ConfigError(ValidationError):
    """Every finding of a failed validation, one per line."""

    def __init__(self, findings):
        self.findings = list(findings)
        super().__init__("\n".join(self.findings))


def digest(doc: dict) -> str:
    """Content hash of the canonical JSON form of a config."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunConfig:
    doc: dict
    base: Path
    graph: WatershedGraph | None = None
    forcing: object = None
    bindings: list = field(default_factory=list)
    schedule: Schedule | None = None
    seed: int = 0

    @property
    def digest(self) -> str:
        return digest(self.doc)

    @property
    def trainer(self) -> dict | None:
        return self.doc.get("trainer")

    @property
    def outputs(self) -> dict:
        return self.doc.get("outputs") or {}

    @property
    def initial_overrides(self) -> dict:
        return (self.doc.get("states") or {}).get("initial") or {}

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p


# ------------------------------------------------------------------ graph

def build_graph(spec: dict, cfg: RunConfig) -> WatershedGraph:
    kind = spec.get("kind", "lumped")
    if kind == "lumped":
        return WatershedGraph((NodeAttributes(area=float(spec.get("area", 1.0)),
                                              soil_class=int(spec.get("soil_class", 0))),))
    if kind == "explicit":
        nodes = tuple(NodeAttributes(area=float(n["area"]), elevation=float(n.get("elevation", 0.0)),
                                     soil_class=int(n.get("soil_class", 0)),
                                     landuse_class=int(n.get("landuse_class", 0)))
                      for n in spec["nodes"])
        edges = tuple(Edge(int(e[0]), int(e[1]), float(e[2]) if len(e) > 2 else 1.0)
                      for e in spec.get("edges", []))
        return WatershedGraph(nodes, edges)
    if kind == "d8":
        if "path" in spec:
            attrs = {k: cfg.path(v) for k, v in (spec.get("attributes") or {}).items()}
            return load_d8_grid(cfg.path(spec["path"]), **attrs)
        d8 = np.asarray(spec["codes"], dtype=np.int64)
        cell_attrs = {k: np.asarray(v) for k, v in (spec.get("attributes") or {}).items()}
        return build_from_flow_direction_grid(d8, float(spec.get("cellsize", 1.0)), cell_attrs or None)
    raise ValidationError(f"unknown graph kind {kind!r}")


# ---------------------------------------------------------------- forcing

def build_forcing(spec: dict, cfg: RunConfig):
    if "path" in spec:
        return load_forcing_csv(cfg.path(spec["path"]), spec.get("binding", NodeBinding.SHARED.value))
    if "synthetic" in spec:
        s = dict(spec["synthetic"])
        days = int(s.pop("days"))
        seed = int(s.pop("seed", cfg.seed))
        series = seasonal_forcing(days, seed=seed, **s)
        extra = spec.get("constant") or {}
        if extra:
            series = series.with_variables(**{k: np.full(days, float(v)) for k, v in extra.items()})
        return series
    raise ValidationError("forcing needs 'path' or 'synthetic'")


# --------------------------------------------------------------- bindings

PARAM_TYPES = {"hbv": HbvParams, "nitrogen": NitrogenParams}


def _params(cls, raw: dict):
    """Plain or soil-class-indexed parameters; indexed entries look like ``name[c]``."""
    plain = {k: v for k, v in raw.items() if "[" not in k}
    indexed = {}
    for k, v in raw.items():
        if "[" in k:
            name, cls_id = k[:-1].split("[")
            indexed.setdefault(int(cls_id), {})[name] = v
    unknown = (set(plain) | {n for d in indexed.values() for n in d}) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown parameters {sorted(unknown)}")
    if "MAXBAS" in plain:
        plain["MAXBAS"] = int(plain["MAXBAS"])
    base = cls(**plain)
    if not indexed:
        return base
    return {c: base.__class__(**{**base.__dict__, **vals}) for c, vals in indexed.items()}


def build_updater(spec: dict, cfg: RunConfig):
    name = spec.get("updater")
    raw = dict(spec.get("params") or {})
    if "params_file" in spec:
        raw = {**load_params(cfg.path(spec["params_file"])), **raw}
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict):
            flat.update({f"{k}[{c}]": x for c, x in v.items()})
        else:
            flat[k] = v
    raw = flat
    if name == "hbv":
        return HbvUpdater(_params(HbvParams, raw))
    if name == "nitrogen":
        return NitrogenUpdater(_params(NitrogenParams, raw))
    if name == "nitrification":
        form = spec.get("formulation", DELGROSSO)
        cls = NitrifParamsDelGrosso if form == DELGROSSO else NitrifParamsParton
        return NitrificationUpdater(form, _params(cls, raw), spec.get("nh4_source", "forcing"))
    if name == "linear":
        return LinearUpdater(**raw)
    raise ValidationError(f"unknown updater {name!r}")


def build_binding(spec: dict, cfg: RunConfig) -> UpdaterBinding:
    msgs = {}
    for mname, m in (spec.get("messages") or {}).items():
        msgs[mname] = MessageSpec(m["field"], AggregateOp.parse(m.get("op", "WeightedSum")),
                                  m.get("source", "flux"))
    sel = spec.get("selector", "all")
    return UpdaterBinding(build_updater(spec, cfg), sel, msgs, spec.get("group"))


def build_schedule(spec) -> Schedule:
    if isinstance(spec, str):
        return Schedule(spec)
    return Schedule(spec.get("kind", "Synchronous"), float(spec.get("tol", 1e-8)),
                    int(spec.get("max_iter", 100)))


# ------------------------------------------------------------------ load

def load_config(path, need_trainer: bool = False, seed_override=None) -> RunConfig:
    """Parse and validate; raises :class:`ConfigError` listing every finding."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    if seed_override is not None:
        doc["seed"] = int(seed_override)
    findings = []
    for k in doc:
        if k not in TOP_KEYS:
            findings.append(f"unknown top-level key {k!r}")
    for k in REQUIRED:
        if k not in doc:
            findings.append(f"missing required key {k!r}")
    if need_trainer and not doc.get("trainer"):
        findings.append("missing 'trainer' section")
    cfg = RunConfig(doc, path.parent)
    if "seed" in doc:
        try:
            cfg.seed = int(doc["seed"])
            if cfg.seed < 0:
                raise ValueError
        except (TypeError, ValueError):
            findings.append("seed must be a non-negative integer")
    if "graph" in doc:
        try:
            cfg.graph = build_graph(doc["graph"], cfg)
        except (EcoDistillError, KeyError, TypeError, ValueError) as exc:
            findings.append(f"graph: {exc}")
    if "forcing" in doc:
        try:
            cfg.forcing = build_forcing(doc["forcing"], cfg)
        except (EcoDistillError, KeyError, TypeError, ValueError) as exc:
            findings.append(f"forcing: {exc}")
    for i, b in enumerate(doc.get("bindings") or []):
        label = f"bindings[{i}] ({b.get('updater', '?')})" if isinstance(b, dict) else f"bindings[{i}]"
        try:
            cfg.bindings.append(build_binding(b, cfg))
        except (EcoDistillError, KeyError, TypeError, ValueError) as exc:
            findings.append(f"{label}: {exc}")
    if "bindings" in doc and not doc["bindings"]:
        findings.append("bindings must not be empty")
    if "schedule" in doc:
        try:
            cfg.schedule = build_schedule(doc["schedule"])
        except (EcoDistillError, KeyError, TypeError, ValueError, AttributeError) as exc:
            findings.append(f"schedule: {exc}")
    if findings:
        raise ConfigError(findings)
    return cfg
