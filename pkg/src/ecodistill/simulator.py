"""Aggregate-update simulation over a watershed graph.

Each step every node receives messages aggregated from its upstream
neighbours' fluxes and is advanced by its bound updaters. Three schedules
decide which neighbour values a node sees:

* ``Synchronous``: fluxes from the previous step (double-buffered);
* ``TopologicalAsync``: nodes in topological order, reading upstream fluxes
  already produced in the current step;
* ``ConvergenceIterative``: repeated synchronous sweeps within the step,
  each reading the previous sweep, until the largest scaled change falls
  below ``tol`` or ``max_iter`` sweeps have run.

Forcing is applied at step start, before any aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops, value
from .data import ForcingSeries, StateSchema, StateSnapshot, snapshot
from .errors import AxisMismatch, NonFiniteState, SchemaMismatch, UnknownMethod, ValidationError
from .graph import WatershedGraph, topological_order

# -------------------------------------------------------------- aggregation

SUM, MEAN, MAX, WEIGHTED_SUM, CUSTOM = "Sum", "Mean", "Max", "WeightedSum", "Custom"

_CUSTOM_AGGREGATES: dict = {}


def register_aggregate(name: str, fn) -> None:
    """Register ``fn(values, weights) -> value`` under ``name`` for ``AggregateOp(Custom, name)``.

    ``fn`` must be pure and return the neutral value for empty input.
    """
    _CUSTOM_AGGREGATES[name] = fn


@dataclass(frozen=True)
class AggregateOp:
    kind: str = SUM
    name: str | None = None

    def __post_init__(self):
        if self.kind not in (SUM, MEAN, MAX, WEIGHTED_SUM, CUSTOM):
            raise UnknownMethod(f"unknown aggregate {self.kind!r}")
        if self.kind == CUSTOM and self.name not in _CUSTOM_AGGREGATES:
            raise UnknownMethod(f"no custom aggregate registered as {self.name!r}")

    @classmethod
    def parse(cls, spec) -> "AggregateOp":
        if isinstance(spec, AggregateOp):
            return spec
        if spec in (SUM, MEAN, MAX, WEIGHTED_SUM):
            return cls(spec)
        if isinstance(spec, str) and spec.startswith("Custom:"):
            return cls(CUSTOM, spec.split(":", 1)[1])
        raise UnknownMethod(f"unknown aggregate {spec!r}")


def _total(items):
    acc = 0.0
    for x in items:
        acc = ops.add(acc, x)
    return acc


def _all_plain(xs) -> bool:
    return all(type(x) is float for x in xs)


def aggregate(op: AggregateOp, values, weights=None):
    """Combine neighbour values. Empty neighbourhoods give 0 for every built-in kind."""
    values = list(values)
    weights = [1.0] * len(values) if weights is None else list(weights)
    if len(weights) != len(values):
        raise ValidationError("values and weights differ in length")
    if op.kind in (SUM, WEIGHTED_SUM) and _all_plain(values) and _all_plain(weights):
        # plain-float fast path; same left-to-right order as the taped version
        acc = 0.0
        for v, w in zip(values, weights):
            acc += v if op.kind == SUM else v * w
        return acc
    if op.kind == SUM:
        return _total(values)
    if op.kind == WEIGHTED_SUM:
        return _total(ops.mul(v, w) for v, w in zip(values, weights))
    if op.kind == MEAN:
        return ops.div(_total(values), float(len(values))) if values else 0.0
    if op.kind == MAX:
        if not values:
            return 0.0  # neutral for the non-negative flux fields routed on edges
        out = values[0]
        for v in values[1:]:
            out = ops.maximum(out, v)
        return out
    return _CUSTOM_AGGREGATES[op.name](values, weights)


# ----------------------------------------------------------------- bindings

@dataclass(frozen=True)
class MessageSpec:
    """Which upstream field feeds a message and how it is combined."""

    field: str
    op: AggregateOp = AggregateOp(WEIGHTED_SUM)
    source: str = "flux"   # "flux" or "state"

    def __post_init__(self):
        if self.source not in ("flux", "state"):
            raise ValidationError(f"message source must be 'flux' or 'state', got {self.source!r}")


@dataclass
class UpdaterBinding:
    """Attach an updater to a node selection.

    ``selector`` is ``"all"``, ``{"soil_class": c}`` (or ``landuse_class``),
    or an explicit collection of node ids. ``group`` names the state-variable
    group; each node must be covered exactly once per group.
    """

    updater: object
    selector: object = "all"
    messages: dict = field(default_factory=dict)
    group: str | None = None

    def __post_init__(self):
        self.messages = {k: (v if isinstance(v, MessageSpec) else MessageSpec(*v) if isinstance(v, tuple)
                             else MessageSpec(**v)) for k, v in self.messages.items()}
        if self.group is None:
            self.group = getattr(self.updater, "name", "updater")

    def nodes(self, g: WatershedGraph) -> list:
        sel = self.selector
        if sel == "all":
            return list(range(g.n_nodes))
        if isinstance(sel, dict):
            if set(sel) - {"soil_class", "landuse_class"}:
                raise ValidationError(f"unknown selector keys {sorted(sel)}")
            return [v for v, a in enumerate(g.nodes)
                    if all(getattr(a, k) == c for k, c in sel.items())]
        ids = sorted(int(v) for v in sel)
        bad = [v for v in ids if not 0 <= v < g.n_nodes]
        if bad:
            raise ValidationError(f"selector names unknown nodes {bad}")
        return ids


SYNCHRONOUS, TOPOLOGICAL, CONVERGENCE = "Synchronous", "TopologicalAsync", "ConvergenceIterative"


@dataclass(frozen=True)
class Schedule:
    kind: str = SYNCHRONOUS
    tol: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.kind not in (SYNCHRONOUS, TOPOLOGICAL, CONVERGENCE):
            raise UnknownMethod(f"unknown schedule {self.kind!r}")
        if not self.tol > 0:
            raise ValidationError("tol must be > 0")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")


@dataclass
class StepRecord:
    time: int
    snapshot: StateSnapshot
    converged: bool = True
    iterations: int = 1

    @property
    def non_converged(self) -> bool:
        return not self.converged


@dataclass
class Trajectory:
    initial: StateSnapshot
    records: list
    dates: tuple = ()

    def __len__(self):
        return len(self.records)

    @property
    def snapshots(self) -> list:
        return [self.initial] + [r.snapshot for r in self.records]

    @property
    def n_nodes(self) -> int:
        return len(self.initial.states)

    def matrix(self, variable: str) -> np.ndarray:
        """``(T, N)`` values of a state or flux variable at every post-step record."""
        out = np.full((len(self.records), self.n_nodes), np.nan)
        for k, rec in enumerate(self.records):
            for v in range(self.n_nodes):
                s = rec.snapshot.states[v]
                x = s[variable] if variable in s else rec.snapshot.fluxes[v].get(variable)
                if x is not None:
                    out[k, v] = value(x)
        if len(self.records) and np.all(np.isnan(out)):
            raise SchemaMismatch(f"variable {variable!r} is not in the trajectory")
        return out

    def series(self, variable: str, node: int = 0) -> np.ndarray:
        return self.matrix(variable)[:, node]


# --------------------------------------------------------------- simulation

def _check_finite(node, d, what):
    for k, x in d.items():
        ok = math.isfinite(x) if type(x) is float else bool(np.all(np.isfinite(value(x))))
        if not ok:
            raise NonFiniteState(f"node {node}: {what} {k!r} became {value(x)!r}")


class Simulation:
    """A graph with bound updaters and a schedule, ready to step."""

    def __init__(self, g: WatershedGraph, bindings, schedule: Schedule | None = None):
        self.g = g
        self.bindings = list(bindings)
        self.schedule = schedule or Schedule()
        if not self.bindings:
            raise ValidationError("no updater bindings")
        self.node_bindings = [[] for _ in range(g.n_nodes)]
        cover = {}
        for b in self.bindings:
            for v in b.nodes(g):
                cover.setdefault((b.group, v), []).append(b)
                self.node_bindings[v].append(b)
        problems = []
        for grp in dict.fromkeys(b.group for b in self.bindings):
            for v in range(g.n_nodes):
                n = len(cover.get((grp, v), []))
                if n != 1:
                    problems.append(f"node {v} is covered {n} times in group {grp!r}")
        if problems:
            raise ValidationError("; ".join(problems[:10]) + (" ..." if len(problems) > 10 else ""))
        self.schemas = []
        for v in range(g.n_nodes):
            sch = StateSchema()
            for b in self.node_bindings[v]:
                sch = sch.merged(b.updater.schema)
            self.schemas.append(sch)
        self.incoming = [[(e.src, e.weight) for e in g.in_edges(v)] for v in range(g.n_nodes)]
        self.coupled = any(self.incoming)
        self._order = None

    @property
    def order(self) -> list:
        if self._order is None:
            self._order = topological_order(self.g)
        return self._order

    def initial_states(self) -> list:
        out = []
        for v, attrs in enumerate(self.g.nodes):
            s = {}
            for b in self.node_bindings[v]:
                s.update(b.updater.initial_state(v, attrs))
            out.append(s)
        return out

    def _messages(self, v, binding, src_states, src_fluxes):
        msgs = {}
        inc = self.incoming[v]
        for name, spec in binding.messages.items():
            if not inc and spec.op.kind != CUSTOM:
                msgs[name] = 0.0   # built-in aggregates of an empty neighbourhood
                continue
            pool = src_fluxes if spec.source == "flux" else src_states
            kind, fld = spec.op.kind, spec.field
            if kind == SUM or kind == WEIGHTED_SUM:
                # inline plain-float sum; falls back to the taped path on the first Var
                acc = 0.0
                for u, w in inc:
                    x = pool[u].get(fld, 0.0)
                    if type(x) is not float:
                        break
                    acc += x if kind == SUM else x * w
                else:
                    msgs[name] = acc
                    continue
            vals = [pool[u].get(fld, 0.0) for u, _ in inc]
            msgs[name] = aggregate(spec.op, vals, [w for _, w in inc])
        return msgs

    def update_node(self, v, state, forcing_v, src_states, src_fluxes):
        attrs = self.g.nodes[v]
        bindings = self.node_bindings[v]
        if len(bindings) == 1:
            # common case: no later binding needs this one's fluxes, so skip the copies
            b = bindings[0]
            s, fx = b.updater.update(state, self._messages(v, b, src_states, src_fluxes), forcing_v, v, attrs)
            _check_finite(v, s, "state")
            _check_finite(v, fx, "flux")
            return s, fx
        new_state, fluxes = {}, {}
        local = dict(forcing_v)
        for b in bindings:
            msgs = self._messages(v, b, src_states, src_fluxes)
            own = {k: state[k] for k in b.updater.schema.states}
            s, fx = b.updater.update(own, msgs, local, v, attrs)
            _check_finite(v, s, "state")
            _check_finite(v, fx, "flux")
            new_state.update(s)
            fluxes.update(fx)
            local.update(fx)
        return new_state, fluxes

    def _sweep(self, states, forcing_t, src_states, src_fluxes):
        new_s, new_f = [None] * len(states), [None] * len(states)
        for v in range(len(states)):
            new_s[v], new_f[v] = self.update_node(v, states[v], forcing_t[v], src_states, src_fluxes)
        return new_s, new_f

    def _delta(self, a_s, a_f, b_s, b_f):
        worst = 0.0
        for v in range(len(a_s)):
            sch = self.schemas[v]
            for part_a, part_b in ((a_s[v], b_s[v]), (a_f[v], b_f[v])):
                for k, x in part_a.items():
                    d = abs(value(x) - value(part_b.get(k, 0.0))) / sch.scale_of(k)
                    worst = max(worst, d)
        return worst

    def step(self, states, prev_fluxes, forcing_t):
        """Advance every node one step; returns ``(states, fluxes, converged, iterations)``."""
        kind = self.schedule.kind
        if kind == SYNCHRONOUS:
            s, f = self._sweep(states, forcing_t, states, prev_fluxes)
            return s, f, True, 1
        if kind == TOPOLOGICAL:
            cur_s, cur_f = list(states), [{} for _ in states]
            for v in self.order:
                cur_s[v], cur_f[v] = self.update_node(v, states[v], forcing_t[v], cur_s, cur_f)
            return cur_s, cur_f, True, 1
        # convergence-iterative
        src_s, src_f = states, prev_fluxes
        s, f = self._sweep(states, forcing_t, src_s, src_f)
        if not self.coupled:
            return s, f, True, 1
        for it in range(2, self.schedule.max_iter + 1):
            s2, f2 = self._sweep(states, forcing_t, s, f)
            d = self._delta(s2, f2, s, f)
            s, f = s2, f2
            if d < self.schedule.tol:
                return s, f, True, it
        return s, f, False, self.schedule.max_iter

    def run(self, forcing: ForcingSeries | list, initial=None) -> Trajectory:
        states = self.initial_states() if initial is None else [dict(s) for s in initial]
        if len(states) != self.g.n_nodes:
            raise SchemaMismatch(f"{len(states)} initial states for {self.g.n_nodes} nodes")
        for v, s in enumerate(states):
            want = set(self.schemas[v].states)
            if set(s) != want:
                raise SchemaMismatch(f"node {v}: initial state has {sorted(s)}, expected {sorted(want)}")
        traj = Trajectory(snapshot(states, time=0), [],
                          tuple(forcing.dates) if isinstance(forcing, ForcingSeries) else ())
        if isinstance(forcing, ForcingSeries):
            if forcing.per_node and forcing.n_nodes != self.g.n_nodes:
                raise SchemaMismatch(f"forcing has {forcing.n_nodes} node columns, graph has {self.g.n_nodes}")
            steps = (forcing.for_step(t, self.g.n_nodes) for t in range(len(forcing)))
        else:
            steps = iter(forcing)
        fluxes = [{} for _ in states]
        for t, forcing_t in enumerate(steps):
            states, fluxes, ok, its = self.step(states, fluxes, forcing_t)
            # updaters return fresh dicts every step and the engine never mutates them,
            # so the record can hold them without copying
            traj.records.append(StepRecord(t + 1, StateSnapshot(t + 1, tuple(states), tuple(fluxes)), ok, its))
        return traj


def step(g, states, bindings, schedule, forcing_t, prev_fluxes=None):
    sim = Simulation(g, bindings, schedule)
    prev = prev_fluxes if prev_fluxes is not None else [{} for _ in states]
    s, f, _, _ = sim.step(states, prev, forcing_t)
    return s, f


def run(g, initial, bindings, schedule, forcing) -> Trajectory:
    return Simulation(g, bindings, schedule).run(forcing, initial)


# --------------------------------------------------------------- comparison

@dataclass
class MetricTable:
    variable: str
    rows: list   # (node or "all", SkillMetrics)

    def composite_grid(self, grid_meta, nodata=None) -> np.ndarray:
        fill = grid_meta.nodata if nodata is None else nodata
        grid = np.full((grid_meta.nrows, grid_meta.ncols), fill, dtype=np.float64)
        for node, m in self.rows:
            r, c = grid_meta.cells[node]
            grid[r, c] = m.composite
        return grid


def compare_runs(a: Trajectory, b: Trajectory, variable: str, per_node: bool = True) -> MetricTable:
    """Skill of ``b`` against ``a`` (the reference) for one variable."""
    from .distill.metrics import SkillMetrics

    if len(a) != len(b) or (a.dates and b.dates and tuple(a.dates) != tuple(b.dates)):
        raise AxisMismatch("trajectories cover different date axes")
    if a.n_nodes != b.n_nodes:
        raise AxisMismatch(f"node sets differ ({a.n_nodes} vs {b.n_nodes})")
    A, B = a.matrix(variable), b.matrix(variable)
    if per_node:
        return MetricTable(variable, [(v, SkillMetrics.of(A[:, v], B[:, v])) for v in range(a.n_nodes)])
    return MetricTable(variable, [("all", SkillMetrics.of(A.mean(axis=1), B.mean(axis=1)))])
