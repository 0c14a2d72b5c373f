"""Forcing series, state schemas, snapshots and file I/O."""

from __future__ import annotations

import copy
import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    GraphMismatch,
    IoError,
    NegativePrecip,
    NonMonotonicDates,
    ParseError,
    SchemaMismatch,
    ValidationError,
)
from .graph import CoarseningMap, WatershedGraph

DEFAULT_LATITUDE = 45.0     # degrees north, used for day length when PET must be derived
HAMON_COEFF = 0.1651        # mm/day per (g/m3 saturated vapour density) at a 12 h day


def fmt(x) -> str:
    """Round-trip float formatting used for every numeric we write."""
    return format(float(x), ".17g")


def day_length_hours(dates, latitude: float = DEFAULT_LATITUDE) -> np.ndarray:
    """Astronomical day length from day of year (simple declination formula)."""
    doy = np.array([d.timetuple().tm_yday for d in dates], dtype=np.float64)
    decl = 0.409 * np.sin(2.0 * np.pi * doy / 365.0 - 1.39)
    x = np.clip(-np.tan(np.radians(latitude)) * np.tan(decl), -1.0, 1.0)
    return 24.0 / np.pi * np.arccos(x)


def pet_from_temperature(temp, dates=None, latitude: float = DEFAULT_LATITUDE):
    """Hamon PET (mm/day) from air temperature and day length; 0 at or below freezing.

    Without dates a 12 h day is assumed. ``temp`` may be ``(T,)`` or ``(T, N)``.
    """
    t = np.asarray(temp, dtype=np.float64)
    if dates is None:
        ld = np.ones(t.shape[:1])
    else:
        ld = day_length_hours(dates, latitude) / 12.0
    if t.ndim == 2:
        ld = ld[:, None]
    e_sat = 6.108 * np.exp(17.26939 * t / (t + 237.3))     # hPa
    rho_sat = 216.7 * e_sat / (t + 273.3)                    # g/m3
    return np.where(t > 0.0, HAMON_COEFF * ld * ld * rho_sat, 0.0)


class NodeBinding(str, Enum):
    SHARED = "Shared"
    PER_NODE_COLUMN = "PerNodeColumn"


# ------------------------------------------------------------------- schemas

@dataclass(frozen=True)
class VarSpec:
    unit: str = ""
    scale: float = 1.0


@dataclass
class StateSchema:
    """Ordered variable declarations; ``scale`` normalizes convergence checks."""

    states: dict = field(default_factory=dict)
    fluxes: dict = field(default_factory=dict)

    def scale_of(self, name: str) -> float:
        spec = self.states.get(name) or self.fluxes.get(name)
        return spec.scale if spec else 1.0

    def merged(self, other: "StateSchema") -> "StateSchema":
        clash = (set(self.states) & set(other.states)) | (set(self.fluxes) & set(other.fluxes))
        if clash:
            raise SchemaMismatch(f"variables declared twice: {sorted(clash)}")
        return StateSchema({**self.states, **other.states}, {**self.fluxes, **other.fluxes})


@dataclass(frozen=True)
class StateSnapshot:
    time: int
    states: tuple
    fluxes: tuple = ()


def _copy_vars(d) -> dict:
    # values are nearly always plain floats; only containers need a real copy
    return {k: (v if isinstance(v, (float, int)) else copy.deepcopy(v)) for k, v in d.items()}


def snapshot(states, fluxes=None, time: int = 0) -> StateSnapshot:
    fluxes = fluxes if fluxes is not None else [{} for _ in states]
    return StateSnapshot(time, tuple(_copy_vars(s) for s in states), tuple(_copy_vars(f) for f in fluxes))


def restore(snap: StateSnapshot, schema=None):
    """Per-node state and flux dicts from ``snap``.

    ``schema`` is either a :class:`StateSchema` (every node carries exactly its
    state variables) or a per-node list of expected variable-name sets.
    """
    if schema is not None:
        if isinstance(schema, StateSchema):
            expected = [set(schema.states)] * len(snap.states)
        else:
            expected = [set(x) for x in schema]
            if len(expected) != len(snap.states):
                raise SchemaMismatch(
                    f"snapshot has {len(snap.states)} nodes, model has {len(expected)}")
        for i, (s, want) in enumerate(zip(snap.states, expected)):
            if set(s) != want:
                missing, extra = sorted(want - set(s)), sorted(set(s) - want)
                raise SchemaMismatch(f"node {i}: missing {missing}, unexpected {extra}")
    return [_copy_vars(s) for s in snap.states], [_copy_vars(f) for f in snap.fluxes]


# ------------------------------------------------------------------- forcing

@dataclass(frozen=True)
class ForcingRecord:
    """One day of forcing: precipitation and PET in mm/day, temperature in degC."""

    precip: float
    temp: float
    pet: float | None = None
    date: dt.date | None = None

    def __post_init__(self):
        if self.precip < 0:
            raise ValidationError(f"negative precipitation {self.precip!r}")
        if self.pet is None:
            dates = (self.date,) if self.date is not None else None
            object.__setattr__(self, "pet", float(pet_from_temperature(np.array([self.temp]), dates)[0]))
        elif self.pet < 0:
            raise ValidationError(f"negative pet {self.pet!r}")


@dataclass(frozen=True)
class ForcingSeries:
    """Daily forcing on one date axis.

    Each variable is ``(T,)`` when shared by all nodes or ``(T, N)`` per node.
    ``precip``, ``temp`` and ``pet`` are always present; extra drivers
    (e.g. ``wfps``, ``ph``) may be added under any name.
    """

    dates: tuple
    variables: dict
    per_node: bool = False

    def __post_init__(self):
        dates = tuple(self.dates)
        object.__setattr__(self, "dates", dates)
        vars_ = {k: np.asarray(v, dtype=np.float64) for k, v in self.variables.items()}
        if "pet" not in vars_ and "temp" in vars_:
            vars_["pet"] = pet_from_temperature(vars_["temp"], dates)
        object.__setattr__(self, "variables", vars_)
        for k in ("precip", "temp", "pet"):
            if k not in vars_:
                raise ValidationError(f"forcing is missing {k!r}")
        T = len(dates)
        for k, v in vars_.items():
            if v.shape[:1] != (T,):
                raise ValidationError(f"forcing {k!r} has {v.shape[0]} steps, date axis has {T}")
            if self.per_node and v.ndim != 2:
                raise ValidationError(f"per-node forcing {k!r} must be (T, N)")
        for a, b in zip(dates, dates[1:]):
            if b <= a:
                raise ValidationError(f"dates not strictly increasing at {b}")
            if (b - a).days != 1:
                raise ValidationError(f"gap in forcing dates between {a} and {b}")
        if np.any(vars_["precip"] < 0):
            raise ValidationError("negative precipitation")
        if np.any(vars_["pet"] < 0):
            raise ValidationError("negative pet")

    def __len__(self):
        return len(self.dates)

    @property
    def n_nodes(self) -> int | None:
        return next(iter(self.variables.values())).shape[1] if self.per_node else None

    def at(self, t: int, node: int) -> dict:
        if self.per_node:
            return {k: float(v[t, node]) for k, v in self.variables.items()}
        return {k: float(v[t]) for k, v in self.variables.items()}

    def for_step(self, t: int, n_nodes: int) -> list[dict]:
        if self.per_node:
            rows = {k: v[t].tolist() for k, v in self.variables.items()}
            return [{k: rows[k][i] for k in rows} for i in range(n_nodes)]
        shared = {k: float(v[t]) for k, v in self.variables.items()}
        return [dict(shared) for _ in range(n_nodes)]

    def window(self, sl: slice) -> "ForcingSeries":
        return ForcingSeries(self.dates[sl], {k: v[sl] for k, v in self.variables.items()},
                             self.per_node)

    def with_variables(self, **extra) -> "ForcingSeries":
        return ForcingSeries(self.dates, {**self.variables, **extra}, self.per_node)


def daily_dates(start: dt.date, n: int) -> tuple:
    return tuple(start + dt.timedelta(days=i) for i in range(n))


def load_forcing_csv(path, node_binding: str | NodeBinding = NodeBinding.SHARED) -> ForcingSeries:
    """Parse ``date,precip_mm,temp_c[,pet_mm][,node_id]``.

    With ``PerNodeColumn`` the ``node_id`` column selects the node and every
    node must carry the same date axis. Missing PET is derived from temperature.
    """
    node_binding = NodeBinding(node_binding)
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(1, "empty file") from None
        required = ["date", "precip_mm", "temp_c"]
        if header[:3] != required:
            raise ParseError(1, f"header must start with {','.join(required)}, got {','.join(header)}")
        allowed = set(required) | {"pet_mm", "node_id"}
        if set(header) - allowed or len(set(header)) != len(header):
            raise ParseError(1, f"unexpected columns {sorted(set(header) - allowed)}")
        has_pet = "pet_mm" in header
        has_node = "node_id" in header
        if node_binding is NodeBinding.PER_NODE_COLUMN and not has_node:
            raise ParseError(1, "PerNodeColumn binding needs a node_id column")
        col = {h: i for i, h in enumerate(header)}
        rows = {}
        last = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(lineno, f"expected {len(header)} fields, got {len(rec)}")
            try:
                date = dt.date.fromisoformat(rec[col["date"]].strip())
                precip = float(rec[col["precip_mm"]])
                temp = float(rec[col["temp_c"]])
                pet = float(rec[col["pet_mm"]]) if has_pet else None
                node = int(rec[col["node_id"]]) if has_node else 0
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not all(math.isfinite(x) for x in (precip, temp) + ((pet,) if has_pet else ())):
                raise ParseError(lineno, "non-finite value")
            if precip < 0:
                raise NegativePrecip(lineno, f"negative precipitation {precip!r}")
            if pet is not None and pet < 0:
                raise ParseError(lineno, f"negative pet {pet!r}")
            if node_binding is NodeBinding.SHARED and node != 0 and has_node:
                raise ParseError(lineno, "Shared binding expects a single series")
            if node in last and date <= last[node]:
                raise NonMonotonicDates(lineno, f"date {date} does not follow {last[node]}")
            if node in last and (date - last[node]).days != 1:
                raise ParseError(lineno, f"gap after {last[node]}")
            last[node] = date
            rows.setdefault(node, []).append((date, precip, temp, pet))
    if not rows:
        raise ParseError(2, "no data rows")
    nodes = sorted(rows)
    if nodes != list(range(len(nodes))):
        raise ParseError(1, f"node ids must be dense from 0, got {nodes}")
    axis = [r[0] for r in rows[0]]
    for n in nodes:
        if [r[0] for r in rows[n]] != axis:
            raise ParseError(1, f"node {n} does not share the date axis of node 0")

    def column(i):
        arr = np.array([[rows[n][t][i] for n in nodes] for t in range(len(axis))], dtype=np.float64)
        return arr if node_binding is NodeBinding.PER_NODE_COLUMN else arr[:, 0]

    variables = {"precip": column(1), "temp": column(2)}
    variables["pet"] = column(3) if has_pet else pet_from_temperature(variables["temp"], axis)
    return ForcingSeries(tuple(axis), variables, node_binding is NodeBinding.PER_NODE_COLUMN)


def write_forcing_csv(series: ForcingSeries, path) -> None:
    lines = ["date,precip_mm,temp_c,pet_mm" + (",node_id" if series.per_node else "")]
    v = series.variables
    for t, d in enumerate(series.dates):
        if series.per_node:
            for n in range(series.n_nodes):
                lines.append(f"{d.isoformat()},{fmt(v['precip'][t, n])},{fmt(v['temp'][t, n])},"
                             f"{fmt(v['pet'][t, n])},{n}")
        else:
            lines.append(f"{d.isoformat()},{fmt(v['precip'][t])},{fmt(v['temp'][t])},{fmt(v['pet'][t])}")
    Path(path).write_text("\n".join(lines) + "\n")


def resample_forcing(series: ForcingSeries, g: WatershedGraph, cmap: CoarseningMap) -> ForcingSeries:
    """Area-weighted cluster means of per-node forcing; shared forcing passes through."""
    if not series.per_node:
        return series
    if series.n_nodes != g.n_nodes:
        raise GraphMismatch(f"forcing has {series.n_nodes} nodes, graph has {g.n_nodes}")
    cmap.covers(g)
    areas = g.areas()
    members = cmap.members()
    out = {}
    for k, v in series.variables.items():
        coarse = np.empty((v.shape[0], len(members)))
        for c, mem in enumerate(members):
            a = areas[mem]
            coarse[:, c] = (v[:, mem] * a).sum(axis=1) / a.sum()
        out[k] = coarse
    return ForcingSeries(series.dates, out, per_node=True)


# ------------------------------------------------------------------- outputs

def _node_variables(traj, variables):
    names = []
    first = traj.records[0].snapshot
    for part in (first.states, first.fluxes):
        for d in part:
            for k in d:
                if k not in names:
                    names.append(k)
    if variables is not None:
        unknown = [v for v in variables if v not in names]
        if unknown:
            raise SchemaMismatch(f"unknown output variables {unknown}")
        names = list(variables)
    return names


def _lookup(snap, node, name):
    if name in snap.states[node]:
        return snap.states[node][name]
    return snap.fluxes[node].get(name)


def write_outputs(traj, path, format: str = "TidyCsv", variables=None, grid_meta=None) -> list[Path]:
    """Write post-step records of ``traj``.

    ``TidyCsv`` writes one file at ``path``; ``GridCsvPerStep`` writes
    ``var_<name>_t<k>.csv`` matrices into the directory ``path``.
    """
    if not traj.records:
        raise ValidationError("trajectory has no simulated steps")
    names = _node_variables(traj, variables)
    path = Path(path)
    try:
        if format == "TidyCsv":
            lines = ["time,node_id,variable,value"]
            for k, rec in enumerate(traj.records):
                label = traj.dates[k].isoformat() if traj.dates else str(k)
                snap = rec.snapshot
                for node in range(len(snap.states)):
                    for name in names:
                        val = _lookup(snap, node, name)
                        if val is not None:
                            lines.append(f"{label},{node},{name},{fmt(val)}")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n")
            return [path]
        if format == "GridCsvPerStep":
            if grid_meta is None:
                raise ValidationError("GridCsvPerStep needs grid metadata")
            path.mkdir(parents=True, exist_ok=True)
            written = []
            for k, rec in enumerate(traj.records):
                for name in names:
                    grid = np.full((grid_meta.nrows, grid_meta.ncols), grid_meta.nodata)
                    for node, (r, c) in enumerate(grid_meta.cells):
                        val = _lookup(rec.snapshot, node, name)
                        if val is not None:
                            grid[r, c] = val
                    target = path / f"var_{name}_t{k}.csv"
                    target.write_text(write_matrix(grid))
                    written.append(target)
            return written
    except OSError as exc:
        raise IoError(str(exc)) from exc
    raise ValidationError(f"unknown output format {format!r}")


def write_matrix(grid) -> str:
    return "\n".join(" ".join(fmt(v) for v in row) for row in np.asarray(grid)) + "\n"


def read_matrix(path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


@dataclass
class TidyTable:
    times: list
    nodes: list
    values: dict  # variable -> (T, N) array

    def series(self, variable: str, node: int) -> np.ndarray:
        return self.values[variable][:, self.nodes.index(node)]


def read_tidy_csv(path) -> TidyTable:
    times, nodes, cells = [], [], {}
    try:
        handle = Path(path).open(newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["time", "node_id", "variable", "value"]:
            raise ParseError(1, "expected header time,node_id,variable,value")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                t, node, var, val = rec[0], int(rec[1]), rec[2], float(rec[3])
            except (ValueError, IndexError) as exc:
                raise ParseError(lineno, str(exc)) from None
            if not times or times[-1] != t:
                if t in times:
                    raise NonMonotonicDates(lineno, f"time {t} repeats out of order")
                times.append(t)
            if node not in nodes:
                nodes.append(node)
            cells[(t, node, var)] = val
    nodes.sort()
    variables = sorted({k[2] for k in cells})
    tidx = {t: i for i, t in enumerate(times)}
    nidx = {n: i for i, n in enumerate(nodes)}
    values = {v: np.full((len(times), len(nodes)), np.nan) for v in variables}
    for (t, n, v), val in cells.items():
        values[v][tidx[t], nidx[n]] = val
    return TidyTable(times, nodes, values)
