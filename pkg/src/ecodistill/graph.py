"""Watershed graphs: construction from D8 grids, ordering, coarsening."""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    CycleDetected,
    DirectionIntoNodata,
    EmptyGrid,
    IncompleteMap,
    InvalidDirectionCode,
    UnknownMethod,
    ValidationError,
)

# D8 code -> (drow, dcol); rows grow southward
D8_OFFSETS = {
    1: (0, 1),     # E
    2: (1, 1),     # SE
    4: (1, 0),     # S
    8: (1, -1),    # SW
    16: (0, -1),   # W
    32: (-1, -1),  # NW
    64: (-1, 0),   # N
    128: (-1, 1),  # NE
}

WEIGHT_TOL = 1e-12


class GraphKind(str, Enum):
    LUMPED = "Lumped"
    SEMI_DISTRIBUTED = "SemiDistributed"
    DISTRIBUTED_GRID = "DistributedGrid"


class CoarseningMethod(str, Enum):
    CLUSTERING = "Clustering"
    SELECTION = "Selection"


@dataclass(frozen=True)
class NodeAttributes:
    area: float
    elevation: float = 0.0
    soil_class: int = 0
    landuse_class: int = 0


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    weight: float = 1.0


@dataclass(frozen=True)
class GridMeta:
    nrows: int
    ncols: int
    cellsize: float
    xllcorner: float = 0.0
    yllcorner: float = 0.0
    nodata: float = -9999.0
    # (row, col) of every node, indexed by NodeId
    cells: tuple = ()


@dataclass(frozen=True)
class WatershedGraph:
    """Directed graph of spatial units. Treat as immutable once built."""

    nodes: tuple
    edges: tuple = ()
    grid_meta: GridMeta | None = None
    soil_catalog: frozenset | None = None
    landuse_catalog: frozenset | None = None
    _out: dict = field(default=None, repr=False, compare=False)
    _in: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        out, inc = defaultdict(list), defaultdict(list)
        for e in self.edges:
            out[e.src].append(e)
            inc[e.dst].append(e)
        object.__setattr__(self, "_out", dict(out))
        object.__setattr__(self, "_in", dict(inc))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def kind(self) -> GraphKind:
        # grid metadata wins over the single-edgeless-node rule (a 1x1 grid is still a grid)
        if self.grid_meta is not None:
            return GraphKind.DISTRIBUTED_GRID
        if not self.edges and len(self.nodes) == 1:
            return GraphKind.LUMPED
        return GraphKind.SEMI_DISTRIBUTED

    def out_edges(self, v: int) -> list:
        return self._out.get(v, [])

    def in_edges(self, v: int) -> list:
        return self._in.get(v, [])

    def upstream(self, v: int) -> list:
        return [e.src for e in self.in_edges(v)]

    def areas(self) -> np.ndarray:
        return np.array([n.area for n in self.nodes], dtype=np.float64)

    def outlets(self) -> list:
        return [v for v in range(self.n_nodes) if not self.out_edges(v)]


def lumped_graph(area: float = 1.0, **attrs) -> WatershedGraph:
    return WatershedGraph(nodes=(NodeAttributes(area=area, **attrs),))


# ------------------------------------------------------------------ building

def read_esri_ascii(path) -> tuple[np.ndarray, dict]:
    """Read an ESRI ASCII grid; returns (values, header)."""
    header = {}
    lines = Path(path).read_text().splitlines()
    keys = {"ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value",
            "xllcenter", "yllcenter"}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) == 2 and parts[0].lower() in keys:
            header[parts[0].lower()] = float(parts[1])
            i += 1
        else:
            break
    for k in ("ncols", "nrows", "cellsize"):
        if k not in header:
            raise ValidationError(f"{path}: missing header key {k}")
    data = np.loadtxt(lines[i:], dtype=np.float64, ndmin=2)
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    if data.shape != (nrows, ncols):
        raise ValidationError(f"{path}: expected {nrows}x{ncols} values, got {data.shape}")
    header.setdefault("nodata_value", -9999.0)
    header.setdefault("xllcorner", header.get("xllcenter", 0.0))
    header.setdefault("yllcorner", header.get("yllcenter", 0.0))
    return data, header


def write_esri_ascii(path, values: np.ndarray, cellsize: float, xllcorner=0.0,
                     yllcorner=0.0, nodata=-9999.0) -> None:
    values = np.asarray(values)
    nrows, ncols = values.shape
    head = (f"ncols {ncols}\nnrows {nrows}\nxllcorner {xllcorner!r}\n"
            f"yllcorner {yllcorner!r}\ncellsize {cellsize!r}\nNODATA_value {nodata!r}\n")
    body = "\n".join(" ".join(format(float(v), ".17g") for v in row) for row in values)
    Path(path).write_text(head + body + "\n")


def build_from_flow_direction_grid(d8, cellsize: float, cell_attrs: dict | None = None,
                                   nodata_mask=None, nodata_value=None,
                                   xllcorner: float = 0.0, yllcorner: float = 0.0) -> WatershedGraph:
    """One node per valid cell (row-major ids), one unit-weight edge along each D8 pointer.

    Cells pointing off the grid are outlets. ``cell_attrs`` may hold
    ``elevation``, ``soil_class`` and ``landuse_class`` grids.
    """
    d8 = np.asarray(d8)
    if d8.ndim != 2 or d8.size == 0:
        raise EmptyGrid("flow direction grid is empty")
    mask = np.zeros(d8.shape, dtype=bool) if nodata_mask is None else np.asarray(nodata_mask, bool)
    if nodata_value is not None:
        mask = mask | (d8 == nodata_value)
    if mask.all():
        raise EmptyGrid("flow direction grid has no valid cells")
    nrows, ncols = d8.shape
    ids = -np.ones(d8.shape, dtype=np.int64)
    cells = []
    for r in range(nrows):
        for c in range(ncols):
            if not mask[r, c]:
                ids[r, c] = len(cells)
                cells.append((r, c))
    cell_attrs = cell_attrs or {}
    nodes, edges = [], []
    area = float(cellsize) ** 2
    for nid, (r, c) in enumerate(cells):
        code = d8[r, c]
        if code != int(code) or int(code) not in D8_OFFSETS:
            raise InvalidDirectionCode(f"cell ({r}, {c}) has direction code {code!r}")
        dr, dc = D8_OFFSETS[int(code)]
        rr, cc = r + dr, c + dc
        if 0 <= rr < nrows and 0 <= cc < ncols:
            if mask[rr, cc]:
                raise DirectionIntoNodata(f"cell ({r}, {c}) drains into nodata cell ({rr}, {cc})")
            edges.append(Edge(nid, int(ids[rr, cc]), 1.0))
        attrs = {"area": area}
        if "elevation" in cell_attrs:
            attrs["elevation"] = float(np.asarray(cell_attrs["elevation"])[r, c])
        for key in ("soil_class", "landuse_class"):
            if key in cell_attrs:
                attrs[key] = int(np.asarray(cell_attrs[key])[r, c])
        nodes.append(NodeAttributes(**attrs))
    meta = GridMeta(nrows=nrows, ncols=ncols, cellsize=float(cellsize), xllcorner=xllcorner,
                    yllcorner=yllcorner, nodata=-9999.0 if nodata_value is None else float(nodata_value),
                    cells=tuple(cells))
    return WatershedGraph(nodes=tuple(nodes), edges=tuple(edges), grid_meta=meta)


def load_d8_grid(path, **attr_paths) -> WatershedGraph:
    """Build a graph from an ESRI ASCII D8 file plus optional attribute grids."""
    d8, header = read_esri_ascii(path)
    attrs = {k: read_esri_ascii(p)[0] for k, p in attr_paths.items() if p is not None}
    return build_from_flow_direction_grid(
        d8, header["cellsize"], attrs, nodata_value=header["nodata_value"],
        xllcorner=header["xllcorner"], yllcorner=header["yllcorner"])


# ------------------------------------------------------------------ checking

def validate(g: WatershedGraph) -> list[str]:
    """All invariant violations found in ``g``; empty iff valid."""
    findings = []
    n = g.n_nodes
    if n == 0:
        findings.append("graph has no nodes")
    for i, node in enumerate(g.nodes):
        if not node.area > 0:
            findings.append(f"node {i}: area must be > 0, got {node.area!r}")
        if g.soil_catalog is not None and node.soil_class not in g.soil_catalog:
            findings.append(f"node {i}: soil class {node.soil_class} not in catalog")
        if g.landuse_catalog is not None and node.landuse_class not in g.landuse_catalog:
            findings.append(f"node {i}: land-use class {node.landuse_class} not in catalog")
    sums = defaultdict(list)
    for e in g.edges:
        if not (0 <= e.src < n and 0 <= e.dst < n):
            findings.append(f"edge {e.src}->{e.dst}: endpoint is not a valid node id")
        if e.src == e.dst:
            findings.append(f"edge {e.src}->{e.dst}: self-loop")
        if not 0.0 <= e.weight <= 1.0:
            findings.append(f"edge {e.src}->{e.dst}: weight {e.weight!r} outside [0, 1]")
        sums[e.src].append(e.weight)
    for src, ws in sorted(sums.items()):
        total = math.fsum(ws)
        if abs(total - 1.0) > WEIGHT_TOL:
            findings.append(f"node {src}: outgoing weights sum to {total!r}, expected 1")
    if g.grid_meta is not None and len(g.grid_meta.cells) != n:
        findings.append("grid metadata does not cover every node")
    return findings


def _find_cycle(pred, remaining) -> set:
    """Walk predecessors inside the unresolved subgraph until a node repeats.

    Every node Kahn's algorithm could not release still has a predecessor
    among the unreleased nodes, so the walk always closes a cycle.
    """
    path, seen = [], {}
    v = min(remaining)
    while v not in seen:
        seen[v] = len(path)
        path.append(v)
        v = min(u for u in pred[v] if u in remaining)
    return set(path[seen[v]:])


def topological_order(g: WatershedGraph) -> list[int]:
    """Kahn's algorithm; ready nodes are released in ascending id order."""
    n = g.n_nodes
    indeg = [0] * n
    succ = [[] for _ in range(n)]
    pred = [[] for _ in range(n)]
    for e in g.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
        pred[e.dst].append(e.src)
    heap = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for u in succ[v]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(heap, u)
    if len(order) != n:
        remaining = set(range(n)) - set(order)
        raise CycleDetected(_find_cycle(pred, remaining))
    return order


# ---------------------------------------------------------------- coarsening

@dataclass(frozen=True)
class CoarseningMap:
    fine_to_coarse: tuple
    method: CoarseningMethod = CoarseningMethod.CLUSTERING

    def __post_init__(self):
        m = tuple(int(c) for c in self.fine_to_coarse)
        object.__setattr__(self, "fine_to_coarse", m)
        object.__setattr__(self, "method", CoarseningMethod(self.method))
        if m:
            if min(m) < 0 or set(m) != set(range(max(m) + 1)):
                raise IncompleteMap("coarse ids must be dense in [0, K) and every id used")

    @property
    def n_coarse(self) -> int:
        return max(self.fine_to_coarse) + 1 if self.fine_to_coarse else 0

    def members(self) -> list[list[int]]:
        out = [[] for _ in range(self.n_coarse)]
        for v, c in enumerate(self.fine_to_coarse):
            out[c].append(v)
        return out

    def covers(self, g: WatershedGraph) -> None:
        if len(self.fine_to_coarse) != g.n_nodes:
            raise IncompleteMap(
                f"map covers {len(self.fine_to_coarse)} nodes, graph has {g.n_nodes}")


def _weighted_majority(values, weights) -> int:
    score = defaultdict(list)
    for v, w in zip(values, weights):
        score[v].append(w)
    best = max(math.fsum(ws) for ws in score.values())
    return min(v for v, ws in score.items() if math.fsum(ws) == best)


def coarsen(g: WatershedGraph, cmap: CoarseningMap) -> WatershedGraph:
    """Merge fine nodes into the clusters of ``cmap``.

    Areas add; elevation is area-weighted; categories take the area-weighted
    majority (ties to the smaller id). Crossing edges are re-weighted by the
    source member's area times its edge weight, then normalized per coarse
    source. Raises :class:`CycleDetected` if the coarse graph is cyclic.
    """
    cmap.covers(g)
    fc = cmap.fine_to_coarse
    nodes = []
    for members in cmap.members():
        areas = [g.nodes[v].area for v in members]
        total = math.fsum(areas)
        elev = math.fsum(g.nodes[v].area * g.nodes[v].elevation for v in members) / total
        nodes.append(NodeAttributes(
            area=total,
            elevation=elev,
            soil_class=_weighted_majority([g.nodes[v].soil_class for v in members], areas),
            landuse_class=_weighted_majority([g.nodes[v].landuse_class for v in members], areas),
        ))
    flows = defaultdict(list)
    for e in g.edges:
        a, b = fc[e.src], fc[e.dst]
        if a != b:
            flows[(a, b)].append(g.nodes[e.src].area * e.weight)
    per_src = defaultdict(dict)
    for (a, b), parts in flows.items():
        per_src[a][b] = math.fsum(parts)
    edges = []
    for a in sorted(per_src):
        total = math.fsum(per_src[a].values())
        for b in sorted(per_src[a]):
            edges.append(Edge(a, b, per_src[a][b] / total))
    coarse = WatershedGraph(nodes=tuple(nodes), edges=tuple(edges),
                            soil_catalog=g.soil_catalog, landuse_catalog=g.landuse_catalog)
    topological_order(coarse)
    return coarse


def coarse_mean(fine_values, g: WatershedGraph, cmap: CoarseningMap) -> np.ndarray:
    """Area-weighted mean of a per-fine-node field within each cluster."""
    cmap.covers(g)
    vals = np.asarray(fine_values, dtype=np.float64)
    out = np.empty(cmap.n_coarse)
    for c, members in enumerate(cmap.members()):
        areas = [g.nodes[v].area for v in members]
        out[c] = math.fsum(vals[v] * a for v, a in zip(members, areas)) / math.fsum(areas)
    return out


def uncoarsen_values(coarse_values, cmap: CoarseningMap, method: str = "Replicate",
                     g: WatershedGraph | None = None, blend: float = 0.5) -> np.ndarray:
    """Map per-cluster values back to fine nodes.

    ``Replicate`` copies each cluster value to its members. ``Interpolate``
    mixes a node's own cluster value with the edge-weighted mean of the
    cluster values of its fine-graph neighbours (both directions):
    ``(1 - blend) * own + blend * sum(w * nb) / sum(w)``.
    """
    coarse_values = np.asarray(coarse_values, dtype=np.float64)
    if coarse_values.shape[0] != cmap.n_coarse:
        raise IncompleteMap(f"{coarse_values.shape[0]} coarse values for {cmap.n_coarse} clusters")
    fc = np.asarray(cmap.fine_to_coarse, dtype=np.int64)
    own = coarse_values[fc]
    if method == "Replicate":
        return own
    if method != "Interpolate":
        raise UnknownMethod(f"unknown uncoarsening method {method!r}")
    if g is None:
        raise ValidationError("Interpolate needs the fine graph")
    cmap.covers(g)
    out = own.copy()
    for v in range(g.n_nodes):
        nbrs = [(e.dst, e.weight) for e in g.out_edges(v)] + [(e.src, e.weight) for e in g.in_edges(v)]
        wsum = math.fsum(w for _, w in nbrs)
        if wsum > 0:
            mixed = math.fsum(w * coarse_values[fc[u]] for u, w in nbrs) / wsum
            out[v] = (1.0 - blend) * own[v] + blend * mixed
    return out


# --------------------------------------------------------- map construction

def downstream_distance(g: WatershedGraph) -> np.ndarray:
    """Number of edges from each node to its outlet along the first out-edge."""
    order = topological_order(g)
    dist = np.zeros(g.n_nodes, dtype=np.int64)
    for v in reversed(order):
        outs = g.out_edges(v)
        if outs:
            dist[v] = 1 + min(dist[e.dst] for e in outs)
    return dist


def cluster_by_downstream_distance(g: WatershedGraph, k: int) -> CoarseningMap:
    """Group nodes into at most ``k`` bands of equal downstream-distance width."""
    dist = downstream_distance(g)
    top = int(dist.max()) + 1
    k = max(1, min(k, top))
    band = (dist * k) // top
    used = sorted(set(band.tolist()))
    relabel = {b: i for i, b in enumerate(used)}
    return CoarseningMap(tuple(relabel[b] for b in band.tolist()), CoarseningMethod.CLUSTERING)


def select_nodes(g: WatershedGraph, selected) -> CoarseningMap:
    """Each node joins the first selected node reached downstream (outlets always selected)."""
    chosen = set(int(v) for v in selected) | set(g.outlets())
    order = topological_order(g)
    owner = {}
    for v in reversed(order):
        if v in chosen:
            owner[v] = v
        else:
            downstream = [e.dst for e in g.out_edges(v)]
            owner[v] = owner[max(downstream, key=lambda u: (
                next(e.weight for e in g.out_edges(v) if e.dst == u), -u))]
    ranks = {c: i for i, c in enumerate(sorted(chosen))}
    return CoarseningMap(tuple(ranks[owner[v]] for v in range(g.n_nodes)), CoarseningMethod.SELECTION)
