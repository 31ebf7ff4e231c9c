"""Design graphs: typed nodes and edges, matrix views, validation and JSON I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NodeClass",
    "Profile",
    "PROFILES",
    "get_profile",
    "NodeAttr",
    "EdgeAttr",
    "DesignGraph",
    "Violation",
    "GraphFormatError",
    "ConfigurationError",
    "adjacency",
    "degree",
    "normalized_adjacency",
    "feature_matrix",
    "validate",
    "serialize",
    "deserialize",
    "graph_to_dict",
    "graph_from_dict",
]


class ConfigurationError(ValueError):
    pass


class GraphFormatError(ValueError):
    """Malformed graph document. ``line`` and ``field`` locate the problem when known."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class NodeClass(IntEnum):
    SUPPLY = 0
    DEMAND = 1
    TRANSFER = 2


@dataclass(frozen=True)
class Profile:
    """Node/edge class profile: class count, edge-type bins and default attribute ranges."""

    name: str
    class_names: tuple[str, ...]
    capacity_bins: tuple[float, ...]
    cost_range: tuple[float, float]
    magnitude_ranges: dict = field(default_factory=dict)
    feature_names: tuple[str, ...] = ()

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_edge_types(self) -> int:
        return len(self.capacity_bins)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


SYNTHETIC = Profile(
    name="synthetic",
    class_names=("supply", "demand", "transfer"),
    capacity_bins=(2.0, 6.0, 12.0),
    cost_range=(0.5, 2.0),
    magnitude_ranges={NodeClass.SUPPLY: (5.0, 15.0), NodeClass.DEMAND: (1.0, 5.0)},
    feature_names=(
        "is_supply",
        "is_demand",
        "is_transfer",
        "magnitude",
        "degree",
        "mean_incident_capacity",
    ),
)

PROFILES: dict[str, Profile] = {SYNTHETIC.name: SYNTHETIC}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"unknown profile {name!r}") from None


@dataclass(frozen=True)
class NodeAttr:
    id: int
    cls: int
    magnitude: float
    pos: tuple[float, float]


@dataclass(frozen=True)
class EdgeAttr:
    u: int
    v: int
    type: int
    capacity: float
    unit_cost: float

    @property
    def key(self) -> tuple[int, int]:
        return (self.u, self.v) if self.u < self.v else (self.v, self.u)


@dataclass(frozen=True)
class DesignGraph:
    nodes: tuple[NodeAttr, ...]
    edges: tuple[EdgeAttr, ...]
    profile: str = SYNTHETIC.name

    def __post_init__(self):
        # accept lists but store tuples so instances stay hashable and immutable
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def classes(self) -> np.ndarray:
        return np.array([n.cls for n in self.nodes], dtype=np.int64)

    def magnitudes(self) -> np.ndarray:
        return np.array([n.magnitude for n in self.nodes], dtype=np.float64)

    def positions(self) -> np.ndarray:
        return np.array([n.pos for n in self.nodes], dtype=np.float64).reshape(-1, 2)

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in self.nodes]
        for e in self.edges:
            nbrs[e.u].append(e.v)
            nbrs[e.v].append(e.u)
        return [sorted(n) for n in nbrs]

    def edge_lookup(self) -> dict[tuple[int, int], EdgeAttr]:
        return {e.key: e for e in self.edges}

    def subgraph(self, keep_nodes: Iterable[int], keep_edges: Iterable[int] | None = None) -> "DesignGraph":
        """Induced subgraph on ``keep_nodes`` (ids relabelled consecutively, order kept).

        If ``keep_edges`` (edge indices) is given, only those edges are candidates.
        """
        keep = sorted(set(keep_nodes))
        remap = {old: new for new, old in enumerate(keep)}
        nodes = [
            NodeAttr(remap[n.id], n.cls, n.magnitude, n.pos) for n in self.nodes if n.id in remap
        ]
        edge_idx = range(len(self.edges)) if keep_edges is None else sorted(set(keep_edges))
        edges = []
        for k in edge_idx:
            e = self.edges[k]
            if e.u in remap and e.v in remap:
                edges.append(EdgeAttr(remap[e.u], remap[e.v], e.type, e.capacity, e.unit_cost))
        return DesignGraph(tuple(nodes), tuple(edges), self.profile)

    def permuted(self, perm: Sequence[int]) -> "DesignGraph":
        """Relabel node ``i`` as ``perm[i]``; edge order is kept."""
        perm = list(perm)
        nodes = [None] * len(self.nodes)
        for n in self.nodes:
            nodes[perm[n.id]] = NodeAttr(perm[n.id], n.cls, n.magnitude, n.pos)
        edges = [EdgeAttr(perm[e.u], perm[e.v], e.type, e.capacity, e.unit_cost) for e in self.edges]
        return DesignGraph(tuple(nodes), tuple(edges), self.profile)


# ---------------------------------------------------------------------------
# matrix views


def adjacency(graph: DesignGraph) -> np.ndarray:
    """Symmetric capacity-weighted adjacency matrix."""
    n = graph.n_nodes
    A = np.zeros((n, n), dtype=np.float64)
    for e in graph.edges:
        A[e.u, e.v] = e.capacity
        A[e.v, e.u] = e.capacity
    return A


def degree(adj: np.ndarray) -> np.ndarray:
    return np.diag(adj.sum(axis=1))


def normalized_adjacency(adj: np.ndarray, deg: np.ndarray | None = None) -> np.ndarray:
    """D^-1/2 A D^-1/2 with D_ii^-1/2 := 0 for zero-degree nodes."""
    if deg is None:
        deg = degree(adj)
    d = np.diag(deg)
    inv_sqrt = np.zeros_like(d)
    pos = d > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(d[pos])
    return inv_sqrt[:, None] * adj * inv_sqrt[None, :]


def feature_matrix(graph: DesignGraph) -> np.ndarray:
    """N x f node features: one-hot class, magnitude, degree, mean incident capacity."""
    profile = get_profile(graph.profile)
    n, c = graph.n_nodes, profile.n_classes
    X = np.zeros((n, c + 3), dtype=np.float64)
    deg = np.zeros(n)
    cap_sum = np.zeros(n)
    for e in graph.edges:
        for k in (e.u, e.v):
            deg[k] += 1
            cap_sum[k] += e.capacity
    for node in graph.nodes:
        X[node.id, node.cls] = 1.0
        X[node.id, c] = node.magnitude
    X[:, c + 1] = deg
    np.divide(cap_sum, deg, out=X[:, c + 2], where=deg > 0)
    return X


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    where: str
    rule: str
    message: str

    def __str__(self) -> str:
        return f"{self.where}: {self.rule}: {self.message}"


def validate(graph: DesignGraph) -> list[Violation]:
    """Return every invariant violation; an empty list means the graph is valid."""
    out: list[Violation] = []
    if graph.profile not in PROFILES:
        return [Violation("graph", "profile", f"unknown profile {graph.profile!r}")]
    profile = PROFILES[graph.profile]

    for i, node in enumerate(graph.nodes):
        where = f"node {node.id}"
        if node.id != i:
            out.append(Violation(where, "ids", f"expected consecutive id {i}"))
        if not (0 <= node.cls < profile.n_classes):
            out.append(Violation(where, "class", f"class {node.cls} outside [0, {profile.n_classes})"))
        if not math.isfinite(node.magnitude) or node.magnitude < 0:
            out.append(Violation(where, "magnitude", f"magnitude {node.magnitude} must be finite and >= 0"))
        elif node.cls == NodeClass.TRANSFER and node.magnitude != 0:
            out.append(Violation(where, "magnitude", "transfer node must have magnitude 0"))
        if len(node.pos) != 2 or not all(math.isfinite(p) and 0.0 <= p <= 1.0 for p in node.pos):
            out.append(Violation(where, "position", f"position {node.pos} outside unit square"))

    n = graph.n_nodes
    seen: set[tuple[int, int]] = set()
    for k, e in enumerate(graph.edges):
        where = f"edge {k} ({e.u},{e.v})"
        if not (0 <= e.u < n and 0 <= e.v < n):
            out.append(Violation(where, "endpoints", "endpoint references missing node"))
            continue
        if e.u == e.v:
            out.append(Violation(where, "self-loop", "edge endpoints must differ"))
        if e.key in seen:
            out.append(Violation(where, "duplicate", "more than one edge between node pair"))
        seen.add(e.key)
        if not (0 <= e.type < profile.n_edge_types):
            out.append(Violation(where, "type", f"edge type {e.type} outside [0, {profile.n_edge_types})"))
        if not (math.isfinite(e.capacity) and e.capacity > 0):
            out.append(Violation(where, "capacity", f"capacity {e.capacity} must be > 0"))
        if not (math.isfinite(e.unit_cost) and e.unit_cost >= 0):
            out.append(Violation(where, "unit_cost", f"unit cost {e.unit_cost} must be >= 0"))
    return out


# ---------------------------------------------------------------------------
# JSON documents

_GRAPH_KEYS = {"profile", "nodes", "edges"}
_NODE_KEYS = {"id", "class", "magnitude", "pos"}
_EDGE_KEYS = {"u", "v", "type", "capacity", "unit_cost"}


def graph_to_dict(graph: DesignGraph) -> dict:
    return {
        "profile": graph.profile,
        "nodes": [
            {"id": n.id, "class": int(n.cls), "magnitude": n.magnitude, "pos": [n.pos[0], n.pos[1]]}
            for n in graph.nodes
        ],
        "edges": [
            {"u": e.u, "v": e.v, "type": e.type, "capacity": e.capacity, "unit_cost": e.unit_cost}
            for e in graph.edges
        ],
    }


def _check_keys(obj, allowed: set, required: set, ctx: str, line: int | None):
    if not isinstance(obj, dict):
        raise GraphFormatError(f"{ctx} must be an object", line=line, field=ctx)
    for key in obj:
        if key not in allowed:
            raise GraphFormatError(f"unknown field in {ctx}", line=line, field=key)
    for key in required:
        if key not in obj:
            raise GraphFormatError(f"missing field in {ctx}", line=line, field=key)


def _number(value, name: str, line: int | None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GraphFormatError("expected a number", line=line, field=name)
    return float(value)


def _integer(value, name: str, line: int | None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GraphFormatError("expected an integer", line=line, field=name)
    return value


def graph_from_dict(doc: dict, line: int | None = None, extra_keys: Iterable[str] = ()) -> DesignGraph:
    allowed = _GRAPH_KEYS | set(extra_keys)
    _check_keys(doc, allowed, _GRAPH_KEYS, "graph", line)
    if not isinstance(doc["profile"], str):
        raise GraphFormatError("expected a string", line=line, field="profile")
    if not isinstance(doc["nodes"], list) or not isinstance(doc["edges"], list):
        raise GraphFormatError("nodes and edges must be arrays", line=line, field="nodes")
    nodes = []
    for nd in doc["nodes"]:
        _check_keys(nd, _NODE_KEYS, _NODE_KEYS, "node", line)
        pos = nd["pos"]
        if not isinstance(pos, list) or len(pos) != 2:
            raise GraphFormatError("pos must be [x, y]", line=line, field="pos")
        nodes.append(
            NodeAttr(
                _integer(nd["id"], "id", line),
                _integer(nd["class"], "class", line),
                _number(nd["magnitude"], "magnitude", line),
                (_number(pos[0], "pos", line), _number(pos[1], "pos", line)),
            )
        )
    edges = []
    for ed in doc["edges"]:
        _check_keys(ed, _EDGE_KEYS, _EDGE_KEYS, "edge", line)
        edges.append(
            EdgeAttr(
                _integer(ed["u"], "u", line),
                _integer(ed["v"], "v", line),
                _integer(ed["type"], "type", line),
                _number(ed["capacity"], "capacity", line),
                _number(ed["unit_cost"], "unit_cost", line),
            )
        )
    return DesignGraph(tuple(nodes), tuple(edges), doc["profile"])


def serialize(graph: DesignGraph) -> str:
    return json.dumps(graph_to_dict(graph), separators=(",", ":"))


def deserialize(text: str) -> DesignGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return graph_from_dict(doc)
