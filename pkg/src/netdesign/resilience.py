"""Regional disruption simulation, expected demand not supplied, and resilience ratio.

A design is laid on a G x G meshgrid over the unit square. An event picks an
epicenter cell; every node and edge then fails independently with probability
p0 * gamma ** d, d being the Chebyshev cell distance to the epicenter. Lost
demand is the drop in min-cost max-flow delivery after removing what failed.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .flow import DegenerateNetworkError, UndefinedMetricError, delivered_demand
from .graph import ConfigurationError, DesignGraph
from .seeding import derive_seed

__all__ = [
    "DisruptionEvent",
    "EDNSResult",
    "EventOutcome",
    "GridMap",
    "PerformanceCurve",
    "ResilienceConfig",
    "SampleRecord",
    "UndefinedMetricError",
    "apply_event",
    "curve_from_order",
    "damaged_graph",
    "edns",
    "edns_enumerated",
    "edns_exact",
    "expected_loss_exact",
    "failure_probs",
    "map_to_grid",
    "recovery_curve",
    "resilience_ratio",
]


@dataclass(frozen=True)
class ResilienceConfig:
    grid: int = 8
    p0: float = 0.9
    gamma: float = 0.5
    n_samples: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.grid < 1:
            raise ConfigurationError("grid must be >= 1")
        if not 0.0 < self.p0 <= 1.0:
            raise ConfigurationError("p0 must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return {"grid": self.grid, "p0": self.p0, "gamma": self.gamma, "n_samples": self.n_samples, "seed": self.seed}


@dataclass(frozen=True)
class GridMap:
    G: int
    node_cells: np.ndarray  # (N, 2) rows of (row, col)
    edge_cells: np.ndarray  # (E, 2)


def _cell(xy: np.ndarray, G: int) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    rc = np.stack([np.floor(y * G), np.floor(x * G)], axis=1).astype(np.int64)
    return np.clip(rc, 0, G - 1)


def map_to_grid(graph: DesignGraph, G: int) -> GridMap:
    """Cell (row, col) = (floor(y G), floor(x G)) clamped; an edge sits in its midpoint's cell."""
    if G < 1:
        raise ConfigurationError("grid must be >= 1")
    pos = graph.positions()
    mids = np.array([(pos[e.u] + pos[e.v]) / 2 for e in graph.edges]).reshape(-1, 2)
    return GridMap(G, _cell(pos, G), _cell(mids, G))


@dataclass(frozen=True)
class DisruptionEvent:
    cell: tuple[int, int]
    probability: float = 1.0
    p0: float = 0.9
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.probability <= 1.0:
            raise ConfigurationError("event probability must lie in (0, 1]")
        if not 0.0 < self.p0 <= 1.0:
            raise ConfigurationError("p0 must lie in (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")

    def check(self, G: int) -> None:
        r, c = self.cell
        if not (0 <= r < G and 0 <= c < G):
            raise ConfigurationError(f"epicenter {self.cell} outside a {G}x{G} grid")


def failure_probs(event: DisruptionEvent, cells: np.ndarray) -> np.ndarray:
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    d = np.abs(cells - np.asarray(event.cell)).max(axis=1)
    return np.clip(event.p0 * event.gamma**d, 0.0, 1.0)


@dataclass(frozen=True)
class EventOutcome:
    failed_nodes: tuple[int, ...]
    failed_edges: tuple[int, ...]  # edges that failed themselves, by index
    nominal: float
    damaged: float

    @property
    def lost(self) -> float:
        return self.nominal - self.damaged

    @property
    def n_failed(self) -> int:
        return len(self.failed_nodes) + len(self.failed_edges)


def served(graph: DesignGraph) -> float:
    """Delivered demand, 0 once no supply or no demand node is left."""
    try:
        return delivered_demand(graph)
    except DegenerateNetworkError:
        return 0.0


def damaged_graph(graph: DesignGraph, failed_nodes, failed_edges) -> DesignGraph:
    """Drop failed nodes (with their incident edges) and failed edges.

    Surviving nodes keep their positions in the id order; ids are relabelled.
    """
    dead = set(failed_nodes)
    gone = set(failed_edges)
    keep_edges = [k for k in range(graph.n_edges) if k not in gone]
    return graph.subgraph([v for v in range(graph.n_nodes) if v not in dead], keep_edges)


def _outcome(graph, failed_nodes, failed_edges, nominal) -> EventOutcome:
    if not failed_nodes and not failed_edges:
        return EventOutcome((), (), nominal, nominal)
    after = served(damaged_graph(graph, failed_nodes, failed_edges))
    # removing components never raises the max flow; clip float dust
    after = min(after, nominal)
    return EventOutcome(tuple(failed_nodes), tuple(failed_edges), nominal, after)


def _probs(graph, event, grid: GridMap, hardened) -> tuple[np.ndarray, np.ndarray]:
    event.check(grid.G)
    pn = failure_probs(event, grid.node_cells)
    pe = failure_probs(event, grid.edge_cells)
    if hardened:
        pn[list(hardened)] = 0.0
    return pn, pe


def apply_event(
    graph: DesignGraph,
    event: DisruptionEvent,
    seed: int,
    G: int = 8,
    hardened=(),
    nominal: float | None = None,
) -> EventOutcome:
    """Draw independent failures for one event and re-solve the flow.

    Node and edge uniforms come from separate child streams, so two designs
    sharing a node/edge prefix see the same draws on the shared components.
    ``hardened`` node ids never fail.
    """
    grid = map_to_grid(graph, G)
    pn, pe = _probs(graph, event, grid, hardened)
    un = np.random.default_rng(derive_seed(seed, 1)).random(graph.n_nodes)
    ue = np.random.default_rng(derive_seed(seed, 2)).random(graph.n_edges)
    nodes = np.flatnonzero(un < pn).tolist()
    edges = np.flatnonzero(ue < pe).tolist()
    if nominal is None:
        nominal = served(graph)
    return _outcome(graph, nodes, edges, nominal)


# ---------------------------------------------------------------------------
# expected demand not supplied


@dataclass(frozen=True)
class SampleRecord:
    sample: int
    cell: tuple[int, int]
    outcome: EventOutcome


@dataclass(frozen=True)
class EDNSResult:
    edns: float
    stderr: float
    n_samples: int
    samples: tuple[SampleRecord, ...] = field(default=(), repr=False)


def edns(
    graph: DesignGraph,
    config: ResilienceConfig | None = None,
    cell_weights: np.ndarray | None = None,
    hardened=(),
    keep_samples: bool = False,
) -> EDNSResult:
    """Monte Carlo mean of lost demand over i.i.d. events.

    Epicenters are uniform over cells unless ``cell_weights`` (G x G,
    nonnegative) is given. Sample i uses seeds derived from (seed, i) only.
    """
    cfg = config or ResilienceConfig()
    G = cfg.grid
    n_cells = G * G
    if cell_weights is None:
        w = np.full(n_cells, 1.0 / n_cells)
    else:
        w = np.asarray(cell_weights, dtype=np.float64).reshape(-1)
        if w.shape != (n_cells,) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError(f"cell_weights must be a nonnegative {G}x{G} map with positive mass")
        w = w / w.sum()
    nominal = served(graph)
    losses = np.empty(cfg.n_samples)
    records = []
    for i in range(cfg.n_samples):
        s = derive_seed(cfg.seed, i)
        k = int(np.random.default_rng(derive_seed(s, 0)).choice(n_cells, p=w))
        event = DisruptionEvent((k // G, k % G), 1.0, cfg.p0, cfg.gamma)
        out = apply_event(graph, event, s, G, hardened, nominal)
        losses[i] = out.lost
        if keep_samples:
            records.append(SampleRecord(i, event.cell, out))
    mean = math.fsum(losses) / cfg.n_samples
    se = float(losses.std(ddof=1) / math.sqrt(cfg.n_samples)) if cfg.n_samples > 1 else 0.0
    return EDNSResult(mean, se, cfg.n_samples, tuple(records))


def edns_exact(terms) -> float:
    """Sum of P_e * C_e over an explicit event list of (P_e, C_e) pairs or (P_e, EventOutcome)."""
    total = []
    for p, c in terms:
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"event probability {p} outside [0, 1]")
        total.append(p * (c.lost if isinstance(c, EventOutcome) else float(c)))
    return math.fsum(total)


def expected_loss_exact(graph: DesignGraph, event: DisruptionEvent, G: int = 8, hardened=(), max_components: int = 16) -> float:
    """E[C_e] for one event by enumerating every failure pattern of components with p > 0."""
    grid = map_to_grid(graph, G)
    pn, pe = _probs(graph, event, grid, hardened)
    comps = [("n", v, p) for v, p in enumerate(pn) if p > 0] + [("e", k, p) for k, p in enumerate(pe) if p > 0]
    if len(comps) > max_components:
        raise ValueError(f"{len(comps)} failure-prone components; enumeration capped at {max_components}")
    nominal = served(graph)
    terms = []
    for pattern in itertools.product((False, True), repeat=len(comps)):
        prob = math.prod(p if f else 1.0 - p for f, (_, _, p) in zip(pattern, comps))
        if prob == 0.0:
            continue
        nodes = [i for f, (kind, i, _) in zip(pattern, comps) if f and kind == "n"]
        edges = [i for f, (kind, i, _) in zip(pattern, comps) if f and kind == "e"]
        terms.append(prob * _outcome(graph, nodes, edges, nominal).lost)
    return math.fsum(terms)


def edns_enumerated(graph: DesignGraph, events, G: int = 8, hardened=()) -> float:
    """Sum over events of P_e * E[C_e | e], each expectation enumerated exactly."""
    return math.fsum(e.probability * expected_loss_exact(graph, e, G, hardened) for e in events)


# ---------------------------------------------------------------------------
# recovery and resilience ratio


@dataclass(frozen=True)
class PerformanceCurve:
    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if t.ndim != 1 or t.shape != v.shape or len(t) < 2:
            raise ValueError("a curve needs >= 2 matching time/value samples")
        if not t[0] < t[-1]:
            raise ValueError("curve time must increase")
        if np.any(v < 0):
            raise ValueError("performance values must be >= 0")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value: float, t) -> "PerformanceCurve":
        t = np.asarray(t, dtype=np.float64)
        return cls(t, np.full_like(t, value))

    def area(self) -> float:
        return float(np.trapezoid(self.values, self.t))


def resilience_ratio(curve: PerformanceCurve, nominal: PerformanceCurve) -> float:
    """Area under the disrupted curve over area under the nominal one."""
    if not np.array_equal(curve.t, nominal.t):
        raise ValueError("curves must share a time grid")
    den = nominal.area()
    if den <= 0:
        raise UndefinedMetricError("nominal curve has zero area")
    return curve.area() / den


def _components(outcome: EventOutcome) -> list[tuple[str, int]]:
    return [("n", v) for v in outcome.failed_nodes] + [("e", k) for k in outcome.failed_edges]


def curve_from_order(graph: DesignGraph, outcome: EventOutcome, order) -> PerformanceCurve:
    """Delivered demand after each restoration, following ``order`` (a permutation of the failed components)."""
    comps = _components(outcome)
    order = list(order)
    if sorted(order) != list(range(len(comps))):
        raise ValueError("order must be a permutation of the failed components")
    nodes, edges = set(outcome.failed_nodes), set(outcome.failed_edges)
    values = [outcome.damaged]
    for k in order:
        kind, i = comps[k]
        (nodes if kind == "n" else edges).discard(i)
        values.append(min(served(damaged_graph(graph, nodes, edges)), outcome.nominal))
    if len(values) == 1:
        values.append(outcome.nominal)
    values[-1] = outcome.nominal
    return PerformanceCurve(np.arange(len(values), dtype=np.float64), np.array(values))


def recovery_curve(graph: DesignGraph, outcome: EventOutcome, policy: str = "random", seed: int = 0) -> PerformanceCurve:
    """One failed component restored per unit step.

    ``random`` repairs in a seeded random order; ``largest-demand-first``
    always repairs the component whose restoration recovers the most demand
    now (ties: nodes before edges, then lower id). An empty outcome gives the
    flat nominal curve over [0, 1].
    """
    comps = _components(outcome)
    if policy == "random":
        order = np.random.default_rng(derive_seed(seed, 61)).permutation(len(comps)).tolist()
        return curve_from_order(graph, outcome, order)
    if policy != "largest-demand-first":
        raise ValueError(f"unknown recovery policy {policy!r}")
    nodes, edges = set(outcome.failed_nodes), set(outcome.failed_edges)
    left = list(range(len(comps)))
    order = []
    while left:
        best, best_val = left[0], -1.0
        for k in left:
            kind, i = comps[k]
            n2 = nodes - {i} if kind == "n" else nodes
            e2 = edges - {i} if kind == "e" else edges
            val = served(damaged_graph(graph, n2, e2))
            if val > best_val:
                best, best_val = k, val
        kind, i = comps[best]
        (nodes if kind == "n" else edges).discard(i)
        order.append(best)
        left.remove(best)
    return curve_from_order(graph, outcome, order)
