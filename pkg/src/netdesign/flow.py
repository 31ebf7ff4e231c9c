"""Min-cost max-flow oracle and the flow-based design metrics.

Capacities and costs are floats, i.e. dyadic rationals; they are scaled by
their common power-of-two denominator into Python integers, so the solver
runs on exact integer arithmetic and the inputs are represented without loss.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .graph import DesignGraph, NodeClass, get_profile

_INF = float("inf")


class DegenerateNetworkError(ValueError):
    """Network has no supply or no demand node, so f_max is undefined."""


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class Arc:
    tail: int
    head: int
    capacity: float
    cost: float


@dataclass(frozen=True)
class FlowNetwork:
    n_nodes: int
    arcs: tuple[Arc, ...]
    source: int
    sink: int
    # arc index pair (forward u->v, backward v->u) for each undirected design edge
    edge_arcs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.source == self.sink:
            raise ValueError("source and sink must differ")
        for a in self.arcs:
            if a.capacity < 0:
                raise ValueError(f"negative capacity on arc {a}")


@dataclass(frozen=True)
class FlowResult:
    f_max: float
    total_cost: float
    arc_flows: tuple[float, ...]
    edge_flows: tuple[float, ...]  # signed net flow along (u -> v) per design edge


def augment_source_sink(graph: DesignGraph) -> FlowNetwork:
    """Attach a super-source to every supply node and every demand node to a super-sink."""
    get_profile(graph.profile)
    n = graph.n_nodes
    s, t = n, n + 1
    arcs: list[Arc] = []
    edge_arcs = []
    for e in graph.edges:
        edge_arcs.append((len(arcs), len(arcs) + 1))
        arcs.append(Arc(e.u, e.v, e.capacity, e.unit_cost))
        arcs.append(Arc(e.v, e.u, e.capacity, e.unit_cost))
    n_supply = n_demand = 0
    for node in graph.nodes:
        if node.cls == NodeClass.SUPPLY:
            arcs.append(Arc(s, node.id, node.magnitude, 0.0))
            n_supply += 1
        elif node.cls == NodeClass.DEMAND:
            arcs.append(Arc(node.id, t, node.magnitude, 0.0))
            n_demand += 1
    if n_supply == 0 or n_demand == 0:
        raise DegenerateNetworkError(
            f"network needs supply and demand nodes (supply={n_supply}, demand={n_demand})"
        )
    return FlowNetwork(n + 2, tuple(arcs), s, t, tuple(edge_arcs))


def _common_scale(values) -> int:
    """Smallest power of two turning every float in ``values`` into an integer."""
    scale = 1
    for x in values:
        den = float(x).as_integer_ratio()[1]
        if den > scale:
            scale = den
    return scale


def solve_scaled(n: int, arcs: list[tuple[int, int, int, int]], s: int, t: int) -> tuple[int, int, list[int]]:
    """Successive shortest augmenting paths on integer data.

    ``arcs`` holds (tail, head, capacity, cost) with integer capacity/cost.
    Returns (flow value, total cost, per-arc flow).
    """
    # residual graph in flat arrays; arc 2k is forward, 2k+1 its reverse
    head: list[int] = []
    cap: list[int] = []
    cost: list[int] = []
    out: list[list[int]] = [[] for _ in range(n)]
    for tail, hd, c, w in arcs:
        out[tail].append(len(head))
        head.append(hd)
        cap.append(c)
        cost.append(w)
        out[hd].append(len(head))
        head.append(tail)
        cap.append(0)
        cost.append(-w)

    # Bellman-Ford bootstrap for potentials (handles negative arc costs without negative cycles)
    pot = [0] * n
    for _ in range(n):
        changed = False
        for u in range(n):
            pu = pot[u]
            for a in out[u]:
                if cap[a] > 0 and pu + cost[a] < pot[head[a]]:
                    pot[head[a]] = pu + cost[a]
                    changed = True
        if not changed:
            break

    flow = 0
    total = 0
    while True:
        dist = [_INF] * n
        prev = [-1] * n
        dist[s] = 0
        heap = [(0, s)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            pu = pot[u]
            for a in out[u]:
                if cap[a] <= 0:
                    continue
                v = head[a]
                nd = d + cost[a] + pu - pot[v]
                if nd < dist[v]:
                    dist[v] = nd
                    prev[v] = a
                    heapq.heappush(heap, (nd, v))
        if dist[t] == _INF:
            break
        for v in range(n):
            if dist[v] != _INF:
                pot[v] += dist[v]
        # bottleneck along the path
        push = None
        v = t
        while v != s:
            a = prev[v]
            push = cap[a] if push is None else min(push, cap[a])
            v = head[a ^ 1]
        v = t
        while v != s:
            a = prev[v]
            cap[a] -= push
            cap[a ^ 1] += push
            total += push * cost[a]
            v = head[a ^ 1]
        flow += push

    arc_flow = [cap[2 * k + 1] for k in range(len(arcs))]
    return flow, total, arc_flow


def min_cost_max_flow(net: FlowNetwork) -> FlowResult:
    """Maximum s-t flow of minimum total cost among all maximum flows."""
    cs = _common_scale(a.capacity for a in net.arcs)
    ws = _common_scale(a.cost for a in net.arcs)
    scaled = [
        (a.tail, a.head, int(a.capacity * cs), int(a.cost * ws)) for a in net.arcs
    ]
    flow, total, arc_flow = solve_scaled(net.n_nodes, scaled, net.source, net.sink)
    arc_flows = tuple(f / cs for f in arc_flow)
    edge_flows = tuple((arc_flow[i] - arc_flow[j]) / cs for i, j in net.edge_arcs)
    return FlowResult(flow / cs, total / (cs * ws), arc_flows, edge_flows)


def solve_graph(graph: DesignGraph) -> FlowResult:
    return min_cost_max_flow(augment_source_sink(graph))


def capacity_ratio(graph: DesignGraph, flows: FlowResult) -> float:
    """Total absolute edge flow over total installed edge capacity."""
    if graph.n_edges == 0:
        raise UndefinedMetricError("capacity ratio undefined for a graph without edges")
    num = sum(abs(f) for f in flows.edge_flows)
    den = sum(e.capacity for e in graph.edges)
    return num / den


def edge_cost(graph: DesignGraph, a: float) -> float:
    if a <= 0:
        raise ValueError("unit capacity cost a must be > 0")
    return sum(a * e.capacity for e in graph.edges)


def combined_label(capacity_ratio_value: float, edge_cost_value: float, alpha: float, K: float) -> float:
    """Weighted capacity-ratio / normalized edge-cost label (lower is better)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if K <= 0:
        raise ValueError("K must be > 0")
    return alpha * capacity_ratio_value + (1.0 - alpha) * edge_cost_value / K


def synthetic_label(graph: DesignGraph) -> float:
    """Magnitude of the minimum-cost maximum flow (higher is better)."""
    return solve_graph(graph).f_max


def delivered_demand(graph: DesignGraph) -> float:
    """Commodity delivered to demand nodes under the min-cost max-flow."""
    return solve_graph(graph).f_max


def graph_metrics(graph: DesignGraph, a: float = 1.0, alpha: float = 0.5, K: float | None = None) -> dict:
    """f_max, capacity ratio, edge cost and combined label for one design."""
    res = solve_graph(graph)
    cr = capacity_ratio(graph, res) if graph.n_edges else 0.0
    ce = edge_cost(graph, a)
    if K is None:
        K = ce if ce > 0 else 1.0
    return {
        "f_max": res.f_max,
        "total_cost": res.total_cost,
        "capacity_ratio": cr,
        "edge_cost": ce,
        "Q": combined_label(cr, ce, alpha, K),
    }
