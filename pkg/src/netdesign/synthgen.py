"""Labelled corpus of small-world supply/demand network designs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import networkx as nx
import numpy as np

from . import flow
from .graph import (
    SYNTHETIC,
    ConfigurationError,
    DesignGraph,
    EdgeAttr,
    GraphFormatError,
    NodeAttr,
    NodeClass,
    graph_from_dict,
    graph_to_dict,
    validate,
)
from .seeding import derive_seed

MAX_RESAMPLES = 20


@dataclass(frozen=True)
class SynthConfig:
    n: int = 33
    k: int = 2
    p_rewire: float = 0.3
    beta: float = 1.0
    supply_fraction: float = 0.15
    demand_prob: float = 0.7
    supply_range: tuple[float, float] = (5.0, 15.0)
    demand_range: tuple[float, float] = (1.0, 5.0)
    capacity_bins: tuple[float, ...] = SYNTHETIC.capacity_bins
    cost_range: tuple[float, float] = SYNTHETIC.cost_range
    seed: int = 0

    def __post_init__(self):
        for name in ("supply_range", "demand_range", "cost_range", "capacity_bins"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        self.check()

    def check(self):
        if not (self.n > self.k >= 2) or self.k % 2:
            raise ConfigurationError(f"need n > k >= 2 with k even (n={self.n}, k={self.k})")
        if not 0.0 <= self.p_rewire <= 1.0:
            raise ConfigurationError("p_rewire must lie in [0, 1]")
        if self.beta < 0:
            raise ConfigurationError("beta must be >= 0")
        for name in ("supply_range", "demand_range", "cost_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigurationError(f"{name} must be a nonempty positive interval")
        bins = self.capacity_bins
        if len(bins) < 1 or any(b <= 0 for b in bins) or list(bins) != sorted(bins):
            raise ConfigurationError("capacity_bins must be ascending positive values")
        if len(bins) != SYNTHETIC.n_edge_types:
            raise ConfigurationError(
                f"synthetic profile expects {SYNTHETIC.n_edge_types} capacity bins, got {len(bins)}"
            )

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class Dataset:
    graphs: list[DesignGraph]
    labels: list[float]
    config: SynthConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.graphs) != len(self.labels):
            raise ValueError("one label per graph required")

    def __len__(self) -> int:
        return len(self.graphs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for g, y in zip(self.graphs, self.labels):
                doc = graph_to_dict(g)
                doc["label"] = y
                fh.write(json.dumps(doc, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        graphs, labels = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise GraphFormatError(f"invalid JSON: {exc.msg}", line=lineno) from None
                graphs.append(graph_from_dict(doc, line=lineno, extra_keys=("label",)))
                label = doc.get("label")
                if label is None:
                    label = float("nan")
                labels.append(float(label))
        return cls(graphs, labels)


def watts_strogatz(n: int, k: int, p_rewire: float, seed: int) -> tuple[int, list[tuple[int, int]]]:
    """Connected Watts-Strogatz topology as (node count, sorted edge list).

    Disconnected samples are redrawn from a derived seed.
    """
    SynthConfig(n=n, k=k, p_rewire=p_rewire)
    for attempt in range(1000):
        sub = seed if attempt == 0 else derive_seed(seed, attempt)
        G = nx.watts_strogatz_graph(n, k, p_rewire, seed=sub % (2**32))
        if nx.is_connected(G):
            edges = sorted((min(u, v), max(u, v)) for u, v in G.edges())
            return n, edges
    raise RuntimeError("could not draw a connected Watts-Strogatz graph")


def _degrees(n: int, edges) -> np.ndarray:
    deg = np.zeros(n, dtype=np.int64)
    for u, v in edges:
        deg[u] += 1
        deg[v] += 1
    return deg


def n_supply_nodes(n: int, fraction: float = 0.15) -> int:
    # exact ceil for the default 15% (0.15 * 20 is 3.0000000000000004 in floats)
    return -(-round(fraction * 100) * n // 100)


def assign_node_classes(
    topology, beta: float, seed: int, supply_fraction: float = 0.15, demand_prob: float = 0.7
) -> list[int]:
    """Degree-biased supply placement, then i.i.d. demand/transfer for the rest.

    Supply nodes are drawn without replacement with weights exp(beta * degree),
    realised as the top-k of Gumbel-perturbed log weights (no underflow for large beta).
    """
    n, edges = topology
    rng = np.random.default_rng(seed)
    deg = _degrees(n, edges)
    keys = beta * deg + rng.gumbel(size=n)
    n_s = n_supply_nodes(n, supply_fraction)
    supply = set(np.argsort(-keys, kind="stable")[:n_s].tolist())
    u = rng.random(n)
    classes = []
    for v in range(n):
        if v in supply:
            classes.append(int(NodeClass.SUPPLY))
        elif u[v] < demand_prob:
            classes.append(int(NodeClass.DEMAND))
        else:
            classes.append(int(NodeClass.TRANSFER))
    return classes


def sample_features(topology, classes, config: SynthConfig, seed: int) -> DesignGraph:
    n, edges = topology
    rng = np.random.default_rng(seed)
    ranges = {NodeClass.SUPPLY: config.supply_range, NodeClass.DEMAND: config.demand_range}
    mags = rng.random(n)
    pos = rng.random((n, 2))
    nodes = []
    for v in range(n):
        cls = classes[v]
        if cls == NodeClass.TRANSFER:
            mag = 0.0
        else:
            lo, hi = ranges[NodeClass(cls)]
            mag = float(lo + (hi - lo) * mags[v])
        nodes.append(NodeAttr(v, cls, mag, (float(pos[v, 0]), float(pos[v, 1]))))
    types = rng.integers(0, len(config.capacity_bins), size=len(edges))
    costs = rng.random(len(edges))
    lo, hi = config.cost_range
    out_edges = [
        EdgeAttr(u, v, int(t), config.capacity_bins[int(t)], float(lo + (hi - lo) * c))
        for (u, v), t, c in zip(edges, types, costs)
    ]
    return DesignGraph(tuple(nodes), tuple(out_edges), SYNTHETIC.name)


def generate_graph(config: SynthConfig, seed: int) -> DesignGraph:
    topo = watts_strogatz(config.n, config.k, config.p_rewire, derive_seed(seed, 0))
    classes = assign_node_classes(
        topo, config.beta, derive_seed(seed, 1), config.supply_fraction, config.demand_prob
    )
    return sample_features(topo, classes, config, derive_seed(seed, 2))


def build_dataset(count: int, config: SynthConfig) -> Dataset:
    """``count`` labelled graphs; graph ``i`` depends only on (config.seed, i)."""
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    graphs, labels = [], []
    for i in range(count):
        for attempt in range(MAX_RESAMPLES):
            g = generate_graph(config, derive_seed(config.seed, i, attempt))
            try:
                y = flow.synthetic_label(g)
            except flow.DegenerateNetworkError:
                continue
            break
        else:
            raise RuntimeError(f"graph {i}: no flow-evaluable sample after {MAX_RESAMPLES} attempts")
        assert not validate(g)
        graphs.append(g)
        labels.append(y)
    return Dataset(graphs, labels, config)
