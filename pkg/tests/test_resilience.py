import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netdesign import resilience as R
from netdesign.flow import delivered_demand
from netdesign.graph import ConfigurationError, DesignGraph, EdgeAttr, NodeAttr
from netdesign.synthgen import SynthConfig, generate_graph

SUP, DEM, TRN = 0, 1, 2


def pair(mag=3.0, cap=6.0, pos=((0.1, 0.1), (0.2, 0.2))):
    return DesignGraph(
        [NodeAttr(0, SUP, 10.0, pos[0]), NodeAttr(1, DEM, mag, pos[1])],
        [EdgeAttr(0, 1, 1, cap, 1.0)],
    )


def star(demands=(1.0, 2.0, 4.0, 3.0)):
    nodes = [NodeAttr(0, SUP, 100.0, (0.5, 0.5))]
    edges = []
    for k, d in enumerate(demands, start=1):
        nodes.append(NodeAttr(k, DEM, d, (0.5 + 0.1 * k, 0.5)))
        edges.append(EdgeAttr(0, k, 2, 12.0, 1.0))
    return DesignGraph(nodes, edges)


# ---------------------------------------------------------------------------
# grid and failure probabilities


def test_map_to_grid_examples():
    g = DesignGraph([NodeAttr(0, SUP, 1.0, (0.5, 0.5)), NodeAttr(1, DEM, 1.0, (1.0, 0.0))], [EdgeAttr(0, 1, 0, 2.0, 1.0)])
    gm = R.map_to_grid(g, 2)
    assert gm.node_cells.tolist() == [[1, 1], [0, 1]]
    # midpoint (0.75, 0.25)
    assert gm.edge_cells.tolist() == [[0, 1]]
    gm1 = R.map_to_grid(g, 1)
    assert gm1.node_cells.tolist() == [[0, 0], [0, 0]] and gm1.edge_cells.tolist() == [[0, 0]]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=10))
def test_every_position_lands_in_one_cell(G, pts):
    g = DesignGraph([NodeAttr(i, TRN, 0.0, p) for i, p in enumerate(pts)], [])
    cells = R.map_to_grid(g, G).node_cells
    assert cells.min() >= 0 and cells.max() < G


def test_failure_probs_examples():
    ev = R.DisruptionEvent((3, 5), p0=0.9, gamma=0.5)
    p = R.failure_probs(ev, [[3, 5], [2, 5], [4, 6], [0, 0]])
    assert p[0] == 0.9 and p[1] == 0.45 and p[2] == 0.45
    assert p[3] == pytest.approx(0.9 * 0.5**5, rel=1e-15)
    assert p.argmax() == 0
    tiny = R.failure_probs(R.DisruptionEvent((0, 0), p0=0.9, gamma=1e-300), [[0, 0], [0, 1], [5, 5]])
    assert tiny[0] == 0.9 and tiny[1] < 1e-299 and tiny[2] == 0.0


def test_event_validation():
    with pytest.raises(ConfigurationError):
        R.DisruptionEvent((0, 0), gamma=1.0)
    with pytest.raises(ConfigurationError):
        R.apply_event(pair(), R.DisruptionEvent((4, 0)), 0, G=2)
    with pytest.raises(ConfigurationError):
        R.ResilienceConfig(grid=0)


# ---------------------------------------------------------------------------
# single events


def test_no_failure_zero_loss():
    g = generate_graph(SynthConfig(), 1)
    # far corner of a fine grid with tiny decay: nothing in range
    out = R.apply_event(g, R.DisruptionEvent((0, 0), p0=1e-12, gamma=1e-3), 0, G=64)
    if out.n_failed == 0:
        assert out.lost == 0.0
    out = R.apply_event(g, R.DisruptionEvent((0, 0), p0=1e-300, gamma=1e-3), 0, G=2)
    assert out.n_failed == 0 and out.lost == 0.0


def test_all_supply_failed_loses_everything():
    g = generate_graph(SynthConfig(), 2)
    hard = [n.id for n in g.nodes if n.cls != SUP]
    out = R.apply_event(g, R.DisruptionEvent((0, 0), p0=1.0, gamma=0.5), 0, G=1, hardened=hard)
    assert set(out.failed_nodes) == {n.id for n in g.nodes if n.cls == SUP}
    assert out.lost == out.nominal == delivered_demand(g)


def test_bridge_loss_equals_stranded_demand():
    # supply 0 - 1 (demand 2) - 2 (demand 3); edge (1,2) is a bridge
    g = DesignGraph(
        [NodeAttr(0, SUP, 10.0, (0.1, 0.1)), NodeAttr(1, DEM, 2.0, (0.2, 0.1)), NodeAttr(2, DEM, 3.0, (0.9, 0.9))],
        [EdgeAttr(0, 1, 2, 12.0, 1.0), EdgeAttr(1, 2, 2, 12.0, 1.0)],
    )
    nominal = delivered_demand(g)
    damaged = R.damaged_graph(g, [], [1])
    assert nominal - R.served(damaged) == 3.0
    # and through the event path: only the bridge is exposed
    out = R.apply_event(g, R.DisruptionEvent((1, 1), p0=1.0, gamma=1e-300), 0, G=2, hardened=[0, 1, 2])
    assert out.failed_edges == (1,) and out.lost == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_loss_bounded_by_total_demand(seed, G):
    g = generate_graph(SynthConfig(n=12), seed % 1000)
    ev = R.DisruptionEvent((0, 0), p0=0.9, gamma=0.5)
    out = R.apply_event(g, ev, seed, G=G)
    total = sum(n.magnitude for n in g.nodes if n.cls == DEM)
    assert 0.0 <= out.lost <= total + 1e-9


# ---------------------------------------------------------------------------
# EDNS


def test_exact_sum_examples():
    assert R.edns_exact([(1.0, 2.0)]) == 2.0
    assert R.edns_exact([(0.1, 5.0), (0.2, 3.0)]) == 0.1 * 5 + 0.2 * 3
    assert abs(R.edns_exact([(0.1, 5.0), (0.2, 3.0)]) - 1.1) < 1e-15


def test_degenerate_distribution_monte_carlo():
    # p0 = 1 on a single cell: the lone edge always fails; hardened endpoints keep C = 2
    g = pair(mag=2.0)
    res = R.edns(g, R.ResilienceConfig(grid=1, p0=1.0, n_samples=5), hardened=[0, 1])
    assert res.edns == 2.0 and res.stderr == 0.0


def toy_expectation(p0, mag):
    return p0 * mag


@pytest.mark.parametrize("seed", range(20))
def test_monte_carlo_single_component_toy(seed):
    p0, mag = 0.3, 4.0
    res = R.edns(pair(mag=mag), R.ResilienceConfig(grid=1, p0=p0, n_samples=200, seed=seed), hardened=[0, 1])
    assert abs(res.edns - toy_expectation(p0, mag)) <= 3 * res.stderr


def small_design(seed):
    rng = np.random.default_rng(seed)
    pos = rng.random((3, 2))
    return DesignGraph(
        [NodeAttr(0, SUP, 5.0, tuple(pos[0])), NodeAttr(1, DEM, 2.0, tuple(pos[1])), NodeAttr(2, DEM, 3.0, tuple(pos[2]))],
        [EdgeAttr(0, 1, 0, 2.0, 1.0)] if seed % 2 else [EdgeAttr(0, 1, 0, 2.0, 1.0), EdgeAttr(1, 2, 1, 6.0, 1.0)],
    )


def test_enumeration_matches_hand_computation():
    # p0 = 0.5 on one cell; three components: node 0 (supply), node 1 (demand), edge
    g = pair(mag=3.0)
    exact = R.expected_loss_exact(g, R.DisruptionEvent((0, 0), p0=0.5), G=1, hardened=[])
    assert exact == pytest.approx(3.0 * (1 - 0.5**3), rel=1e-15)
    ev = [R.DisruptionEvent((0, 0), 0.1, p0=0.5), R.DisruptionEvent((0, 0), 0.2, p0=0.5)]
    assert R.edns_enumerated(g, ev, G=1) == pytest.approx(0.3 * exact, rel=1e-15)


@pytest.mark.parametrize("design", range(4))
def test_monte_carlo_consistent_with_enumeration(design):
    g = small_design(design)
    G = 2
    cells = [R.DisruptionEvent((r, c), 0.25, p0=0.8, gamma=0.5) for r in range(G) for c in range(G)]
    exact = R.edns_enumerated(g, cells, G=G)
    misses = 0
    for seed in range(20):
        res = R.edns(g, R.ResilienceConfig(grid=G, p0=0.8, gamma=0.5, n_samples=300, seed=seed))
        misses += abs(res.edns - exact) > 3 * res.stderr + 1e-12
    # 3-sigma band: expect ~0.3% misses
    assert misses <= 1


def test_edns_deterministic_and_nonnegative():
    g = generate_graph(SynthConfig(n=15), 3)
    cfg = R.ResilienceConfig(grid=4, n_samples=30, seed=5)
    a, b = R.edns(g, cfg, keep_samples=True), R.edns(g, cfg, keep_samples=True)
    assert a == b and a.samples == b.samples and a.edns >= 0
    assert len(a.samples) == 30


def test_cell_weights_focus_epicenter():
    g = generate_graph(SynthConfig(n=15), 4)
    w = np.zeros((4, 4))
    w[2, 1] = 1.0
    res = R.edns(g, R.ResilienceConfig(grid=4, n_samples=10), cell_weights=w, keep_samples=True)
    assert {s.cell for s in res.samples} == {(2, 1)}
    with pytest.raises(ConfigurationError):
        R.edns(g, R.ResilienceConfig(grid=4), cell_weights=np.zeros((4, 4)))


def test_extra_redundant_edge_never_hurts_on_matched_seeds():
    # path 0-1-2-3 vs the same path closed into a ring: same nominal flow, fewer bridges
    nodes = [NodeAttr(0, SUP, 10.0, (0.1, 0.1))] + [NodeAttr(k, DEM, 2.0, (0.3 * k, 0.1 + 0.25 * k)) for k in (1, 2, 3)]
    path = DesignGraph(nodes, [EdgeAttr(k, k + 1, 2, 12.0, 1.0) for k in range(3)])
    ring = DesignGraph(nodes, path.edges + (EdgeAttr(0, 3, 2, 12.0, 1.0),))
    assert delivered_demand(ring) == delivered_demand(path) == 6.0
    cfg = R.ResilienceConfig(grid=3, n_samples=200, seed=2)
    a = R.edns(ring, cfg, keep_samples=True)
    b = R.edns(path, cfg, keep_samples=True)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.outcome.lost <= sb.outcome.lost
    assert a.edns < b.edns


# ---------------------------------------------------------------------------
# curves


def test_resilience_ratio_examples():
    t = np.linspace(0, 4, 9)
    nominal = R.PerformanceCurve(t, np.full(9, 3.0) + t)
    assert R.resilience_ratio(nominal, nominal) == 1.0
    half = R.PerformanceCurve(t, nominal.values / 2)
    assert abs(R.resilience_ratio(half, nominal) - 0.5) <= 1e-12
    # trapezoids by hand on three samples: (1+3)/2 + (3+4)/2 = 5.5 over 2 * 4 = 8
    c = R.PerformanceCurve([0, 1, 2], [1.0, 3.0, 4.0])
    n = R.PerformanceCurve.constant(4.0, [0, 1, 2])
    assert R.resilience_ratio(c, n) == 5.5 / 8


def test_resilience_ratio_errors():
    with pytest.raises(R.UndefinedMetricError):
        R.resilience_ratio(R.PerformanceCurve([0, 1], [0, 0]), R.PerformanceCurve([0, 1], [0, 0]))
    with pytest.raises(ValueError):
        R.resilience_ratio(R.PerformanceCurve([0, 1], [1, 1]), R.PerformanceCurve([0, 2], [1, 1]))
    with pytest.raises(ValueError):
        R.PerformanceCurve([0], [1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-3, 10), st.floats(0, 1)), min_size=2, max_size=20))
def test_ratio_in_unit_interval_when_dominated(rows):
    t = np.arange(len(rows), dtype=float)
    nom = np.array([r[0] for r in rows])
    cur = nom * np.array([r[1] for r in rows])
    phi = R.resilience_ratio(R.PerformanceCurve(t, cur), R.PerformanceCurve(t, nom))
    assert 0.0 <= phi <= 1.0 + 1e-12
    if cur.sum() > 0:
        assert phi > 0


def test_empty_outcome_gives_flat_curve():
    g = star()
    out = R.EventOutcome((), (), R.served(g), R.served(g))
    for policy in ("random", "largest-demand-first"):
        c = R.recovery_curve(g, out, policy)
        assert c.values.tolist() == [10.0, 10.0]


def test_recovery_curve_length_and_end():
    g = generate_graph(SynthConfig(n=15), 7)
    out = R.apply_event(g, R.DisruptionEvent((1, 1), p0=0.9, gamma=0.5), 3, G=2)
    assert out.n_failed > 0
    for policy in ("random", "largest-demand-first"):
        c = R.recovery_curve(g, out, policy, seed=1)
        assert len(c.values) == out.n_failed + 1
        assert c.values[0] == out.damaged and c.values[-1] == out.nominal
    with pytest.raises(ValueError):
        R.recovery_curve(g, out, "alphabetical")


def test_largest_demand_first_dominates_on_star():
    g = star()
    nominal = R.served(g)
    out = R.EventOutcome((), (0, 1, 2, 3), nominal, 0.0)
    ref = R.PerformanceCurve.constant(nominal, np.arange(5))
    greedy = R.resilience_ratio(R.recovery_curve(g, out, "largest-demand-first"), ref)
    every = [R.resilience_ratio(R.curve_from_order(g, out, p), ref) for p in itertools.permutations(range(4))]
    assert greedy == max(every)
    for seed in range(10):
        assert greedy >= R.resilience_ratio(R.recovery_curve(g, out, "random", seed), ref)
    # repair order 4, 3, 2, 1: areas 0->4->7->9->10
    assert greedy == pytest.approx(((0 + 4) + (4 + 7) + (7 + 9) + (9 + 10)) / 2 / 40, rel=1e-15)
    assert math.isclose(min(every), ((0 + 1) + (1 + 3) + (3 + 6) + (6 + 10)) / 2 / 40)
