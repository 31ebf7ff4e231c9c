"""One synthetic supply network: its flow label, cost metrics and disruption loss.

Run: python demos/01_flow_and_disruption.py
"""

from netdesign.flow import graph_metrics, solve_graph
from netdesign.resilience import PerformanceCurve, ResilienceConfig, edns, recovery_curve, resilience_ratio
from netdesign.synthgen import SynthConfig, generate_graph

g = generate_graph(SynthConfig(n=20, seed=4), 0)
supply = [v for v in g.nodes if v.cls == 0]
demand = [v for v in g.nodes if v.cls == 1]
print(f"{g.n_nodes} nodes ({len(supply)} supply, {len(demand)} demand), {len(g.edges)} edges")

res = solve_graph(g)
print(f"max flow {res.f_max:.2f} of demand {sum(v.magnitude for v in demand):.2f}, min cost {res.total_cost:.2f}")
for k, v in graph_metrics(g, alpha=0.5).items():
    print(f"  {k:>15} {v:.4f}")

# Monte Carlo hazard: epicenter on an 8x8 grid, failure odds decay with cell distance
cfg = ResilienceConfig(grid=8, p0=0.9, gamma=0.5, n_samples=300, seed=1)
out = edns(g, cfg, keep_samples=True)
print(f"\nEDNS {out.edns:.3f} +- {out.stderr:.3f} over {out.n_samples} events")

worst = max(out.samples, key=lambda s: s.outcome.lost)
o = worst.outcome
print(f"worst event at cell {worst.cell}: {len(o.failed_nodes)} nodes, {len(o.failed_edges)} edges down, lost {o.lost:.2f}")

# restore the worst event in two orders and compare the areas under the curves
for policy in ("random", "largest-demand-first"):
    curve = recovery_curve(g, o, policy, seed=0)
    ratio = resilience_ratio(curve, PerformanceCurve.constant(o.nominal, curve.t))
    print(f"  {policy:>20}: resilience ratio {ratio:.3f}")
