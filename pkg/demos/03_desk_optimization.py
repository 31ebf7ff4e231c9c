"""The full loop at desk scale, then disruption ranking of the selected designs.

Run: python demos/03_desk_optimization.py [seed] [run_dir]   (a few minutes per seed)
"""

import sys
from pathlib import Path

from netdesign.pipeline import PipelineConfig, post_process, read_records, run_pipeline
from netdesign.resilience import ResilienceConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run_dir = Path(sys.argv[2] if len(sys.argv) > 2 else f"runs/desk_seed{seed}")

cfg = PipelineConfig.desk(seed=seed)
print(f"dataset {cfg.n_graphs}, batch {cfg.batch_size}, top {cfg.top_c}, {cfg.max_iterations} iterations -> {run_dir}")
run_pipeline(cfg, run_dir, log=lambda r: print(f"  iteration {r.iteration}: top-c true mean {r.mean_topc_true:.2f}", flush=True))

recs = read_records(run_dir / "records.csv")
print("\niter  best_est  topc_true  rejected")
for r in recs:
    print(f"{r.iteration:4d}  {r.best_q:8.2f}  {r.mean_topc_true:9.2f}  {r.n_rejected:8d}")
print(f"top-c true mean: {recs[0].mean_topc_true:.2f} -> {recs[-1].mean_topc_true:.2f}")

# every saved top design under the same disruption draws; smallest EDNS wins.
# EDNS is lost demand in absolute units, so small designs that serve little rank high; read it next to the label
rows = post_process(run_dir, ResilienceConfig(n_samples=200))
print("\nlowest EDNS designs")
for r in rows[:5]:
    print(f"  {r.id:>10} (iter {r.iteration}): EDNS {r.edns:.2f} +- {r.edns_stderr:.2f}, label {r.q_true:.2f}")
