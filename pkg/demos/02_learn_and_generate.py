"""Fit the surrogate and the graph VAE on a small corpus, then generate designs.

Shows free generation from the prior, steering a latent code toward a higher
predicted label, and extending an existing network with new nodes.

Run: python demos/02_learn_and_generate.py   (under a minute on one core)
"""

import numpy as np

from netdesign import diffnum as dn
from netdesign import estimator as est
from netdesign import generator as gen
from netdesign.flow import synthetic_label
from netdesign.graph import validate
from netdesign.synthgen import SynthConfig, build_dataset, generate_graph

ds = build_dataset(300, SynthConfig(n=16, seed=2))
y = np.array(ds.labels)
print(f"corpus: {len(ds)} graphs, label mean {y.mean():.2f} std {y.std():.2f}")

surrogate, hist = est.train_estimator(est.EstimatorModel(seed=0), ds, epochs=40, seed=0)
best = min(hist, key=lambda r: r["val_mse"])
print(f"estimator: val MSE {hist[0]['val_mse']:.2f} -> {best['val_mse']:.2f} (epoch {best['epoch']})")

vae = gen.GeneratorModel(gen.GeneratorConfig(latent_dim=16, seed=0))
vae, ghist = gen.train_generator(
    vae, ds, epochs=6, weights=gen.LossWeights(kl=0.1), rule=dn.Adam(3e-3), batch_size=64, seed=0, kl_warmup=3
)
print("generator:", {k: round(v, 2) for k, v in ghist[-1].items()})

# free generation
print("\nprior samples")
for s in range(4):
    g = gen.decode(vae, gen.prior_code(vae, seed=s), "sample", seed=s)
    ok = "valid" if not validate(g) else "invalid"
    print(f"  seed {s}: {g.n_nodes} nodes {len(g.edges)} edges, {ok}, true {synthetic_label(g):.2f} est {est.estimate(surrogate, g):.2f}")

# steer one code toward a label one std above the best in the corpus
target = float(y.max() + y.std())
code = gen.prior_code(vae, seed=7)
moved = gen.latent_ascent(vae, code, target, steps=30)
head = lambda c: float(gen.performance_head(vae, c).detach())  # noqa: E731
print(f"\nhead output {head(code):.2f} -> {head(moved):.2f} (target {target:.2f})")
# the head is a rough predictor after six epochs, which is why the loop relabels with true flow
for name, c in (("before", code), ("after", moved)):
    g = gen.decode(vae, c, "greedy", seed=7)
    print(f"  {name:>6}: {len(g.edges)} edges, true label {synthetic_label(g):.2f}")

# expansion keeps the existing system and adds candidates around it
base = generate_graph(SynthConfig(n=12, seed=9), 0)
cons = gen.ExpansionConstraints(base, new_nodes=3)
g = gen.decode(vae, gen.prior_code(vae, n_nodes=cons.n_total, seed=1), "sample", constraints=cons, seed=1)
kept = set(base.edges) <= set(g.edges)
print(f"\nexpansion: {base.n_nodes} -> {g.n_nodes} nodes, {len(base.edges)} -> {len(g.edges)} edges, base kept: {kept}")
