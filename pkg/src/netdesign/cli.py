"""``netdesign`` command line.

Every subcommand prints a JSON summary on stdout. Failures print a JSON
object with an ``error`` key on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import diffnum as dn
from . import estimator as est
from . import generator as gen
from .flow import graph_metrics
from .graph import deserialize, serialize, validate
from .pipeline import PipelineConfig, PipelineError, emit_report, post_process, run_pipeline
from .resilience import ResilienceConfig, edns
from .seeding import derive_seed
from .synthgen import Dataset, SynthConfig, build_dataset


def _config(args) -> PipelineConfig:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    return PipelineConfig.from_dict(doc)


def _out(args, name: str) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _read_graph(path) -> "DesignGraph":  # noqa: F821
    return deserialize(Path(path).read_text())


def cmd_gen_dataset(args) -> dict:
    cfg = _config(args)
    flags = {f.name: getattr(args, f"synth_{f.name}") for f in fields(SynthConfig) if f.name != "seed"}
    synth = SynthConfig(**{"seed": cfg.seed, **cfg.synth, **{k: v for k, v in flags.items() if v is not None}})
    count = args.count if args.count is not None else cfg.n_graphs
    ds = build_dataset(count, synth)
    path = Path(args.out) if args.out else _out(args, "dataset.jsonl")
    ds.save(path)
    return {"dataset": str(path), "count": len(ds), "synth": synth.to_dict()}


def cmd_train_estimator(args) -> dict:
    cfg = _config(args)
    ds = Dataset.load(args.dataset)
    model = est.EstimatorModel(maximize=cfg.maximize, profile=ds.graphs[0].profile, seed=cfg.seed)
    epochs = args.epochs if args.epochs is not None else cfg.est_pretrain_epochs
    lr = args.lr if args.lr is not None else cfg.est_lr
    model, hist = est.train_estimator(model, ds, epochs=epochs, rule=dn.Adam(lr), seed=cfg.seed)
    ckpt = Path(args.out) if args.out else _out(args, "estimator.ckpt")
    model.save(ckpt)
    est.write_history(ckpt.with_suffix(".history.csv"), hist)
    val = [r["val_mse"] for r in hist]
    return {"checkpoint": str(ckpt), "epochs": epochs, "best_val_mse": min(val), "first_val_mse": val[0]}


def cmd_train_generator(args) -> dict:
    cfg = _config(args)
    ds = Dataset.load(args.dataset)
    model = gen.GeneratorModel(gen.GeneratorConfig(latent_dim=cfg.latent_dim, profile=ds.graphs[0].profile, seed=cfg.seed))
    epochs = args.epochs if args.epochs is not None else cfg.gen_pretrain_epochs
    model, hist = gen.train_generator(
        model,
        ds,
        epochs=epochs,
        weights=gen.LossWeights(kl=cfg.kl_weight),
        rule=dn.Adam(args.lr if args.lr is not None else cfg.gen_lr),
        batch_size=cfg.gen_batch_size,
        seed=cfg.seed,
        kl_warmup=cfg.kl_warmup,
    )
    ckpt = Path(args.out) if args.out else _out(args, "generator.ckpt")
    model.save(ckpt)
    with open(ckpt.with_suffix(".history.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(hist[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(hist)
    return {"checkpoint": str(ckpt), "epochs": epochs, "final": hist[-1]}


def cmd_generate(args) -> dict:
    cfg = _config(args)
    model = gen.GeneratorModel.load(args.generator)
    scorer = est.EstimatorModel.load(args.estimator) if args.estimator else None
    constraints = None
    if args.constraints:
        constraints = gen.ExpansionConstraints.from_json(Path(args.constraints).read_text())
        if args.new_nodes is not None:
            constraints = gen.ExpansionConstraints(constraints.base, args.new_nodes)
    path = Path(args.out) if args.out else _out(args, "generated.jsonl")
    n_valid = 0
    with open(path, "w") as fh:
        for k in range(args.count):
            s = derive_seed(cfg.seed, k)
            n = constraints.n_total if constraints else None
            code = gen.prior_code(model, n_nodes=n, seed=s)
            if args.q_target is not None:
                code = gen.latent_ascent(model, code, args.q_target, steps=cfg.ascent_steps, step_size=cfg.ascent_step_size)
            g = gen.decode(model, code, args.mode, constraints=constraints, seed=s)
            doc = json.loads(serialize(g))
            ok = not validate(g)
            n_valid += ok
            if scorer is not None and ok:
                doc["label"] = est.estimate(scorer, g)
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")
    return {"out": str(path), "count": args.count, "valid": n_valid}


def cmd_optimize(args) -> dict:
    cfg = _config(args)
    run_dir = run_pipeline(cfg, args.out_dir, resume=not args.fresh)
    report = json.loads((run_dir / "report.json").read_text())
    last = report["iterations"][-1]
    return {"run_dir": str(run_dir), "iterations": len(report["iterations"]), "best_q": last["best_q"], "best_design": report["best_design"]}


def _resilience(args) -> ResilienceConfig:
    base = _config(args).resilience if args.config else {}
    over = {"grid": args.grid, "p0": args.p0, "gamma": args.gamma, "n_samples": args.samples, "seed": args.seed}
    return ResilienceConfig(**{**base, **{k: v for k, v in over.items() if v is not None}})


def cmd_simulate(args) -> dict:
    g = _read_graph(args.graph)
    rc = _resilience(args)
    res = edns(g, rc, keep_samples=True)
    path = Path(args.out) if args.out else _out(args, "simulation.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "epicenter_row", "epicenter_col", "failed_nodes", "failed_edges", "C_e"])
        for s in res.samples:
            o = s.outcome
            w.writerow([s.sample, s.cell[0], s.cell[1], " ".join(map(str, o.failed_nodes)), " ".join(map(str, o.failed_edges)), repr(o.lost)])
        fh.write(f"# EDNS {res.edns!r} +- {res.stderr!r}\n")
    return {"out": str(path), "edns": res.edns, "stderr": res.stderr, "resilience": rc.to_dict()}


def cmd_report(args) -> dict:
    run_dir = Path(args.run_dir or args.out_dir)
    report = emit_report(run_dir)
    out = {"run_dir": str(run_dir), "iterations": len(report["iterations"]), "best_design": report["best_design"]}
    if args.post_process:
        rows = post_process(run_dir, _resilience(args))
        out["optimal"] = rows[0].id if rows else None
        out["ranked"] = len(rows)
    return out


def cmd_evaluate(args) -> dict:
    g = _read_graph(args.graph)
    problems = validate(g)
    if problems:
        return {"valid": False, "violations": [asdict(p) for p in problems]}
    return {"valid": True, **graph_metrics(g, a=args.a, alpha=args.alpha, K=args.K)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="netdesign", description="Generative design of supply networks.")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default=".")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-dataset", help="synthesize a labelled dataset")
    s.add_argument("--count", type=int)
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, tuple):
            s.add_argument(flag, dest=f"synth_{f.name}", type=float, nargs="+")
        else:
            s.add_argument(flag, dest=f"synth_{f.name}", type=type(f.default))
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("train-estimator", help="fit the GCN surrogate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_estimator)

    s = sub.add_parser("train-generator", help="fit the graph VAE")
    s.add_argument("--dataset", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_generator)

    s = sub.add_parser("generate", help="decode designs from the prior")
    s.add_argument("--generator", required=True)
    s.add_argument("--estimator")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--mode", choices=("greedy", "sample"), default="sample")
    s.add_argument("--q-target", type=float, help="latent ascent toward this head value before decoding")
    s.add_argument("--constraints", help="graph JSON of the system to expand, with a new_nodes count")
    s.add_argument("--new-nodes", type=int, help="override new_nodes from the constraints file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("optimize", help="run the full loop into --out-dir")
    s.add_argument("--fresh", action="store_true", help="ignore saved state in --out-dir")
    s.set_defaults(func=cmd_optimize)

    def resilience_flags(s):
        s.add_argument("--grid", type=int)
        s.add_argument("--p0", type=float)
        s.add_argument("--gamma", type=float)
        s.add_argument("--samples", type=int)

    s = sub.add_parser("simulate", help="Monte Carlo disruption of one design")
    s.add_argument("--graph", required=True)
    resilience_flags(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", help="summarize a run directory")
    s.add_argument("--run-dir")
    s.add_argument("--post-process", action="store_true", help="rank saved designs by EDNS")
    resilience_flags(s)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("evaluate", help="flow metrics of one design")
    s.add_argument("--graph", required=True)
    s.add_argument("--a", type=float, default=1.0)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--K", type=float)
    s.set_defaults(func=cmd_evaluate)

    # global flags are also accepted after the subcommand
    for s in sub.choices.values():
        s.add_argument("--config", default=argparse.SUPPRESS)
        s.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        s.add_argument("--out-dir", default=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = args.func(args)
    except PipelineError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(out, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
