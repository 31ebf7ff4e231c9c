"""The generate -> estimate -> select -> blend -> retrain loop, with run directories.

A run directory holds the config, the evolving training set, both model
checkpoints and one record per iteration. State is rewritten after every
iteration, so an interrupted run resumes from the last finished one and
produces the same files it would have produced uninterrupted.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffnum as dn
from . import estimator as est
from . import generator as gen
from .flow import DegenerateNetworkError, edge_cost, graph_metrics, synthetic_label
from .graph import ConfigurationError, DesignGraph, deserialize, serialize, validate
from .resilience import ResilienceConfig, edns
from .seeding import derive_seed
from .synthgen import Dataset, SynthConfig, build_dataset

SCHEMA_VERSION = 1

RECORD_FIELDS = [
    "iteration",
    "best_q",
    "mean_topc_q",
    "mean_topc_true",
    "best_true",
    "n_candidates",
    "n_rejected",
    "blended_ids",
    "est_loss",
    "gen_kl",
    "gen_dec",
    "gen_perf",
    "edns",
    "edns_stderr",
]


class PipelineError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostics = diagnostics or {}

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self), "iteration": self.iteration, **self.diagnostics}


class ResampleBudgetError(PipelineError):
    pass


@dataclass
class PipelineConfig:
    """Everything a run depends on. Defaults are full scale; ``desk()`` is the small preset."""

    dataset: str | None = None  # JSON-lines path; synthesized from ``synth`` when absent
    n_graphs: int = 10000
    synth: dict = field(default_factory=dict)
    objective: str = "maximize"
    label: str = "flow"  # "flow" = min-cost max-flow magnitude, "combined" = weighted ratio/cost
    alpha: float = 0.5
    K: float | None = None
    a: float = 1.0
    batch_size: int = 500
    top_c: int = 50
    max_iterations: int = 150
    min_iterations: int = 1
    tol: float = 1e-3
    q_target: float | None = None
    elitism: bool = True
    prior_fraction: float = 0.0
    max_retries: int = 5
    ascent_steps: int = 10
    ascent_step_size: float = 0.5
    est_pretrain_epochs: int = 100
    est_finetune_epochs: int = 2
    est_lr: float = 3e-3
    gen_pretrain_epochs: int = 8
    gen_finetune_epochs: int = 2
    gen_finetune_top: int = 100
    gen_lr: float = 3e-3
    gen_finetune_lr: float = 2e-3
    gen_batch_size: int = 64
    kl_weight: float = 0.1
    kl_warmup: int = 3
    latent_dim: int = 16
    edns_every: int = 0
    resilience: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if self.objective not in ("maximize", "minimize"):
            raise ConfigurationError(f"objective must be maximize or minimize, not {self.objective!r}")
        if self.label not in ("flow", "combined"):
            raise ConfigurationError(f"label must be flow or combined, not {self.label!r}")
        if not 0 < self.top_c <= self.batch_size:
            raise ConfigurationError("need 0 < top_c <= batch_size")
        if self.max_iterations < 1 or self.min_iterations < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if not self.tol > 0:
            raise ConfigurationError("tol must be > 0")
        if not 0.0 <= self.prior_fraction <= 1.0:
            raise ConfigurationError("prior_fraction must lie in [0, 1]")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if self.dataset is None and self.n_graphs < self.top_c:
            raise ConfigurationError("dataset must hold at least top_c designs")
        SynthConfig(**self.synth)
        ResilienceConfig(**self.resilience)

    @property
    def maximize(self) -> bool:
        return self.objective == "maximize"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def desk(cls, **overrides) -> "PipelineConfig":
        """Dataset 500, B = 50, c = 5, 20 iterations; a few minutes on one core."""
        base = dict(
            n_graphs=500,
            batch_size=50,
            top_c=5,
            max_iterations=20,
            min_iterations=20,
            gen_pretrain_epochs=5,
            gen_finetune_top=64,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class IterationRecord:
    iteration: int
    best_q: float
    mean_topc_q: float
    mean_topc_true: float
    best_true: float
    n_candidates: int
    n_rejected: int
    blended_ids: list[str]
    est_loss: float
    gen_kl: float
    gen_dec: float
    gen_perf: float
    edns: float = float("nan")
    edns_stderr: float = float("nan")

    def to_row(self) -> dict:
        row = asdict(self)
        row["blended_ids"] = " ".join(self.blended_ids)
        return {k: repr(v) if isinstance(v, float) else v for k, v in row.items()}

    @classmethod
    def from_row(cls, row: dict) -> "IterationRecord":
        kw = {}
        for f in fields(cls):
            v = row[f.name]
            if f.name == "blended_ids":
                kw[f.name] = v.split() if v else []
            elif f.name in ("iteration", "n_candidates", "n_rejected"):
                kw[f.name] = int(v)
            else:
                kw[f.name] = float(v)
        return cls(**kw)


@dataclass
class Design:
    id: str
    graph: DesignGraph
    q_est: float = float("nan")
    q_true: float = float("nan")
    iteration: int = 0


# ---------------------------------------------------------------------------
# labels and objective helpers


def better(a: float, b: float, maximize: bool) -> bool:
    return a > b if maximize else a < b


def rank_order(values, maximize: bool) -> np.ndarray:
    """Indices best first; ties keep input order."""
    v = np.asarray(values, dtype=np.float64)
    return np.argsort(-v if maximize else v, kind="stable")


def true_label(graph: DesignGraph, config: PipelineConfig) -> float:
    if config.label == "flow":
        return synthetic_label(graph)
    return graph_metrics(graph, a=config.a, alpha=config.alpha, K=config.K)["Q"]


def labelable(graph: DesignGraph, config: PipelineConfig) -> str | None:
    """Reason the design cannot be scored, or None."""
    problems = validate(graph)
    if problems:
        return "invalid"
    if config.label == "combined" and graph.n_edges == 0:
        return "no_edges"
    try:
        true_label(graph, config)
    except DegenerateNetworkError:
        return "degenerate"
    return None


def blend(designs: list[Design], incoming: list[Design], maximize: bool) -> tuple[list[Design], list[str]]:
    """Replace the worst-labelled designs with ``incoming`` (skipping ids already present).

    The dataset keeps its size; returns the new list and the ids blended in.
    """
    present = {d.id for d in designs}
    new = [d for d in incoming if d.id not in present]
    if not new:
        return list(designs), []
    if len(new) > len(designs):
        raise ValueError("cannot blend more designs than the dataset holds")
    labels = [d.q_true for d in designs]
    worst = rank_order(labels, maximize)[::-1][: len(new)]
    out = list(designs)
    for slot, d in zip(sorted(worst.tolist()), new):
        out[slot] = d
    return out, [d.id for d in new]


# ---------------------------------------------------------------------------
# run state


@dataclass
class RunState:
    config: PipelineConfig
    designs: list[Design]
    estimator: est.EstimatorModel
    generator: gen.GeneratorModel
    incumbent: Design
    iteration: int = 0
    records: list[IterationRecord] = field(default_factory=list)
    history: dict = field(default_factory=dict)

    def dataset(self) -> Dataset:
        return Dataset([d.graph for d in self.designs], [d.q_true for d in self.designs])

    @property
    def q_target(self) -> float:
        if self.config.q_target is not None:
            return float(self.config.q_target)
        y = np.array([d.q_true for d in self.designs])
        best = y.max() if self.config.maximize else y.min()
        step = y.std() if y.std() > 0 else 1.0
        return float(best + step if self.config.maximize else best - step)


def load_designs(config: PipelineConfig) -> list[Design]:
    if config.dataset is not None:
        ds = Dataset.load(config.dataset)
        labels = [y if math.isfinite(y) else true_label(g, config) for g, y in zip(ds.graphs, ds.labels)]
        graphs = ds.graphs
    else:
        synth = SynthConfig(**{"seed": derive_seed(config.seed, 1), **config.synth})
        ds = build_dataset(config.n_graphs, synth)
        graphs = ds.graphs
        labels = ds.labels if config.label == "flow" else [true_label(g, config) for g in graphs]
    if len(graphs) < config.top_c:
        raise ConfigurationError("dataset must hold at least top_c designs")
    return [Design(f"d{i}", g, q_true=float(y)) for i, (g, y) in enumerate(zip(graphs, labels))]


def resolve_config(config: PipelineConfig, designs: list[Design]) -> PipelineConfig:
    """Fix data-dependent defaults (K for the combined label) so reruns see constants."""
    if config.label == "combined" and config.K is None:
        costs = [edge_cost(d.graph, config.a) for d in designs]
        K = float(np.mean(costs)) or 1.0
        config = PipelineConfig.from_dict({**config.to_dict(), "K": K})
    return config


def initial_state(config: PipelineConfig) -> RunState:
    designs = load_designs(config)
    config = resolve_config(config, designs)
    if config.label == "combined":
        designs = [Design(d.id, d.graph, q_true=true_label(d.graph, config)) for d in designs]
    ds = Dataset([d.graph for d in designs], [d.q_true for d in designs])
    profile = designs[0].graph.profile

    e = est.EstimatorModel(maximize=config.maximize, profile=profile, seed=derive_seed(config.seed, 2))
    e, e_hist = est.train_estimator(
        e, ds, epochs=config.est_pretrain_epochs, rule=dn.Adam(config.est_lr), seed=derive_seed(config.seed, 3)
    )
    g = gen.GeneratorModel(gen.GeneratorConfig(latent_dim=config.latent_dim, profile=profile, seed=derive_seed(config.seed, 4)))
    g, g_hist = gen.train_generator(
        g,
        ds,
        epochs=config.gen_pretrain_epochs,
        weights=gen.LossWeights(kl=config.kl_weight),
        rule=dn.Adam(config.gen_lr),
        batch_size=config.gen_batch_size,
        seed=derive_seed(config.seed, 5),
        kl_warmup=config.kl_warmup,
    )
    best = designs[int(rank_order([d.q_true for d in designs], config.maximize)[0])]
    inc = Design(best.id, best.graph, q_est=est.estimate(e, best.graph), q_true=best.q_true)
    return RunState(config, designs, e, g, inc, history={"estimator": e_hist, "generator": g_hist})


# ---------------------------------------------------------------------------
# one iteration


def propose(state: RunState, it: int) -> tuple[list[Design], dict]:
    """B labelable candidates from perturbed encodings of the top designs (or the prior)."""
    cfg, model = state.config, state.generator
    order = rank_order([d.q_true for d in state.designs], cfg.maximize)
    seeds = [state.designs[i] for i in order[: cfg.top_c]]
    n_prior = int(round(cfg.prior_fraction * cfg.batch_size))
    q_target = state.q_target
    out, rejected = [], {"invalid": 0, "degenerate": 0, "no_edges": 0, "runaway": 0}
    for b in range(cfg.batch_size):
        for attempt in range(cfg.max_retries + 1):
            s = derive_seed(cfg.seed, 100, it, b, attempt)
            if b < n_prior:
                code = gen.prior_code(model, seed=s)
            else:
                code = gen.encode(model, seeds[b % len(seeds)].graph, seed=s)
            code = gen.latent_ascent(model, code.detached(), q_target, steps=cfg.ascent_steps, step_size=cfg.ascent_step_size)
            try:
                g = gen.decode(model, code, "sample", seed=s)
            except gen.DecodeRunawayError:
                rejected["runaway"] += 1
                continue
            why = labelable(g, cfg)
            if why is None:
                out.append(Design(f"g{it}-{b}", g, iteration=it))
                break
            rejected[why] += 1
    if len(out) < cfg.top_c:
        raise ResampleBudgetError(
            f"only {len(out)} of {cfg.batch_size} candidates survived {cfg.max_retries} retries",
            iteration=it,
            diagnostics={"rejected": rejected},
        )
    return out, rejected


def run_iteration(state: RunState) -> tuple[RunState, IterationRecord, list[Design]]:
    cfg = state.config
    it = state.iteration + 1
    cands, rejected = propose(state, it)
    scores = est.estimate_batch(state.estimator, [d.graph for d in cands])
    for d, q in zip(cands, scores):
        d.q_est = float(q)
    if cfg.elitism:
        # re-scored so an early overestimate cannot pin the incumbent after fine-tuning
        state.incumbent.q_est = est.estimate(state.estimator, state.incumbent.graph)
    pool = cands + ([state.incumbent] if cfg.elitism else [])
    top = [pool[i] for i in rank_order([d.q_est for d in pool], cfg.maximize)[: cfg.top_c]]
    for d in top:
        if not math.isfinite(d.q_true):
            d.q_true = true_label(d.graph, cfg)
    best = top[0]
    if not cfg.elitism or better(best.q_est, state.incumbent.q_est, cfg.maximize):
        state.incumbent = best

    state.designs, blended = blend(state.designs, top, cfg.maximize)
    ds = state.dataset()
    state.estimator, e_hist = est.train_estimator(
        state.estimator,
        ds,
        epochs=cfg.est_finetune_epochs,
        rule=dn.Adam(cfg.est_lr),
        seed=derive_seed(cfg.seed, 200, it),
    )
    k = min(cfg.gen_finetune_top, len(state.designs))
    sub = rank_order(ds.labels, cfg.maximize)[:k]
    sub_ds = Dataset([ds.graphs[i] for i in sub], [ds.labels[i] for i in sub])
    state.generator, g_hist = gen.train_generator(
        state.generator,
        sub_ds,
        epochs=cfg.gen_finetune_epochs,
        weights=gen.LossWeights(kl=cfg.kl_weight),
        rule=dn.Adam(cfg.gen_finetune_lr),
        batch_size=min(cfg.gen_batch_size, 32),
        seed=derive_seed(cfg.seed, 300, it),
    )
    nan = float("nan")
    rec = IterationRecord(
        iteration=it,
        best_q=state.incumbent.q_est,
        mean_topc_q=float(np.mean([d.q_est for d in top])),
        mean_topc_true=float(np.mean([d.q_true for d in top])),
        best_true=state.incumbent.q_true,
        n_candidates=len(cands),
        n_rejected=sum(rejected.values()),
        blended_ids=blended,
        est_loss=e_hist[-1]["val_mse"] if e_hist else nan,
        gen_kl=g_hist[-1]["kl"] if g_hist else nan,
        gen_dec=g_hist[-1]["dec"] if g_hist else nan,
        gen_perf=g_hist[-1]["perf"] if g_hist else nan,
    )
    if cfg.edns_every and it % cfg.edns_every == 0:
        r = edns(state.incumbent.graph, ResilienceConfig(**cfg.resilience))
        rec.edns, rec.edns_stderr = r.edns, r.stderr
    state.iteration = it
    state.records.append(rec)
    return state, rec, top


def converged(records: list[IterationRecord], initial_best: float, config: PipelineConfig) -> bool:
    t = len(records)
    if t >= config.max_iterations:
        return True
    if t < config.min_iterations:
        return False
    prev = records[-2].best_q if t >= 2 else initial_best
    return abs(records[-1].best_q - prev) < config.tol


# ---------------------------------------------------------------------------
# run directory


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


def _design_doc(d: Design) -> dict:
    return {
        "id": d.id,
        "iteration": d.iteration,
        "q_est": d.q_est,
        "q_true": d.q_true,
        "graph": json.loads(serialize(d.graph)),
    }


def _design_from_doc(doc: dict) -> Design:
    return Design(doc["id"], deserialize(json.dumps(doc["graph"])), doc["q_est"], doc["q_true"], doc["iteration"])


def write_records(path, records: list[IterationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


def read_records(path) -> list[IterationRecord]:
    with open(path, newline="") as fh:
        return [IterationRecord.from_row(row) for row in csv.DictReader(fh)]


def save_state(state: RunState, run_dir: Path) -> None:
    sd = run_dir / "state"
    sd.mkdir(parents=True, exist_ok=True)
    state.estimator.save(sd / "estimator.ckpt.tmp")
    os.replace(sd / "estimator.ckpt.tmp", sd / "estimator.ckpt")
    state.generator.save(sd / "generator.ckpt.tmp")
    os.replace(sd / "generator.ckpt.tmp", sd / "generator.ckpt")
    with open(sd / "designs.jsonl.tmp", "w") as fh:
        for d in state.designs:
            fh.write(json.dumps(_design_doc(d), separators=(",", ":")) + "\n")
    os.replace(sd / "designs.jsonl.tmp", sd / "designs.jsonl")
    write_records(run_dir / "records.csv", state.records)
    # written last: marks the state above as complete for this iteration
    _write_json(
        sd / "state.json",
        {
            "schema_version": SCHEMA_VERSION,
            "iteration": state.iteration,
            "incumbent": _design_doc(state.incumbent),
            "initial_best": state.history.get("initial_best"),
        },
    )


def load_state(run_dir: Path) -> RunState:
    sd = run_dir / "state"
    meta = json.loads((sd / "state.json").read_text())
    config = PipelineConfig.load(run_dir / "config.json")
    with open(sd / "designs.jsonl") as fh:
        designs = [_design_from_doc(json.loads(line)) for line in fh if line.strip()]
    records = read_records(run_dir / "records.csv")[: meta["iteration"]]
    return RunState(
        config,
        designs,
        est.EstimatorModel.load(sd / "estimator.ckpt"),
        gen.GeneratorModel.load(sd / "generator.ckpt"),
        _design_from_doc(meta["incumbent"]),
        meta["iteration"],
        records,
        {"initial_best": meta["initial_best"]},
    )


def _save_top(run_dir: Path, it: int, top: list[Design]) -> None:
    """Top-c of iteration ``it``; each entry's iteration is the one it was selected in."""
    dd = run_dir / "designs"
    dd.mkdir(exist_ok=True)
    _write_json(dd / f"iter_{it:04d}.json", {"schema_version": SCHEMA_VERSION, "iteration": it, "designs": [{**_design_doc(d), "iteration": it} for d in top]})


def run_pipeline(config: PipelineConfig, run_dir, resume: bool = True, log=None) -> Path:
    """Iterate until the best estimated Q moves less than ``tol`` (after ``min_iterations``) or ``max_iterations``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    it = None
    try:
        if resume and (run_dir / "state" / "state.json").exists():
            state = load_state(run_dir)
            if state.config.to_dict() != PipelineConfig.load(run_dir / "config.json").to_dict():
                raise ConfigurationError("run directory holds a different config")
        else:
            state = initial_state(config)
            state.history["initial_best"] = state.incumbent.q_est
            _write_json(run_dir / "config.json", state.config.to_dict())
            est.write_history(run_dir / "estimator_history.csv", state.history["estimator"])
            _write_gen_history(run_dir / "generator_history.csv", state.history["generator"])
            Dataset([d.graph for d in state.designs], [d.q_true for d in state.designs]).save(run_dir / "dataset.jsonl")
            save_state(state, run_dir)
        initial_best = state.history["initial_best"]
        while not (state.records and converged(state.records, initial_best, state.config)):
            it = state.iteration + 1
            state, rec, top = run_iteration(state)
            _save_top(run_dir, it, top)
            save_state(state, run_dir)
            if log:
                log(rec)
        emit_report(run_dir)
    except PipelineError as exc:
        _write_json(run_dir / "error.json", exc.to_dict())
        raise
    except Exception as exc:
        _write_json(run_dir / "error.json", {"error": type(exc).__name__, "message": str(exc), "iteration": it})
        raise PipelineError(str(exc), iteration=it) from exc
    if (run_dir / "error.json").exists():
        (run_dir / "error.json").unlink()
    return run_dir


def _write_gen_history(path, history) -> None:
    cols = ["epoch", "kl", "dec", "perf", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols})


# ---------------------------------------------------------------------------
# reporting


def saved_designs(run_dir) -> list[Design]:
    dd = Path(run_dir) / "designs"
    out = []
    for p in sorted(dd.glob("iter_*.json")) if dd.exists() else []:
        out.extend(_design_from_doc(doc) for doc in json.loads(p.read_text())["designs"])
    return out


def emit_report(run_dir) -> dict:
    """records.csv is kept as written; report.json adds the config, best design and per-iteration designs."""
    run_dir = Path(run_dir)
    records = read_records(run_dir / "records.csv")
    config = json.loads((run_dir / "config.json").read_text())
    designs = saved_designs(run_dir)
    maximize = config["objective"] == "maximize"
    best = None
    for d in designs:
        if best is None or better(d.q_true, best.q_true, maximize):
            best = d
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "iterations": [asdict(r) for r in records],
        "designs": [{k: v for k, v in _design_doc(d).items() if k != "graph"} for d in designs],
        "best_design": None if best is None else best.id,
    }
    _write_json(run_dir / "report.json", report)
    if best is not None:
        (run_dir / "best_design.json").write_text(serialize(best.graph))
    return report


@dataclass
class RankedDesign:
    id: str
    iteration: int
    q_est: float
    q_true: float
    edns: float
    edns_stderr: float
    error: str = ""


def post_process(run_dir, resilience: ResilienceConfig | None = None) -> list[RankedDesign]:
    """EDNS for every saved design on matched event seeds, smallest EDNS first.

    A design whose simulation fails is reported with its error and ranked last.
    """
    run_dir = Path(run_dir)
    cfg = resilience or ResilienceConfig()
    rows = []
    for d in saved_designs(run_dir):
        try:
            r = edns(d.graph, cfg)
            rows.append(RankedDesign(d.id, d.iteration, d.q_est, d.q_true, r.edns, r.stderr))
        except Exception as exc:  # report and keep going
            rows.append(RankedDesign(d.id, d.iteration, d.q_est, d.q_true, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"))
    rows.sort(key=lambda r: (not math.isfinite(r.edns), r.edns if math.isfinite(r.edns) else 0.0))
    cols = [f.name for f in fields(RankedDesign)]
    with open(run_dir / "post_process.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["rank", *cols], lineterminator="\n")
        w.writeheader()
        for k, r in enumerate(rows, start=1):
            w.writerow({"rank": k, **{c: repr(v) if isinstance(v, float) else v for c, v in asdict(r).items()}})
    _write_json(
        run_dir / "post_process.json",
        {
            "schema_version": SCHEMA_VERSION,
            "resilience": cfg.to_dict(),
            "optimal": rows[0].id if rows and not rows[0].error else None,
            "designs": [asdict(r) for r in rows],
        },
    )
    return rows
