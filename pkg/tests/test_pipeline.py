import json
import math
from collections import Counter

import numpy as np
import pytest

from netdesign import pipeline as P
from netdesign.graph import ConfigurationError, DesignGraph, EdgeAttr, NodeAttr, deserialize, serialize
from netdesign.resilience import ResilienceConfig
from netdesign.synthgen import SynthConfig, generate_graph


def tiny(**kw):
    base = dict(
        n_graphs=30,
        synth={"n": 10},
        batch_size=6,
        top_c=2,
        max_iterations=3,
        min_iterations=3,
        est_pretrain_epochs=5,
        gen_pretrain_epochs=1,
        gen_finetune_epochs=1,
        gen_finetune_top=8,
        gen_batch_size=16,
        ascent_steps=3,
        latent_dim=6,
        seed=11,
    )
    base.update(kw)
    return P.PipelineConfig(**base)


def design(i, y):
    g = generate_graph(SynthConfig(n=6), i)
    return P.Design(f"d{i}", g, q_true=y)


# ---------------------------------------------------------------------------
# config and pure helpers


def test_config_validation():
    with pytest.raises(ConfigurationError):
        P.PipelineConfig(batch_size=5, top_c=6)
    with pytest.raises(ConfigurationError):
        P.PipelineConfig(tol=0.0)
    with pytest.raises(ConfigurationError):
        P.PipelineConfig(objective="sideways")
    with pytest.raises(ConfigurationError):
        P.PipelineConfig.from_dict({"batch": 3})
    cfg = P.PipelineConfig()
    assert (cfg.batch_size, cfg.max_iterations) == (500, 150)
    assert P.PipelineConfig.from_dict(cfg.to_dict()) == cfg
    desk = P.PipelineConfig.desk()
    assert (desk.n_graphs, desk.batch_size, desk.top_c, desk.max_iterations) == (500, 50, 5, 20)


def test_rank_order_and_better():
    assert P.rank_order([1.0, 3.0, 2.0], True).tolist() == [1, 2, 0]
    assert P.rank_order([1.0, 3.0, 2.0], False).tolist() == [0, 2, 1]
    assert P.better(2, 1, True) and P.better(1, 2, False)


def test_blend_replaces_worst_and_keeps_size():
    ds = [design(i, y) for i, y in enumerate([5.0, 1.0, 4.0, 2.0, 3.0])]
    new = [design(10, 9.0), design(11, 8.0)]
    out, ids = P.blend(ds, new, maximize=True)
    assert len(out) == 5 and ids == ["d10", "d11"]
    assert sorted(d.q_true for d in out) == [3.0, 4.0, 5.0, 8.0, 9.0]
    out, _ = P.blend(ds, new, maximize=False)
    assert sorted(d.q_true for d in out) == [1.0, 2.0, 3.0, 8.0, 9.0]


def test_blend_skips_designs_already_present():
    ds = [design(i, float(i)) for i in range(4)]
    out, ids = P.blend(ds, [ds[3], design(9, 7.0)], maximize=True)
    assert ids == ["d9"] and [d.id for d in out] == ["d9", "d1", "d2", "d3"]


def test_blend_of_equals_keeps_label_multiset():
    ds = [design(i, float(i % 3)) for i in range(6)]
    same = [P.Design(f"c{i}", d.graph, q_true=d.q_true) for i, d in enumerate(ds)]
    out, _ = P.blend(ds, same, maximize=True)
    assert Counter(d.q_true for d in out) == Counter(d.q_true for d in ds)


def test_converged_rule():
    cfg = tiny(max_iterations=10, min_iterations=1, tol=0.5)
    rec = lambda q: P.IterationRecord(1, q, q, q, q, 1, 0, [], 0.0, 0.0, 0.0, 0.0)  # noqa: E731
    assert P.converged([rec(1.2)], 1.0, cfg)
    assert not P.converged([rec(2.0)], 1.0, cfg)
    assert P.converged([rec(2.0), rec(2.1)], 1.0, cfg)
    inf = tiny(tol=math.inf, min_iterations=1)
    assert P.converged([rec(100.0)], -5.0, inf)


def test_record_csv_roundtrip(tmp_path):
    recs = [
        P.IterationRecord(1, 1.5, 1.25, 0.1 + 0.2, 7.0, 6, 1, ["g1-0", "g1-3"], 0.5, 1.0, 2.0, 3.0),
        P.IterationRecord(2, 2.5, 2.25, 3.0, 8.0, 6, 0, [], float("nan"), 1.0, 2.0, 3.0, 1.75, 0.125),
    ]
    P.write_records(tmp_path / "r.csv", recs)
    back = P.read_records(tmp_path / "r.csv")
    assert [r.to_row() for r in back] == [r.to_row() for r in recs]
    assert back[1].blended_ids == [] and math.isnan(back[1].est_loss) and back[1].edns == 1.75


# ---------------------------------------------------------------------------
# runs


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    P.run_pipeline(tiny(), d, resume=False)
    return d


def test_run_directory_contents(run):
    for name in ("config.json", "records.csv", "report.json", "dataset.jsonl", "estimator_history.csv", "generator_history.csv", "best_design.json"):
        assert (run / name).exists(), name
    recs = P.read_records(run / "records.csv")
    assert [r.iteration for r in recs] == [1, 2, 3]
    report = json.loads((run / "report.json").read_text())
    assert report["schema_version"] == P.SCHEMA_VERSION and len(report["iterations"]) == 3
    assert not (run / "error.json").exists()


def test_dataset_size_constant_and_true_labels(run):
    state = P.load_state(run)
    assert len(state.designs) == 30
    cfg = state.config
    for d in state.designs:
        if d.id.startswith("g"):
            assert d.q_true == P.true_label(d.graph, cfg)
    blended = {i for r in P.read_records(run / "records.csv") for i in r.blended_ids}
    assert blended <= {d.id for d in state.designs} | {d.id for d in P.saved_designs(run)}


def test_saved_top_designs_carry_true_labels(run):
    designs = P.saved_designs(run)
    assert len(designs) == 3 * 2
    for d in designs:
        assert math.isfinite(d.q_true) and math.isfinite(d.q_est)


def test_rerun_is_bit_identical(run, tmp_path):
    P.run_pipeline(tiny(), tmp_path, resume=False)
    for name in ("records.csv", "report.json", "dataset.jsonl"):
        assert (tmp_path / name).read_bytes() == (run / name).read_bytes(), name
    assert (tmp_path / "state" / "generator.ckpt").read_bytes() == (run / "state" / "generator.ckpt").read_bytes()


def test_resume_matches_uninterrupted(run, tmp_path):
    P.run_pipeline(tiny(max_iterations=1, min_iterations=1), tmp_path, resume=False)
    # widen the budget in place and continue from the saved state
    cfg = json.loads((tmp_path / "config.json").read_text())
    cfg.update(max_iterations=3, min_iterations=3)
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    P.run_pipeline(P.PipelineConfig.from_dict(cfg), tmp_path, resume=True)
    assert (tmp_path / "records.csv").read_bytes() == (run / "records.csv").read_bytes()


def test_infinite_tolerance_runs_once(tmp_path):
    P.run_pipeline(tiny(tol=math.inf, min_iterations=1), tmp_path, resume=False)
    assert len(P.read_records(tmp_path / "records.csv")) == 1


def test_max_iterations_bounds_run(tmp_path):
    P.run_pipeline(tiny(tol=1e-300, min_iterations=1, max_iterations=2), tmp_path, resume=False)
    assert len(P.read_records(tmp_path / "records.csv")) <= 2


def test_elitism_best_never_worsens_with_fixed_estimator(tmp_path):
    P.run_pipeline(tiny(est_finetune_epochs=0, max_iterations=4, min_iterations=4), tmp_path, resume=False)
    best = [r.best_q for r in P.read_records(tmp_path / "records.csv")]
    assert all(b >= a for a, b in zip(best, best[1:]))


def test_combined_label_minimizes(tmp_path):
    P.run_pipeline(tiny(label="combined", objective="minimize", max_iterations=1, min_iterations=1), tmp_path, resume=False)
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["K"] > 0
    rec = P.read_records(tmp_path / "records.csv")[0]
    assert math.isfinite(rec.mean_topc_true)


def test_failure_leaves_error_json(tmp_path):
    # every decode runs away, so no candidate survives
    cfg = tiny(max_retries=0)
    with pytest.raises(P.PipelineError) as info:
        state = P.initial_state(cfg)
        with np.errstate(all="ignore"):
            import torch

            with torch.no_grad():
                state.generator.params["stop.b1"].fill_(-60.0)
        P.run_iteration(state)
    assert info.value.iteration == 1 and "rejected" in info.value.diagnostics
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(P.PipelineError):
        P.run_pipeline(tiny(dataset=str(bad)), tmp_path / "r", resume=False)
    err = json.loads((tmp_path / "r" / "error.json").read_text())
    assert err["error"] and "message" in err


def test_edns_every_records_edns(tmp_path):
    P.run_pipeline(
        tiny(edns_every=1, max_iterations=1, min_iterations=1, resilience={"grid": 2, "n_samples": 5}), tmp_path, resume=False
    )
    rec = P.read_records(tmp_path / "records.csv")[0]
    assert rec.edns >= 0 and math.isfinite(rec.edns_stderr)


# ---------------------------------------------------------------------------
# post-processing


def test_post_process_rows_and_ranking(run):
    rows = P.post_process(run, ResilienceConfig(grid=3, n_samples=20))
    assert len(rows) == len(P.saved_designs(run))
    e = [r.edns for r in rows]
    assert e == sorted(e)
    doc = json.loads((run / "post_process.json").read_text())
    assert doc["optimal"] == rows[0].id


def _fake_run(path, designs):
    (path / "designs").mkdir(parents=True)
    (path / "designs" / "iter_0001.json").write_text(
        json.dumps({"schema_version": 1, "iteration": 1, "designs": [P._design_doc(d) for d in designs]})
    )


def test_post_process_empty(tmp_path):
    _fake_run(tmp_path, [])
    assert P.post_process(tmp_path) == []


def test_post_process_dominated_design_has_higher_edns(tmp_path):
    nodes = [NodeAttr(0, 0, 10.0, (0.1, 0.1))] + [NodeAttr(k, 1, 2.0, (0.3 * k, 0.1 + 0.25 * k)) for k in (1, 2, 3)]
    path = DesignGraph(nodes, [EdgeAttr(k, k + 1, 2, 12.0, 1.0) for k in range(3)])
    ring = DesignGraph(nodes, path.edges + (EdgeAttr(0, 3, 2, 12.0, 1.0),))
    _fake_run(tmp_path, [P.Design("path", path, 6.0, 6.0, 1), P.Design("ring", ring, 6.0, 6.0, 1)])
    rows = P.post_process(tmp_path, ResilienceConfig(grid=3, n_samples=200, seed=4))
    by = {r.id: r for r in rows}
    assert by["path"].edns >= by["ring"].edns
    assert rows[0].id == "ring"


def test_post_process_survives_bad_design(tmp_path):
    g = generate_graph(SynthConfig(n=6), 0)
    lonely = DesignGraph(g.nodes, g.edges, profile="unregistered")
    _fake_run(tmp_path, [P.Design("ok", g, 1.0, 1.0, 1), P.Design("bad", lonely, 1.0, 1.0, 1)])
    rows = P.post_process(tmp_path, ResilienceConfig(grid=2, n_samples=5))
    assert [r.id for r in rows] == ["ok", "bad"] and rows[1].error


def test_graph_serialization_used_in_reports_roundtrips():
    g = generate_graph(SynthConfig(n=8), 3)
    assert deserialize(serialize(g)) == g
