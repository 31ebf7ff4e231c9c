import csv
import json
import subprocess
import sys

import pytest

from netdesign.cli import main
from netdesign.graph import deserialize, serialize, validate
from netdesign.synthgen import Dataset, SynthConfig, generate_graph


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else json.loads(err))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "3", "gen-dataset", "--count", "12", "--n", "8", "--out", str(d / "ds.jsonl")]) == 0
    assert main(["train-estimator", "--dataset", str(d / "ds.jsonl"), "--epochs", "2", "--lr", "0.01", "--out", str(d / "est.ckpt")]) == 0
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"latent_dim": 6, "gen_batch_size": 8}))
    assert main(["--config", str(cfg), "train-generator", "--dataset", str(d / "ds.jsonl"), "--epochs", "1", "--out", str(d / "gen.ckpt")]) == 0
    return d


def test_gen_dataset_flags(tmp_path, capsys):
    code, out = run(capsys, "gen-dataset", "--count", 5, "--n", 10, "--k", 4, "--supply-range", 2, 3, "--seed", 7, "--out", tmp_path / "d.jsonl")
    assert code == 0 and out["count"] == 5
    assert out["synth"]["n"] == 10 and out["synth"]["k"] == 4 and out["synth"]["seed"] == 7
    ds = Dataset.load(tmp_path / "d.jsonl")
    assert len(ds) == 5 and all(g.n_nodes == 10 for g in ds.graphs)


def test_training_outputs(trained):
    for name in ("est.ckpt", "est.history.csv", "gen.ckpt", "gen.history.csv"):
        assert (trained / name).exists(), name
    with open(trained / "est.history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 and {"epoch", "train_mse", "val_mse"} <= set(rows[0])


def test_generate_modes(trained, capsys):
    out_path = trained / "g.jsonl"
    code, out = run(
        capsys, "generate", "--generator", trained / "gen.ckpt", "--estimator", trained / "est.ckpt",
        "--count", 3, "--mode", "greedy", "--q-target", 40.0, "--out", out_path,
    )
    assert code == 0 and out["count"] == 3
    # dataset line format, labelled with the estimator where valid
    ds = Dataset.load(out_path)
    assert len(ds) == 3
    assert out["valid"] == sum(not validate(g) for g in ds.graphs)


def test_generate_expansion_keeps_base(trained, tmp_path, capsys):
    base = generate_graph(SynthConfig(n=8), 0)
    doc = json.loads(serialize(base))
    doc["new_nodes"] = 2
    (tmp_path / "c.json").write_text(json.dumps(doc))
    code, out = run(capsys, "generate", "--generator", trained / "gen.ckpt", "--constraints", tmp_path / "c.json", "--count", 2, "--out", tmp_path / "x.jsonl")
    assert code == 0
    for line in (tmp_path / "x.jsonl").read_text().splitlines():
        g = deserialize(line)
        assert g.n_nodes == 10
        assert set(base.edges) <= set(g.edges)


def test_simulate_csv(tmp_path, capsys):
    g = generate_graph(SynthConfig(n=8), 1)
    (tmp_path / "g.json").write_text(serialize(g))
    code, out = run(capsys, "simulate", "--graph", tmp_path / "g.json", "--grid", 3, "--samples", 10, "--seed", 2, "--out", tmp_path / "s.csv")
    assert code == 0 and out["resilience"]["seed"] == 2
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "sample,epicenter_row,epicenter_col,failed_nodes,failed_edges,C_e"
    assert len(lines) == 12 and lines[-1].startswith("# EDNS ")
    mean = sum(float(r.split(",")[-1]) for r in lines[1:-1]) / 10
    assert mean == pytest.approx(out["edns"])


def test_evaluate(tmp_path, capsys):
    g = generate_graph(SynthConfig(n=8), 2)
    (tmp_path / "g.json").write_text(serialize(g))
    code, out = run(capsys, "evaluate", "--graph", tmp_path / "g.json")
    assert code == 0 and out["valid"]
    assert {"f_max", "capacity_ratio", "edge_cost", "Q"} <= set(out)


def test_optimize_then_report(tmp_path, capsys):
    cfg = {
        "n_graphs": 20, "synth": {"n": 8}, "batch_size": 4, "top_c": 2, "max_iterations": 2, "min_iterations": 2,
        "est_pretrain_epochs": 2, "gen_pretrain_epochs": 1, "gen_finetune_epochs": 1, "gen_finetune_top": 6,
        "gen_batch_size": 8, "ascent_steps": 2, "latent_dim": 6,
    }
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    run_dir = tmp_path / "run"
    code, out = run(capsys, "--config", tmp_path / "cfg.json", "--seed", 5, "--out-dir", run_dir, "optimize", "--fresh")
    assert code == 0 and out["iterations"] == 2
    assert json.loads((run_dir / "config.json").read_text())["seed"] == 5
    code, out = run(capsys, "report", "--run-dir", run_dir, "--post-process", "--grid", 2, "--samples", 5)
    assert code == 0 and out["ranked"] == 4 and out["optimal"]
    assert (run_dir / "post_process.csv").exists()


def test_errors_are_json_with_nonzero_exit(tmp_path, capsys):
    code, err = run(capsys, "evaluate", "--graph", tmp_path / "missing.json")
    assert code == 1 and err["error"] == "FileNotFoundError"
    (tmp_path / "bad.json").write_text(json.dumps({"batch": 3}))
    code, err = run(capsys, "--config", tmp_path / "bad.json", "gen-dataset", "--count", 1)
    assert code == 1 and "batch" in err["message"]


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "netdesign.cli", "evaluate", "--graph", str(tmp_path / "none.json")], capture_output=True, text=True
    )
    assert proc.returncode == 1 and json.loads(proc.stderr)["error"]
