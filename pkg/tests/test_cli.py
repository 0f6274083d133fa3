import csv
import json

import numpy as np
import pytest

from neuralgde.cli import _attention_rows, main, resolve_config, run_experiment
from neuralgde.config import ConfigError, default_config
from neuralgde.datagen import repressilator_graph
from neuralgde.plots import attention_traces

SMALL = {
    "particles": ["--set", "data.T=1.0", "--set", "model.models=gcde static"],
    "hybrid_forecast": ["--set", "data.days=2"],
    "repressilator": ["--set", "data.n_train=2", "--set", "data.n_test=1", "--set", "model.n_samples=2"],
    "oversmoothing": ["--set", "data.n_per_block=10"],
}


def run(tmp_path, experiment, name, *extra, epochs=2, seed=0):
    out = tmp_path / name
    argv = ["reproduce", experiment, "--seed", str(seed), "--epochs", str(epochs),
            "--output-dir", str(out), *SMALL[experiment], *extra]
    assert main(argv) == 0
    return out


def manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("experiment", ["particles", "hybrid_forecast", "repressilator", "oversmoothing"])
def test_reproduce_writes_complete_manifest(tmp_path, experiment):
    out = run(tmp_path, experiment, "run")
    doc = manifest(out)
    assert doc["status"] == "complete" and doc["format"] == "neuralgde-run"
    assert doc["experiment"] == experiment and doc["seeds"] == [0]
    assert doc["artifacts"]
    for rel, digest in doc["artifacts"].items():
        assert (out / rel).is_file()
    assert any(rel.startswith("metrics/") for rel in doc["artifacts"])
    if experiment != "oversmoothing":
        assert any(rel.endswith(".svg") for rel in doc["artifacts"])


def test_generate_then_train_twice_is_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        common = ["--experiment", "particles", "--seed", "7", "--epochs", "3", "--output-dir", str(out),
                  *SMALL["particles"]]
        assert main(["generate", *common]) == 0
        assert main(["train", *common]) == 0
        outs.append(out)
    for f in sorted((outs[0] / "metrics").iterdir()):
        assert f.read_bytes() == (outs[1] / "metrics" / f.name).read_bytes()
    a, b = manifest(outs[0])["artifacts"], manifest(outs[1])["artifacts"]
    a.pop("config.ini"), b.pop("config.ini")
    assert a == b


def test_zero_epochs_is_evaluation_only(tmp_path):
    out = run(tmp_path, "particles", "zero", epochs=0)
    table = rows(out / "mape.csv")
    assert {r["model"] for r in table} == {"gcde", "static"}
    assert sorted({int(r["k"]) for r in table}) == [1, 2, 3, 4, 5]
    assert all(float(r["mape"]) >= 0 for r in table)
    metrics = rows(out / "metrics" / "gcde_seed0.csv")
    assert all(r["split"] != "train" for r in metrics)


def test_repressilator_halves_and_attention_edges(tmp_path):
    out = run(tmp_path, "repressilator", "rep", epochs=1)
    cfg = resolve_config(out / "manifest.json")
    assert cfg["data"]["T"] == 300.0
    samples = rows(out / "samples.csv")
    ts = sorted({float(r["t"]) for r in samples})
    assert ts[0] >= 150.0 and ts[-1] <= 300.0
    traces = attention_traces(rows(out / "attention.csv"))
    assert sorted(traces) == list(range(6))
    for node, edges in traces.items():
        incoming = [e for e in edges if e[1] == node]
        outgoing = [e for e in edges if e[0] == node]
        assert len(incoming) == 3 and len(outgoing) == 3


def test_attention_rows_pick_both_directions():
    A = repressilator_graph().adjacency
    alpha = np.arange(18 * 18, dtype=float).reshape(18, 18)
    out = _attention_rows(A, [(0.5, "drift.1", alpha[None])])
    mine = [r for r in out if r[1] == 0]
    assert len(mine) == 6
    for t, node, src, dst, w in mine:
        assert w == alpha[dst, src]


def test_manifest_marks_failure(tmp_path):
    out = tmp_path / "fail"
    code = main(["eval", "--experiment", "particles", "--seed", "0", "--output-dir", str(out)])
    assert code == 2
    doc = manifest(out)
    assert doc["status"] == "failed" and "FileNotFoundError" in doc["error"]


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\nname = particles\n[training]\nepoch = 3\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "bad.ini:4: unknown key 'epoch'" in capsys.readouterr().err
    assert main(["train", "--experiment", "particles", "--set", "training.epochs"]) == 2


def test_config_file_drives_run(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text(f"[experiment]\nname = oversmoothing\nseeds = 2\noutput_dir = {tmp_path / 'o'}\n"
                   "[data]\nn_per_block = 10\n[training]\nepochs = 2\n")
    assert main(["generate", "--config", str(ini)]) == 0
    assert main(["train", "--config", str(ini)]) == 0
    table = rows(tmp_path / "o" / "results.csv")
    assert {r["seed"] for r in table} == {"2"}
    assert {float(r["span"]) for r in table} == {1.0, 10.0}


def test_manifest_regenerates_run(tmp_path):
    first = run(tmp_path, "hybrid_forecast", "h1", epochs=1)
    cfg = resolve_config(first / "manifest.json", overrides={"experiment.output_dir": str(tmp_path / "h2")})
    run_experiment(cfg)
    a, b = manifest(first)["artifacts"], manifest(tmp_path / "h2")["artifacts"]
    a.pop("config.ini"), b.pop("config.ini")
    assert a == b


def test_plot_subcommand_and_missing_csv(tmp_path, capsys):
    out = run(tmp_path, "hybrid_forecast", "h", epochs=1)
    before = (out / "plots" / "predictions.svg").read_bytes()
    assert main(["plot", str(out)]) == 0
    assert (out / "plots" / "predictions.svg").read_bytes() == before
    (out / "predictions.csv").unlink()
    assert main(["plot", str(out)]) == 2
    assert "predictions.csv" in capsys.readouterr().err


def test_unknown_stage_rejected(tmp_path):
    cfg = default_config("oversmoothing")
    cfg.set("experiment.output_dir", str(tmp_path / "x"))
    with pytest.raises(ValueError):
        run_experiment(cfg, stages=("deploy",))
    with pytest.raises(ConfigError):
        resolve_config()
