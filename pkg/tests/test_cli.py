import json

import pandas as pd
import pytest

from demaformer.cli import EXIT_CONFIG, EXIT_OK, build_parser, run, split_samples
from demaformer.data import gen_synthetic
from demaformer.errors import ConfigError


@pytest.fixture
def workspace(tmp_path, small_raw):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(small_raw))
    data = tmp_path / "data.jsonl"
    assert run(["gen-data", "--config", str(config), "--out", str(data), "--n", "6"]) == EXIT_OK
    return tmp_path, config, data


def test_gen_data(workspace):
    _, _, data = workspace
    lines = data.read_text().splitlines()
    assert len(lines) == 6
    assert json.loads(lines[0])["id"].startswith("synth-11-")


def test_train_eval_sample_pipeline(workspace):
    tmp_path, config, data = workspace
    run_dir = tmp_path / "run"
    assert run(["train", "--config", str(config), "--data", str(data), "--out", str(run_dir)]) == EXIT_OK
    for name in ("training.csv", "params.json", "config.json", "metrics.json"):
        assert (run_dir / name).exists()
    assert list(pd.read_csv(run_dir / "training.csv").columns) == ["epoch", "l_match", "l_nll", "total", "rank1_05"]

    eval_dir = tmp_path / "eval"
    params = str(run_dir / "params.json")
    assert run(["eval", "--params", params, "--data", str(data), "--out", str(eval_dir)]) == EXIT_OK
    assert len((eval_dir / "predictions.jsonl").read_text().splitlines()) == 6
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert 0.0 <= metrics["rank1@0.5"] <= 1.0 and "map_avg" in metrics

    trace = tmp_path / "trace.csv"
    assert run(["sample", "--params", params, "--data", str(data), "--steps", "4", "--out", str(trace)]) == EXIT_OK
    frame = pd.read_csv(trace)
    assert list(frame.columns) == ["step", "mean_energy"]
    assert list(frame["step"]) == [0, 1, 2, 3, 4]


def test_training_csv_is_reproducible(workspace):
    tmp_path, config, data = workspace
    for name in ("a", "b"):
        assert run(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / name)]) == EXIT_OK
    assert (tmp_path / "a" / "training.csv").read_bytes() == (tmp_path / "b" / "training.csv").read_bytes()
    for name in ("a", "b"):
        params = str(tmp_path / name / "params.json")
        assert run(["eval", "--params", params, "--data", str(data), "--out", str(tmp_path / f"eval_{name}")]) == EXIT_OK
    predictions = [(tmp_path / f"eval_{name}" / "predictions.jsonl").read_bytes() for name in ("a", "b")]
    assert predictions[0] == predictions[1]


def test_bad_config_exits_2(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"epochs": 0}))
    assert run(["gen-data", "--config", str(config), "--out", str(tmp_path / "d.jsonl")]) == EXIT_CONFIG
    assert "[ERROR]" in capsys.readouterr().err


def test_bad_manifest_exits_2(workspace):
    tmp_path, config, _ = workspace
    data = tmp_path / "broken.jsonl"
    data.write_text('{"id": "x"\n')
    assert run(["train", "--config", str(config), "--data", str(data), "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def test_missing_params_exits_2(workspace):
    tmp_path, _, data = workspace
    args = ["eval", "--params", str(tmp_path / "none.json"), "--data", str(data), "--out", str(tmp_path / "e")]
    assert run(args) == EXIT_CONFIG


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--seed", "1", "--max-coords", "6"]) == EXIT_OK
    assert "max rel err" in capsys.readouterr().out


def test_ablate_command(workspace):
    tmp_path, config, data = workspace
    out = tmp_path / "ablation"
    args = ["ablate", "--config", str(config), "--data", str(data), "--out", str(out),
            "--seeds", "1", "--variants", "full,no_ebm", "--steps", "2", "--epochs", "1"]
    assert run(args) == EXIT_OK
    frame = pd.read_csv(out / "ablation.csv")
    assert list(frame["variant"]) == ["full", "no_ebm", "steps=2"]
    summary = json.loads((out / "ablation.json").read_text())
    assert summary["rank1_05_gap_full_minus_no_ebm"] is not None


def test_split_needs_two_samples(small_cfg):
    with pytest.raises(ConfigError):
        split_samples(gen_synthetic(small_cfg.synth, 1), small_cfg)
    train, held_out = split_samples(gen_synthetic(small_cfg.synth, 10), small_cfg)
    assert len(train) == 8 and len(held_out) == 2


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


@pytest.mark.parametrize("corrupt", ["salience", "utf8"])
def test_malformed_manifest_exits_2(workspace, corrupt, capsys):
    tmp_path, config, data = workspace
    first = json.loads(data.read_text().splitlines()[0])
    broken = tmp_path / "broken.jsonl"
    if corrupt == "salience":
        first["salience"] = ["high"] * len(first["salience"])
        broken.write_text(json.dumps(first) + "\n")
    else:
        broken.write_bytes(json.dumps(first).encode("utf-8") + b"\n\xc3\x28\n")
    assert run(["train", "--config", str(config), "--data", str(broken), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "[ERROR]" in err and "line" in err
