import json

import numpy as np
import pytest

from efformer.cli import main, parse_spike
from efformer.experiments import (ExperimentConfig, condition_name, metrics_csv_text, read_metrics_csv,
                                  run_experiment)

TINY_MODEL = {"layers": 1, "heads": 2, "geom_dim": 8, "action_dim": 8, "head_dim": 4, "ffn_dim": 16,
              "pred_hidden": 16}


def tiny_config(**kw) -> dict:
    d = {"name": "tiny",
         "train_data": {"kind": "pursuit", "n_clips": 12, "seed": 1},
         "test_data": {"kind": "pursuit", "n_clips": 6, "seed": 2},
         "model": TINY_MODEL, "train": {"epochs": 2, "batch_size": 6},
         "methods": [{"name": "EF", "decoder": "ef"}, {"name": "Typical", "decoder": "typical"}],
         "seeds": [0, 1], "spikes": [[5]], "decode_modes": ["cumdelta"]}
    d.update(kw)
    return d


def test_run_experiment_is_reproducible(tmp_path):
    a = run_experiment(ExperimentConfig.from_dict(tiny_config()), tmp_path / "a")
    b = run_experiment(ExperimentConfig.from_dict(tiny_config()), tmp_path / "b")
    assert metrics_csv_text(a.rows) == metrics_csv_text(b.rows)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    assert {r["condition"] for r in rows} == {"clean", "spike@5"}
    assert {r["mode"] for r in rows} == {"uvr", "cumdelta"}
    assert {r["seed"] for r in rows} == {"0", "1", "mean", "std"}
    assert (tmp_path / "a" / "EF_seed1" / "loss.csv").exists()
    per = a.per_seed("EF", "FAD", mode="uvr")
    assert a.value("EF", "FAD", mode="uvr") == pytest.approx(np.mean(list(per.values())))
    assert a.value("EF", "FAD", seed="std", mode="uvr") == pytest.approx(np.std(list(per.values()), ddof=1))


@pytest.mark.parametrize("bad,match", [
    ({"task": "predict", "k": 1}, "inconsistent"),
    ({"task": "infer", "k": 0}, "inconsistent"),
    ({"seeds": []}, "seed"),
    ({"methods": [{"name": "a"}, {"name": "a"}]}, "unique"),
    ({"decode_modes": ["xy"]}, "output mode"),
    ({"train": {"epoch": 1}}, "unknown"),
])
def test_config_validation(bad, match):
    with pytest.raises(ValueError, match=match):
        ExperimentConfig.from_dict(tiny_config(**bad)).validate()


def test_unknown_config_key():
    with pytest.raises(ValueError, match="unknown"):
        ExperimentConfig.from_dict({"epochs": 3})


def test_spike_frames_checked(tmp_path):
    with pytest.raises(ValueError, match="outside"):
        run_experiment(ExperimentConfig.from_dict(tiny_config(spikes=[[1]], seeds=[0])))


def test_condition_names():
    assert condition_name(()) == "clean"
    assert condition_name((5, 6)) == "spike@5+6"


def test_parse_spike():
    assert parse_spike("frames=5,6") == ((5, 6), (1.0, 1.0, -1.0, -1.0, -1.0, -1.0))
    assert parse_spike("frames=3 vec=0,0,1,1,1,1")[1] == (0, 0, 1, 1, 1, 1)
    for bad in ("vec=1,1,1,1,1,1", "frames=2.5", "frames=3 vec=1,2", "size=3", "frames"):
        with pytest.raises(Exception):
            parse_spike(bad)


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "data"
    (tmp_path / "gen.json").write_text(json.dumps({"train": {"n_clips": 10, "seed": 1},
                                                    "test": {"n_clips": 4, "seed": 2}}))
    assert main(["generate", "--config", str(tmp_path / "gen.json"), "--out", str(data)]) == 0
    cfg = tiny_config(train_data=str(data / "train.csv"), test_data=str(data / "test.csv"),
                      methods=[{"name": "EF", "decoder": "ef"}], seeds=[0], spikes=[])
    (tmp_path / "exp.json").write_text(json.dumps(cfg))
    return tmp_path


def test_cli_end_to_end(workspace, capsys):
    w = workspace
    assert (w / "data" / "train.csv").exists() and (w / "data" / "train.json").exists()
    exp = str(w / "exp.json")
    assert main(["train", "--config", exp, "--out", str(w / "runs"), "--checkpoint-every", "1"]) == 0
    ck = w / "runs" / "EF_seed0" / "model.efck"
    assert ck.exists() and (w / "runs" / "EF_seed0" / "epoch0002.efck").exists()
    assert main(["eval", "--config", exp, "--checkpoint", str(ck), "--out", str(w / "ev"),
                 "--spike", "frames=6"]) == 0
    rows = read_metrics_csv(w / "ev" / "metrics.csv")
    assert {r["condition"] for r in rows} == {"clean", "spike@6"}
    assert main(["rollout", "--config", exp, "--checkpoint", str(ck), "--out", str(w / "ro"),
                 "--plots", "2"]) == 0
    svg = (w / "ro" / "clip0.svg").read_text()
    assert svg.startswith("<svg") and "ground truth" in svg
    lines = (w / "ro" / "estimates.csv").read_text().splitlines()
    assert lines[0] == "clip_id,frame,target,u,v,action" and len(lines) == 1 + 4 * 10
    assert main(["robustness", "--config", exp, "--out", str(w / "rb"), "--spike", "frames=3"]) == 0
    assert "spike@3 FAD" in capsys.readouterr().out
    assert main(["ablate", "--config", exp, "--out", str(w / "ab")]) == 0
    report = (w / "ab" / "report.txt").read_text()
    assert report.splitlines()[1].startswith("EF") and "cumdelta" in report


def test_cli_errors(workspace, capsys):
    w = workspace
    assert main(["train", "--config", str(w / "missing.json")]) == 1
    assert "error" in capsys.readouterr().err
    assert main(["train", "--config", str(w / "exp.json"), "--task", "predict", "--k", "2"]) == 1
    ck = w / "nope.efck"
    assert main(["eval", "--config", str(w / "exp.json"), "--checkpoint", str(ck)]) == 1
    with pytest.raises(SystemExit):
        main(["train", "--decoder", "lstm"])
