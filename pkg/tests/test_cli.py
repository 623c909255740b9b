import hashlib
import json
import math

import pandas as pd
import pytest
import yaml

from ntforecast.cli import main
from ntforecast.config import load_config
from ntforecast.errors import ConfigurationError

SMALL = {
    "seed": 3,
    "data": {"synth": {"n_links": 6, "n_hours": 720, "n_clusters": 2}},
    "window": {"input_length": 24, "horizon": 2},
    "grid": {"horizons": [1, 2], "sequence_lengths": [24, 120]},
    "archs": ["lstm", "calf", "cluster-calf"],
    "models": {
        "lstm": {"hidden_units": 4},
        "ntgat": {"n_heads": 2, "lift_dim": 2, "gat_out_dim": 4, "lstm1_hidden": 4, "lstm2_hidden": 4},
        "calf": {"d_model": 8, "n_heads": 2, "d_ff": 16, "vocab_size": 16, "n_principal": 4, "n_layers": 1},
    },
    "train": {"max_epochs": 2, "early_stop_patience": 1, "train_stride": 4},
    "cluster": {"k": 2, "k_list": [1, 2]},
}


def write_config(tmp_path, cfg=None, name="cfg.yaml", **changes):
    cfg = json.loads(json.dumps(cfg or SMALL))
    cfg.setdefault("output_dir", str(tmp_path / "out"))
    cfg.update(changes)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------- config

def test_config_defaults_and_hash(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.train.batch_size == 64 and cfg.cluster.method == "spearman"
    assert cfg.config_hash() == load_config(write_config(tmp_path, name="b.yaml")).config_hash()
    assert load_config(write_config(tmp_path), {"seed": 9}).seed == 9


@pytest.mark.parametrize("mutate, where", [
    (lambda c: c["models"]["lstm"].update(hiden_units=3), "models.lstm.hiden_units"),
    (lambda c: c.update(extra_key=1), "extra_key"),
    (lambda c: c["train"].update(early_stop_patience=5), "train"),
    (lambda c: c["models"]["ntgat"].update(n_heads=3), "models.ntgat"),
    (lambda c: c["data"].update(path="x.csv"), "data"),
    (lambda c: c.update(split={"train": 0.5, "val": 0.1, "test": 0.1}), "split"),
    (lambda c: c.update(grid={"horizons": [1], "sequence_lengths": [24],
                              "params": {"lstm": {"hidden_unitz": [2]}}}), "grid.params.lstm.hidden_unitz"),
    (lambda c: c["cluster"].update(method="kendall"), "cluster.method"),
])
def test_config_rejections_name_the_field(tmp_path, mutate, where):
    cfg = json.loads(json.dumps(SMALL))
    mutate(cfg)
    with pytest.raises(ConfigurationError, match=where.replace(".", r"\.")):
        load_config(write_config(tmp_path, cfg))


def test_unknown_key_exit_2(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL))
    cfg["models"]["lstm"]["hiden_units"] = 3
    assert run("train", "--config", write_config(tmp_path, cfg), "--arch", "lstm") == 2
    assert "hiden_units" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()  # nothing ran


# ---------------------------------------------------------------- commands

def test_generate_is_deterministic(tmp_path):
    a = write_config(tmp_path, name="a.yaml", output_dir=str(tmp_path / "a"))
    b = write_config(tmp_path, name="b.yaml", output_dir=str(tmp_path / "b"))
    assert run("generate", "--config", a, "--seed", 7) == 0
    assert run("generate", "--config", b, "--seed", 7) == 0
    for f in ("series.csv", "graph.json"):
        assert digest(tmp_path / "a" / "data" / f) == digest(tmp_path / "b" / "data" / f)
    m = json.loads((tmp_path / "a" / "manifests" / "generate.json").read_text())
    assert m["seed"] == 7 and m["command"] == "generate"
    assert set(m) >= {"config_hash", "versions", "outputs"}


def test_missing_artifacts_exit_3(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("sweep", "--config", cfg) == 3
    assert run("evaluate", "--config", cfg, "--arch", "lstm") == 3
    assert run("report", "--config", cfg) == 3
    assert "generate" in capsys.readouterr().err
    assert run("train", "--config", tmp_path / "nope.yaml", "--arch", "lstm") == 3


def test_generate_needs_synth(tmp_path):
    cfg = json.loads(json.dumps(SMALL))
    cfg["data"] = {"path": str(tmp_path / "x.csv")}
    assert run("generate", "--config", write_config(tmp_path, cfg)) == 2


def test_training_failure_exit_4(tmp_path, capsys):
    cfg = json.loads(json.dumps(SMALL))
    # quadratic loss everywhere plus a huge step size blows up within a few epochs
    cfg["train"].update(optimizer="sgd", learning_rate=1e4, huber_delta=1e30, max_epochs=10,
                        early_stop_patience=9)
    path = write_config(tmp_path, cfg)
    assert run("generate", "--config", path) == 0
    assert run("train", "--config", path, "--arch", "lstm") == 4
    err = capsys.readouterr().err
    assert "run log" in err and "runlog_failed.jsonl" in err
    assert (tmp_path / "out" / "train" / "lstm" / "runlog_failed.jsonl").exists()
    m = json.loads((tmp_path / "out" / "manifests" / "train-lstm.json").read_text())
    assert m["status"] == "failed"


def test_train_then_evaluate(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("generate", "--config", path) == 0
    assert run("train", "--config", path, "--arch", "cluster-calf") == 0
    assert run("evaluate", "--config", path, "--arch", "cluster-calf") == 0
    summary = json.loads((out / "train" / "cluster-calf" / "summary.json").read_text())
    metrics = pd.read_csv(out / "evaluate" / "cluster-calf" / "metrics.csv", float_precision="round_trip")
    assert metrics["smape"].mean() == pytest.approx(summary["test_smape"], rel=1e-12)
    assert summary["config_id"] == "cluster-calf-L24-H2-k2"


def feasible_points(cfg):
    # floor train, floor val, remainder test
    T = cfg["data"]["synth"]["n_hours"]
    n_train, n_val = math.floor(0.7 * T + 1e-9), math.floor(0.15 * T + 1e-9)
    n_test = T - n_train - n_val
    count = 0
    for arch in cfg["archs"]:
        variants = len(cfg["cluster"]["k_list"]) if arch == "cluster-calf" else 1
        for L in cfg["grid"]["sequence_lengths"]:
            for H in cfg["grid"]["horizons"]:
                if n_train - L - H + 1 >= 32 and min(n_val, n_test) >= L + H:
                    count += variants
    return count


def test_sweep_report_row_count_and_manifests(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    for cmd in ("generate", "decompose", "cluster", "sweep", "report"):
        assert run(cmd, "--config", path) == 0, cmd
    # re-running parts must not break manifest ownership
    assert run("sweep", "--config", path, "--arch", "lstm") == 0
    assert run("report", "--config", path) == 0

    grid = pd.read_csv(out / "report" / "grid_report.csv")
    assert len(grid) == feasible_points(SMALL) == 8
    assert (out / "report" / "cluster_L24_H1" / "cluster_sweep.csv").exists()
    assert (out / "report" / "compare_L24_H2.csv").exists()

    listed = {}
    for m in (out / "manifests").glob("*.json"):
        for o in json.loads(m.read_text())["outputs"]:
            listed.setdefault(o["path"], []).append(m.name)
    on_disk = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file()}
    on_disk = {p for p in on_disk if not p.startswith("manifests/")}
    assert on_disk == set(listed)
    assert all(len(v) == 1 for v in listed.values()), {k: v for k, v in listed.items() if len(v) > 1}


def test_decompose_and_cluster_outputs(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("generate", "--config", path) == 0
    assert run("decompose", "--config", path) == 0
    assert run("cluster", "--config", path) == 0
    series = pd.read_csv(out / "data" / "series.csv", index_col=0)
    parts = [pd.read_csv(out / "decompose" / f"{n}.csv", index_col=0)
             for n in ("trend", "seasonal_daily", "seasonal_weekly", "residual")]
    pd.testing.assert_frame_equal(sum(parts), series, check_exact=False, atol=1e-9)
    a = json.loads((out / "cluster" / "assignment_k2.json").read_text())
    assert a["k"] == 2 and len(a["labels"]) == 6 and a["rows"]["stop"] == a["rows"]["train_stop"]


def test_path_data_source(tmp_path):
    from ntforecast.synth import synth_generate

    r = synth_generate(5, 720, 2, seed=0)
    r.write(tmp_path / "d.csv", tmp_path / "g.json")
    cfg = json.loads(json.dumps(SMALL))
    cfg["data"] = {"path": str(tmp_path / "d.csv"), "graph": str(tmp_path / "g.json")}
    cfg["archs"] = ["ntgat"]
    path = write_config(tmp_path, cfg)
    assert run("train", "--config", path) == 0
    assert (tmp_path / "out" / "train" / "ntgat" / "checkpoint" / "params.pt").exists()
