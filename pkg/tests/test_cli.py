import json

import pytest

from geogrouse import cli
from geogrouse.config import ConfigError, RunConfig, parse_toml
from geogrouse.numerics import ParamStore
from geogrouse.policy import ModelConfig
from geogrouse.simulator import generate_environment
from geogrouse.training import init_params, initial_sample

SMALL = """
[env]
n_users = 150
n_items = 60

[train]
em_rounds = 2
batch_size = 80
init_sample = 100

[eval]
seeds = [1000, 1001]
n_sessions = 60
"""


def write_cfg(tmp_path, text=SMALL, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_default_config_round_trips():
    cfg = RunConfig()
    assert parse_toml(cfg.to_toml()) == cfg
    assert parse_toml("") == cfg


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError, match=r"train\.gamma"):
        parse_toml('[train]\ngamma = "high"\n')
    with pytest.raises(ConfigError, match=r"model\.nope: unknown key"):
        parse_toml("[model]\nnope = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_toml("[extra]\na = 1\n")
    with pytest.raises(ConfigError, match=r"eval\.seeds\[1\]"):
        parse_toml('[eval]\nseeds = [1, "2"]\n')
    with pytest.raises(ConfigError, match="model"):
        parse_toml('[model]\nvariant = "moe"\n')
    with pytest.raises(ConfigError, match="invalid TOML"):
        parse_toml("[train\n")


def test_preference_matrix_in_config():
    cfg = parse_toml("[env]\nn_groups = 2\nn_categories = 2\npreference = [[0.9, 0.1], [0.2, 0.8]]\n")
    assert cfg.env.preference == [[0.9, 0.1], [0.2, 0.8]]
    assert parse_toml(cfg.to_toml()) == cfg


def test_grad_check_command(tmp_path, capsys):
    code, out, _ = run(capsys, "grad-check", "--config", write_cfg(tmp_path), "--n-seeds", "2")
    assert code == 0
    assert "max relative error" in out


def test_train_zero_rounds_checkpoint_equals_init(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, SMALL.replace("em_rounds = 2", "em_rounds = 0"))
    out_dir = tmp_path / "out"
    code, _, _ = run(capsys, "train", "--config", cfg_path, "--out", str(out_dir), "--variant", "proto")
    assert code == 0
    cfg = parse_toml(open(cfg_path).read())
    env = generate_environment(cfg.env)
    init = init_params(ModelConfig(variant="proto"), env.vocab, 0, initial_sample(env, 100, 0))
    assert ParamStore.load(out_dir / "checkpoint.json").equal(init.store)
    assert (out_dir / "history.csv").read_text() == "round,mean_return,objective,sse_or_loglik,grad_norm\n"


def test_eval_random_init_is_chance(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, SMALL.replace("em_rounds = 2", "em_rounds = 0").replace("n_sessions = 60", "n_sessions = 300"))
    out_dir = tmp_path / "out"
    assert run(capsys, "train", "--config", cfg_path, "--out", str(out_dir))[0] == 0
    code, out, _ = run(capsys, "eval", "--config", cfg_path, "--out", str(out_dir),
                       "--checkpoint", str(out_dir / "checkpoint.json"))
    assert code == 0
    metrics = json.loads((out_dir / "metrics.json").read_text())
    assert abs(metrics["auc"] - 0.5) < 0.03
    assert "NDCG@10" in out


def test_resolved_config_echo_reparses(tmp_path, capsys):
    code, out, _ = run(capsys, "grad-check", "--config", write_cfg(tmp_path), "--n-seeds", "1",
                       "--seed", "9", "--variant", "kmeans", "--out", str(tmp_path / "x"))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "# command: grad-check  seed: 9"
    echoed = "\n".join(lines[1:-1])
    cfg = parse_toml(echoed)
    assert cfg.train.seed == 9 and cfg.model.variant == "kmeans" and cfg.io.output_dir == str(tmp_path / "x")


def test_train_and_eval_are_byte_identical(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path)
    outputs = []
    for rep in range(2):
        out_dir = tmp_path / f"rep{rep}"
        assert run(capsys, "train", "--config", cfg_path, "--out", str(out_dir))[0] == 0
        assert run(capsys, "eval", "--config", cfg_path, "--out", str(out_dir),
                   "--checkpoint", str(out_dir / "checkpoint.json"))[0] == 0
        outputs.append({f: (out_dir / f).read_bytes() for f in ("checkpoint.json", "history.csv", "metrics.json")})
    assert outputs[0] == outputs[1]


def test_gen_data_outputs(tmp_path, capsys):
    from geogrouse.episodes import read_sessions

    out_dir = tmp_path / "data"
    code, _, _ = run(capsys, "gen-data", "--config", write_cfg(tmp_path), "--out", str(out_dir))
    assert code == 0
    assert len(read_sessions(out_dir / "sessions.jsonl")) == 80
    test = read_sessions(out_dir / "test_sessions.jsonl")
    assert len(test) == 60 and all(st.labels is not None for ep in test for st in ep.steps)
    env = json.loads((out_dir / "environment.json").read_text())
    assert env["aoi_sizes"] == [1, 2, 3, 12, 48]
    assert 0.08 <= env["uniform_click_rate"] <= 0.12


def test_sweep_command(tmp_path, capsys):
    out_dir = tmp_path / "sw"
    cfg_path = write_cfg(tmp_path, SMALL.replace("em_rounds = 2", "em_rounds = 1"))
    code, out, _ = run(capsys, "sweep", "--config", cfg_path, "--out", str(out_dir), "--levels", "2,3")
    assert code == 0
    rows = (out_dir / "sweep.csv").read_text().splitlines()
    assert rows[0] == "aoi_level,auc_mean,auc_std"
    assert [r.split(",")[0] for r in rows[1:]] == ["2", "3"]


@pytest.mark.parametrize("argv", [
    ["train"],
    ["train", "--config", "x.toml", "--variant", "moe"],
    ["frobnicate", "--config", "x.toml"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(capsys, *argv)[0] == 1


def test_config_errors_exit_1(tmp_path, capsys):
    assert run(capsys, "train", "--config", str(tmp_path / "missing.toml"))[0] == 1
    bad = write_cfg(tmp_path, "[train]\nlearning_rate = -1.0\n", "bad.toml")
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 1 and "train" in err
    code, _, err = run(capsys, "eval", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "o"),
                       "--checkpoint", str(tmp_path / "nope.json"))
    assert code == 1 and "checkpoint not found" in err
    code, _, err = run(capsys, "sweep", "--config", write_cfg(tmp_path), "--levels", "0,3")
    assert code == 1 and "1..5" in err


def test_grad_check_failure_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli, "policy_grad_check", lambda cfg, seed: 1.0)
    assert run(capsys, "grad-check", "--config", write_cfg(tmp_path), "--n-seeds", "1")[0] == 2


def test_numerical_failure_exits_2(tmp_path, capsys, monkeypatch):
    from geogrouse.numerics import NumericalError

    def boom(*a, **k):
        raise NumericalError("nan in history")

    monkeypatch.setattr(cli, "train_em", boom)
    code, _, err = run(capsys, "train", "--config", write_cfg(tmp_path), "--out", str(tmp_path / "o"))
    assert code == 2 and "nan in history" in err


def test_eval_rejects_mismatched_checkpoint(tmp_path, capsys):
    cfg_path = write_cfg(tmp_path, SMALL.replace("em_rounds = 2", "em_rounds = 0"))
    out_dir = tmp_path / "out"
    assert run(capsys, "train", "--config", cfg_path, "--out", str(out_dir), "--variant", "kmeans")[0] == 0
    code, _, err = run(capsys, "eval", "--config", cfg_path, "--out", str(out_dir), "--variant", "can",
                       "--checkpoint", str(out_dir / "checkpoint.json"))
    assert code == 1 and "does not match" in err


@pytest.mark.parametrize("name", ["default", "sweep", "quick"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from geogrouse.config import load

    cfg = load(Path(__file__).parent.parent / "configs" / f"{name}.toml")
    assert parse_toml(cfg.to_toml()) == cfg
