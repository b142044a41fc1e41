import csv
import json

import httpx
import numpy as np
import pytest

from imap.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILED, EXIT_OK, main
from imap.config import ConfigError, RunConfig, from_dict, load_config
from imap.nn import MAGIC, CheckpointError, decode_blocks
from imap.runner import Runner, checkpoint_roundtrip, restore_runner

TINY = [
    "--set", "episodes_per_iter=8",
    "--set", "ppo.hidden=[8]",
    "--set", "reward.hidden=[8]",
    "--set", "ppo.epochs=2",
    "--set", "ppo.minibatch=32",
]


def tiny_config(tmp_path, **overrides) -> RunConfig:
    base = {
        "episodes_per_iter": 8,
        "iterations": 2,
        "ppo.hidden": [8],
        "reward.hidden": [8],
        "ppo.epochs": 2,
        "ppo.minibatch": 32,
        "output_dir": str(tmp_path / "run"),
    }
    base.update(overrides)
    return RunConfig().with_overrides(base)


# --- config -------------------------------------------------------------------


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.algo == "imap_la" and cfg.env.name == "coop_matrix"


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigError, match="ppo.learning_rate"):
        from_dict({"ppo": {"learning_rate": 1e-3}})
    with pytest.raises(ConfigError, match="unknown config key 'nope'"):
        RunConfig().with_overrides({"nope": 1})


@pytest.mark.parametrize(
    "data, pattern",
    [
        ({"algo": "qmix"}, "algo must be one of"),
        ({"ppo": {"gamma": 1.5}}, "gamma"),
        ({"reward": {"beta": 0.0}}, "beta"),
        ({"iterations": "ten"}, "integer"),
        ({"ppo": {"standardize": 1}}, "true or false"),
        ({"ppo": {"hidden": [8, -1]}}, "positive integers"),
    ],
)
def test_invalid_values(data, pattern):
    with pytest.raises(ConfigError, match=pattern):
        from_dict(data)


def test_toml_and_json_roundtrip(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('algo = "imap_ga"\nseed = 4\n[reward]\nhidden = [64, 64]\n[env]\nname = "grid_gather"\n')
    cfg = load_config(path)
    assert (cfg.algo, cfg.seed, cfg.reward.hidden, cfg.env.name) == ("imap_ga", 4, [64, 64], "grid_gather")
    cfg.dump_json(tmp_path / "c.json")
    assert from_dict(json.loads((tmp_path / "c.json").read_text())) == cfg


def test_bad_toml_is_config_error(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("algo = \n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")


# --- CLI ----------------------------------------------------------------------


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "plot-data" in capsys.readouterr().out


def test_one_iteration_run(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["run", "--iterations", "1", "--output-dir", str(out), *TINY]) == EXIT_OK
    for name in ("config.json", "metrics.csv", "timing.csv", "summary.json", "checkpoints/ckpt_00001.bin"):
        assert (out / name).exists(), name
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1 and rows[0]["iter"] == "0"
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 1 and 0.0 <= summary["optimal_fraction"] <= 1.0


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["run", "--output-dir", str(tmp_path), "--set", "ppo.lrr=1"]) == EXIT_CONFIG
    assert "ppo.lrr" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text('algo = "nope"\n')
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_divergence_exit_code(tmp_path, capsys):
    out = tmp_path / "d"
    code = main(["run", "--iterations", "3", "--output-dir", str(out), *TINY, "--set", "reward.lr=1e30"])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err
    assert (out / "metrics.csv").read_text().startswith("iter,")


@pytest.mark.parametrize("algo", ["imap_la", "sl_mappo"])
def test_rerun_is_byte_identical(tmp_path, algo):
    outs = [tmp_path / f"r{k}" for k in range(2)]
    for out in outs:
        assert main(["run", "--algo", algo, "--seed", "3", "--iterations", "3", "--output-dir", str(out), *TINY]) == 0
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    for name in ("ckpt_00003.bin",):
        assert (outs[0] / "checkpoints" / name).read_bytes() == (outs[1] / "checkpoints" / name).read_bytes()


def test_verify_prop2(capsys):
    assert main(["verify", "--only", "prop2"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS prop2")


def test_verify_corrupted_fixture(tmp_path, capsys):
    fx = tmp_path / "mixer.json"
    fx.write_text(json.dumps({"weights": [1.0, -0.5], "bias": 0.0}))
    assert main(["verify", "--only", "prop2", "--fixture", str(fx)]) == EXIT_FAILED
    assert "precondition_violation" in capsys.readouterr().out


def test_plot_data(tmp_path):
    root = tmp_path / "runs"
    for algo in ("imap_la", "sparse_mappo"):
        assert main(["run", "--algo", algo, "--iterations", "2", "--output-dir", str(root / algo), *TINY]) == 0
    tidy = tmp_path / "tidy.csv"
    assert main(["plot-data", "--run-dir", str(root), "--output", str(tidy)]) == EXIT_OK
    rows = list(csv.DictReader(open(tidy)))
    assert list(rows[0]) == ["run", "algo", "seed", "iter", "metric", "value"]
    assert {r["algo"] for r in rows} == {"imap_la", "sparse_mappo"}
    assert all(r["value"] != "nan" for r in rows)
    assert main(["plot-data", "--run-dir", str(tmp_path / "empty")]) == EXIT_FAILED


# --- checkpoints ----------------------------------------------------------------


@pytest.mark.parametrize("algo", ["imap_la", "sl_mappo", "sparse_mappo"])
def test_checkpoint_roundtrip(tmp_path, algo):
    cfg = tiny_config(tmp_path, algo=algo)
    Runner(cfg).run()
    ck = tmp_path / "run" / "checkpoints" / "ckpt_00002.bin"
    assert checkpoint_roundtrip(ck)
    runner, it = restore_runner(tmp_path / "run")
    assert it == 2
    assert set(decode_blocks(ck.read_bytes())) == set(runner.blocks(it))


def test_checkpoint_cli(tmp_path, capsys):
    Runner(tiny_config(tmp_path)).run()
    assert main(["checkpoint", str(tmp_path / "run" / "checkpoints" / "ckpt_00002.bin")]) == EXIT_OK
    assert "roundtrip ok" in capsys.readouterr().out


def test_truncated_and_foreign_checkpoints(tmp_path):
    Runner(tiny_config(tmp_path)).run()
    ck = tmp_path / "run" / "checkpoints" / "ckpt_00002.bin"
    data = ck.read_bytes()
    with pytest.raises(CheckpointError):
        decode_blocks(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        decode_blocks(b"NOTACKPT" + data[len(MAGIC):])
    bad = ck.with_name("ckpt_00099.bin")
    bad.write_bytes(data[:-3])
    assert main(["checkpoint", str(bad)]) == EXIT_FAILED


def test_checkpoint_from_other_algo_rejected(tmp_path):
    Runner(tiny_config(tmp_path, algo="sl_mappo")).run()
    (tmp_path / "run" / "config.json").write_text(json.dumps(tiny_config(tmp_path, algo="sparse_mappo").to_dict()))
    with pytest.raises(CheckpointError, match="sl."):
        restore_runner(tmp_path / "run")


# --- LLM preference source end to end ---------------------------------------------


def test_llm_source_run_with_mock(tmp_path):
    replies = iter(["#1", "#2", "no idea", "#0"] * 1000)

    def handler(request):
        body = json.loads(request.content)
        assert "Trajectory 1" in body["messages"][0]["content"]
        return httpx.Response(200, json={"choices": [{"message": {"content": next(replies)}}]})

    cfg = tiny_config(tmp_path, preference_source="llm", iterations=1, **{"reward.max_pairs": 8})
    runner = Runner(cfg, llm_client=httpx.Client(transport=httpx.MockTransport(handler)))
    summary = runner.run()
    assert summary["llm_fallbacks"] == runner.labeler.fallbacks > 0
    audit = (tmp_path / "run" / "llm_audit.jsonl").read_text().splitlines()
    assert len(audit) == 8
    assert np.isfinite(summary["final_policy_value"])
