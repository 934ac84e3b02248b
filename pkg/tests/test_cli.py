import json

import pytest
from conftest import tiny_config

from dymoe.cli import main, pct


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(tiny_config(steps=6).canonical_json())
    return p


def _train(config_file, out, *extra):
    return main(["train", "--config", str(config_file), "--out", str(out), *extra])


def test_train_writes_artifacts(config_file, tmp_path, capsys):
    assert _train(config_file, tmp_path / "run") == 0
    out = tmp_path / "run"
    for name in ("matrix.json", "metrics.csv", "steps.jsonl", "eval_log.jsonl", "config.json"):
        assert (out / name).exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["task1", "task2"]
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "run_id,metric,value" and [l.split(",")[1] for l in lines[1:]] == ["mfn", "maa", "bwt"]
    h = json.loads((out / "matrix.json").read_text())["config_hash"]
    assert lines[1].startswith(h)
    step = json.loads((out / "steps.jsonl").read_text().splitlines()[0])
    assert step["config_hash"] == h
    assert {"step", "l_ntp", "l_aux", "l_exc", "l_spe", "total", "type_counts"} <= set(step)
    assert "MFN" in capsys.readouterr().out


def test_train_is_deterministic(config_file, tmp_path):
    assert _train(config_file, tmp_path / "a") == 0
    assert _train(config_file, tmp_path / "b") == 0
    for name in ("metrics.csv", "matrix.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablation_flags_change_the_hash(config_file, tmp_path):
    assert _train(config_file, tmp_path / "a", "--no-tag", "--no-rsr", "--no-aux", "--seed", "3") == 0
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())["train"]
    assert not cfg["tag_enabled"] and not cfg["rsr_enabled"] and not cfg["aux_enabled"] and cfg["seed"] == 3


def test_replay_and_prune_flags(config_file, tmp_path):
    assert _train(config_file, tmp_path / "a", "--replay", "10", "--prune", "1/4") == 0
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())["train"]
    assert cfg["replay_capacity"] == 10 and cfg["prune_fraction"] == 0.25


def test_bad_tau_exits_one_and_names_the_field(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"moe": {"tau": 1.5}}))
    assert _train(p, tmp_path / "o") == 1
    assert "moe.tau" in capsys.readouterr().err


def test_bad_arguments_exit_one(config_file, tmp_path):
    assert main(["train", "--config", str(config_file)]) == 1
    assert _train(config_file, tmp_path / "o", "--prune", "1/2") == 1
    assert main(["nonsense"]) == 1
    assert _train(tmp_path / "missing.json", tmp_path / "o") == 1


def test_bad_log_level_exits_one(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("DYMOE_LOG_LEVEL", "loud")
    assert _train(config_file, tmp_path / "o") == 1


def test_divergence_exits_two(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(tiny_config(steps=50, lr=1e300, warmup_ratio=0.0).canonical_json())
    assert _train(p, tmp_path / "o") == 2
    dump = json.loads((tmp_path / "o" / "divergence.json").read_text())
    assert "step" in dump and "tokens" in dump


def test_analyze_writes_curve(config_file, tmp_path):
    assert main(["analyze", "--config", str(config_file), "--strategy", "only-new", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "curve_only-new.csv").read_text().splitlines()
    assert lines[0] == "step,acc_task1,acc_task2,strategy,seed"
    assert lines[1].startswith("0,") and lines[-1].startswith("6,")
    assert "config_hash" in json.loads((tmp_path / "curve_only-new.json").read_text())


def test_analyze_unknown_strategy_exits_one(config_file, tmp_path):
    assert main(["analyze", "--config", str(config_file), "--strategy", "only-old", "--out", str(tmp_path)]) == 1


@pytest.fixture
def trained(config_file, tmp_path):
    _train(config_file, tmp_path / "run")
    data = tmp_path / "data.jsonl"
    assert main(["export-data", "--config", str(config_file), "--out", str(data)]) == 0
    return tmp_path / "run", data


def test_eval_reproduces_the_matrix_row(trained, capsys):
    run, data = trained
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run / "checkpoints" / "task2"), "--data", str(data)]) == 0
    out = capsys.readouterr().out
    row = json.loads((run / "matrix.json").read_text())["rows"][1]
    for i, a in enumerate(row, start=1):
        assert f"task {i}: {pct(a)}" in out


def test_inspect_single_task_checkpoint(trained, tmp_path, capsys):
    run, data = trained
    capsys.readouterr()
    stats = tmp_path / "stats.json"
    assert main(["inspect", "--ckpt", str(run / "checkpoints" / "task1"), "--data", str(data), "--out", str(stats)]) == 0
    out = capsys.readouterr().out
    table = [l for l in out.splitlines() if l.startswith("block")  and "gate mass" not in l]
    # one row per (site, expert): 2 sites x 2 experts of task 1
    assert len(table) == 4 and all(" t1 " in l for l in table)
    doc = json.loads(stats.read_text())
    assert all(len(v) == 1 for v in doc["group_mass"].values())


def test_inspect_activation_rows_after_two_tasks(trained, capsys):
    run, data = trained
    capsys.readouterr()
    assert main(["inspect", "--ckpt", str(run / "checkpoints" / "task2"), "--data", str(data)]) == 0
    table = [l for l in capsys.readouterr().out.splitlines() if l.startswith("block") and "gate mass" not in l]
    assert len(table) == 2 * 4


def test_corrupt_checkpoint_exits_three(trained):
    run, data = trained
    ck = run / "checkpoints" / "task1"
    m = json.loads((ck / "manifest.json").read_text())
    m["format_version"] = 99
    (ck / "manifest.json").write_text(json.dumps(m))
    assert main(["inspect", "--ckpt", str(ck), "--data", str(data)]) == 3
    (ck / "manifest.json").write_text("garbage")
    assert main(["eval", "--ckpt", str(ck), "--data", str(data)]) == 3


def test_pct_formatting():
    assert pct(0.57031) == "57.03" and pct(-0.0467) == "-4.67"
