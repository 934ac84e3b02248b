import json

import pytest

from dymoe.config import ConfigError, RunConfig, config_from_dict, config_from_json, load_config


def test_defaults_round_trip_and_hash_is_stable():
    cfg = RunConfig()
    back = config_from_json(cfg.canonical_json())
    assert back == cfg and back.config_hash == cfg.config_hash


def test_hash_ignores_key_order():
    a = config_from_dict({"moe": {"tau": 0.1, "top_k": 2}, "train": {"seed": 3, "lr": 0.01}})
    b = config_from_dict({"train": {"lr": 0.01, "seed": 3}, "moe": {"top_k": 2, "tau": 0.1}})
    assert a.config_hash == b.config_hash
    assert a.config_hash != RunConfig().config_hash


def test_empty_document_gives_defaults():
    assert config_from_dict({}) == RunConfig()


def test_n_tasks_and_overlap_shorthand():
    cfg = config_from_dict({"n_tasks": 3, "overlap": 0.5})
    assert len(cfg.tasks) == 3 and all(t.overlap == 0.5 for t in cfg.tasks)


def test_explicit_task_list():
    cfg = config_from_dict({"tasks": [{"n_train": 10}, {"n_train": 20, "overlap": 0.1}]})
    assert [t.task_id for t in cfg.tasks] == [1, 2] and cfg.tasks[1].overlap == 0.1


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"moe": {"tau": 1.5}}, "moe.tau"),
        ({"moe": {"top_k": 0}}, "moe.top_k"),
        ({"train": {"lr": -1}}, "train.lr"),
        ({"train": {"warmup_ratio": 1.0}}, "train.warmup_ratio"),
        ({"train": {"tag_enabled": "yes"}}, "train.tag_enabled"),
        ({"train": {"steps_per_task": 1.5}}, "train.steps_per_task"),
        ({"train": {"bogus": 1}}, "train.bogus"),
        ({"bogus": {}}, "bogus"),
        ({"overlap": 2.0}, "overlap"),
        ({"tasks": [{"overlap": -0.1}]}, "tasks[0].overlap"),
        ({"tasks": []}, "tasks"),
        ({"backbone": {"vocab_size": 32}}, "layout.vocab_size"),
    ],
)
def test_errors_name_the_offending_field(doc, field):
    with pytest.raises(ConfigError) as err:
        config_from_dict(doc)
    assert err.value.field == field
    assert str(err.value).startswith(field + ":")


def test_load_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"seed": 4}}))
    assert load_config(p).train.seed == 4
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_config(p)


def test_with_helpers():
    cfg = RunConfig().with_train(seed=9).with_moe(tau=0.5)
    assert cfg.train.seed == 9 and cfg.moe.tau == 0.5
