import json

import numpy as np
import pytest
from conftest import tiny_config

from dymoe.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    VersionMismatch,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from dymoe.experiment import build_base, build_stream, run_training
from dymoe.trainer import count_correct


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config(steps=10)
    out = tmp_path_factory.mktemp("run")
    res = run_training(cfg, out)
    return cfg, out, res


def _files(path):
    return (path / "manifest.json").read_bytes(), (path / "tensors.bin").read_bytes()


def test_save_load_save_is_byte_identical(trained, tmp_path):
    cfg, out, _ = trained
    for j in (1, 2):
        src = out / "checkpoints" / f"task{j}"
        model, config, manifest = load_checkpoint(src)
        save_checkpoint(model, tmp_path / f"again{j}", config, manifest["task"])
        assert _files(src) == _files(tmp_path / f"again{j}")


def test_loaded_model_reproduces_accuracies(trained):
    cfg, out, res = trained
    model, _, _ = load_checkpoint(out / "checkpoints" / "task2")
    stream = build_stream(cfg)
    for i in (1, 2):
        c, n = count_correct(model, stream[i - 1].test_tokens, stream[i - 1].test_labels, i)
        assert c / n == res.matrix.get(2, i)


def test_structure_is_restored(trained):
    cfg, out, res = trained
    model, _, manifest = load_checkpoint(out / "checkpoints" / "task2")
    for site, reg in res.model.registries.items():
        back = model.registries[site]
        assert back.group_index == reg.group_index
        assert [g.frozen for g in back.groups] == [g.frozen for g in reg.groups]
        assert back.router_frozen_rows == reg.router_frozen_rows
    assert set(model.trainable()) == set(res.model.trainable())
    assert model.shares_base_head(1) and model.shares_base_head(2)
    assert set(model.optimizer.params) == set(model.trainable())
    assert model.optimizer.t == res.model.optimizer.t
    for n in model.optimizer.params:
        np.testing.assert_array_equal(model.optimizer.m[n], res.model.optimizer.m[n])
        np.testing.assert_array_equal(model.optimizer.v[n], res.model.optimizer.v[n])


def test_manifest_lists_everything(trained):
    _, out, res = trained
    manifest = read_manifest(out / "checkpoints" / "task2")
    names = {e["name"] for e in manifest["tensors"]}
    assert set(res.model.named_tensors()) <= names
    assert {f"optim.m.{n}" for n in res.model.trainable()} <= names
    assert manifest["format_version"] == FORMAT_VERSION and manifest["config_hash"] == trained[0].config_hash


def _copy(src, dst):
    dst.mkdir()
    for f in ("manifest.json", "tensors.bin"):
        (dst / f).write_bytes((src / f).read_bytes())
    return dst


def _edit(path, fn):
    m = json.loads((path / "manifest.json").read_text())
    fn(m)
    (path / "manifest.json").write_text(json.dumps(m))


def test_edited_shape_is_rejected(trained, tmp_path):
    ck = _copy(trained[1] / "checkpoints" / "task2", tmp_path / "c")

    def grow(m):
        e = m["tensors"][0]
        e["shape"] = [e["shape"][0] + 1, *e["shape"][1:]]

    _edit(ck, grow)
    with pytest.raises(CheckpointError, match="needs"):
        load_checkpoint(ck)


def test_consistent_but_wrong_shape_is_rejected(trained, tmp_path):
    ck = _copy(trained[1] / "checkpoints" / "task2", tmp_path / "c")

    def transpose(m):
        e = next(e for e in m["tensors"] if e["name"] == "tok_emb")
        e["shape"] = e["shape"][::-1]

    _edit(ck, transpose)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(ck)


def test_truncated_payload_is_rejected(trained, tmp_path):
    ck = _copy(trained[1] / "checkpoints" / "task2", tmp_path / "c")
    data = (ck / "tensors.bin").read_bytes()
    (ck / "tensors.bin").write_bytes(data[: len(data) - 8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(ck)


def test_version_mismatch_is_rejected(trained, tmp_path):
    ck = _copy(trained[1] / "checkpoints" / "task1", tmp_path / "c")
    _edit(ck, lambda m: m.update(format_version=FORMAT_VERSION + 1))
    with pytest.raises(VersionMismatch):
        load_checkpoint(ck)


def test_corrupted_or_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_unknown_tensor_is_rejected(trained, tmp_path):
    ck = _copy(trained[1] / "checkpoints" / "task1", tmp_path / "c")

    def extra(m):
        e = dict(m["tensors"][0])
        e["name"] = "mystery"
        m["tensors"].append(e)

    _edit(ck, extra)
    with pytest.raises(CheckpointError, match="does not know"):
        load_checkpoint(ck)


def test_untrained_model_round_trips(tmp_path):
    cfg = tiny_config()
    model = build_base(cfg)
    save_checkpoint(model, tmp_path / "a", cfg, 0)
    back, _, _ = load_checkpoint(tmp_path / "a")
    save_checkpoint(back, tmp_path / "b", cfg, 0)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
