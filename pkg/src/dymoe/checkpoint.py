"""Checkpoint directories: ``manifest.json`` plus a raw little-endian float32 payload.

Every tensor is stored row-major at a byte offset listed in the manifest.
Model values are kept float32-representable during training, so a
save/load/save cycle reproduces the payload byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .backbone import Model
from .config import RunConfig, config_from_dict
from .layer import ExpertGroup
from .optim import AdamW
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


class VersionMismatch(CheckpointError):
    pass


def _entries(model: Model) -> dict[str, np.ndarray]:
    out = {name: t.data for name, t in model.named_tensors().items()}
    opt = getattr(model, "optimizer", None)
    if opt is not None:
        out.update(opt.state_tensors())
    return out


def save_checkpoint(model: Model, path, config: RunConfig, task: int) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    directory = []
    offset = 0
    chunks = []
    for name, arr in _entries(model).items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    registries = {
        site: [{"task": g.task, "size": g.size, "frozen": g.frozen} for g in reg.groups]
        for site, reg in model.registries.items()
    }
    heads = {str(t): ("shared" if model.shares_base_head(t) else "own") for t in sorted(model.heads)}
    trainable = sorted(model.trainable())
    opt = getattr(model, "optimizer", None)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config.config_hash,
        "config": config.to_dict(),
        "task": task,
        "payload": PAYLOAD,
        "payload_bytes": offset,
        "tensors": directory,
        "registries": registries,
        "heads": heads,
        "trainable": trainable,
        "optimizer": None if opt is None else {"step": opt.t, "params": sorted(opt.params)},
    }
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupted manifest: {exc}") from None
    if not isinstance(manifest, dict) or "format_version" not in manifest:
        raise CheckpointError("corrupted manifest: missing format_version")
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(
            f"checkpoint format_version {manifest['format_version']!r}, this build reads {FORMAT_VERSION}"
        )
    for key in ("config", "task", "tensors", "registries", "heads", "trainable"):
        if key not in manifest:
            raise CheckpointError(f"corrupted manifest: missing {key}")
    return manifest


def _read_tensors(path: Path, manifest: dict) -> dict[str, np.ndarray]:
    payload = (path / manifest.get("payload", PAYLOAD)).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        shape = tuple(e["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if e.get("dtype") != "<f4":
            raise CheckpointError(f"{e['name']}: unsupported dtype {e.get('dtype')!r}")
        if e["nbytes"] != nbytes:
            raise CheckpointError(f"{e['name']}: shape {list(shape)} needs {nbytes} bytes, manifest says {e['nbytes']}")
        end = e["offset"] + nbytes
        if end > len(payload):
            raise CheckpointError(f"truncated payload: {e['name']} ends at byte {end} of {len(payload)}")
        arr = np.frombuffer(payload, dtype=_DTYPE, count=nbytes // _DTYPE.itemsize, offset=e["offset"])
        out[e["name"]] = arr.reshape(shape).astype(np.float64)
    return out


def _assign(t: Tensor, arr: np.ndarray, name: str) -> None:
    if t.data.shape != arr.shape:
        raise CheckpointError(f"shape mismatch for {name}: model {t.data.shape}, checkpoint {arr.shape}")
    t.data = np.ascontiguousarray(arr)


def load_checkpoint(path) -> tuple[Model, RunConfig, dict]:
    """Rebuild the model (with optimizer state if saved). Returns (model, config, manifest)."""
    path = Path(path)
    manifest = read_manifest(path)
    config = config_from_dict(manifest["config"])
    arrays = _read_tensors(path, manifest)
    model = Model(config.backbone, config.moe, np.random.default_rng(0))
    try:
        for name, t in model.params.items():
            _assign(t, arrays[name], name)
        for site, groups in manifest["registries"].items():
            reg = model.registries[site]
            reg.groups = []
            for g in groups:
                pre = f"{site}.experts.t{g['task']}"
                tensors = {k: arrays[f"{pre}.{k}"] for k in ("down", "up", "router")}
                if tensors["router"].shape[0] != g["size"]:
                    raise CheckpointError(f"shape mismatch for {pre}: {g['size']} experts listed")
                grp = ExpertGroup(
                    g["task"], *(Tensor(tensors[k], name=f"{site}.t{g['task']}.{k}") for k in ("down", "up", "router"))
                )
                if g["frozen"]:
                    grp.freeze()
                reg.groups.append(grp)
        model.heads = {}
        for key, kind in manifest["heads"].items():
            t = int(key)
            if kind == "shared":
                model.heads[t] = model.heads[0]
            else:
                w, b = arrays[f"head{t}.weight"], arrays[f"head{t}.bias"]
                c, d = config.backbone.n_classes, config.backbone.d_model
                if w.shape != (c, d) or b.shape != (c,):
                    raise CheckpointError(f"shape mismatch for head{t}: {w.shape}, {b.shape}")
                model.heads[t] = (Tensor(w, name=f"head{t}.weight"), Tensor(b, name=f"head{t}.bias"))
    except KeyError as exc:
        raise CheckpointError(f"tensor {exc} missing from checkpoint") from None
    named = model.named_tensors()
    extra = sorted(k for k in arrays.keys() - named.keys() if not k.startswith("optim."))
    if extra:
        raise CheckpointError(f"checkpoint holds tensors the model does not know: {extra[:3]}")
    for name, t in named.items():
        t.requires_grad = name in manifest["trainable"]
    opt_meta = manifest.get("optimizer")
    if opt_meta:
        opt = AdamW({n: named[n] for n in opt_meta["params"]}, betas=config.train.betas, weight_decay=config.train.weight_decay)
        for n in opt_meta["params"]:
            opt.m[n] = arrays[f"optim.m.{n}"].copy()
            opt.v[n] = arrays[f"optim.v.{n}"].copy()
        opt.t = int(opt_meta["step"])
        model.optimizer = opt
    return model, config, manifest


__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "VersionMismatch",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
]
