"""Checkpoint directories: config, raw parameter blobs, optimizer state, vocabularies.

Layout::

    config.json          model config (+ render config for pixel models)
    manifest.json        tensor names, shapes, dtypes, files and sha256
    params/<name>.bin    raw little-endian arrays, C order
    optimizer/           Adam moments and state.json (when saved)
    state.json           step, validation history, vocabulary file hashes
    <tokenizer>.bpe      tokenizers referenced from state.json

Everything is written with sorted keys and no timestamps, so two runs with
the same seed produce byte-identical directories.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import ModelConfig, TranslationModel
from .subword import Tokenizer
from .textimage import RenderConfig

FORMAT = 1


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_array(arr, path):
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    path.write_bytes(le.tobytes())
    return {"shape": list(arr.shape), "dtype": le.dtype.str, "sha256": hashlib.sha256(le.tobytes()).hexdigest()}


def _read_array(path, meta, verify=True):
    raw = path.read_bytes()
    if verify and hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    dtype = np.dtype(meta["dtype"])
    return np.frombuffer(raw, dtype=dtype).reshape(meta["shape"]).astype(dtype.newbyteorder("="))


@dataclass
class Checkpoint:
    model: TranslationModel
    optimizer: T.AdamState | None = None
    step: int = 0
    history: list = field(default_factory=list)
    tokenizers: dict = field(default_factory=dict)
    render: RenderConfig | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self):
        return self.model.cfg


def save_checkpoint(path, ckpt):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "params").mkdir(parents=True)

    model = ckpt.model
    config = {"format": FORMAT, "model": model.cfg.to_dict()}
    if ckpt.render is not None:
        config["render"] = asdict(ckpt.render)
    dump_json(config, tmp / "config.json")

    entries = []
    for kind, items in (("param", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, value in items:
            arr = value.data if isinstance(value, T.Tensor) else value
            meta = _write_array(arr, tmp / "params" / f"{name}.bin")
            entries.append({"name": name, "kind": kind, "file": f"params/{name}.bin", **meta})
    dump_json({"format": FORMAT, "tensors": entries}, tmp / "manifest.json")

    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        (tmp / "optimizer").mkdir()
        names = {id(p): n for n, p in model.named_parameters()}
        moments = []
        for p, m, v in zip(opt.params, opt.m, opt.v):
            name = names[id(p)]
            moments.append({
                "name": name,
                "m": {"file": f"optimizer/m.{name}.bin", **_write_array(m, tmp / "optimizer" / f"m.{name}.bin")},
                "v": {"file": f"optimizer/v.{name}.bin", **_write_array(v, tmp / "optimizer" / f"v.{name}.bin")},
            })
        dump_json({
            "t": opt.t, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
            "schedule": opt.schedule.to_dict(), "moments": moments,
        }, tmp / "optimizer" / "state.json")

    vocab_hashes = {}
    for role, tok in sorted(ckpt.tokenizers.items()):
        fname = f"{role}.bpe"
        tok.save(tmp / fname)
        vocab_hashes[fname] = sha256_file(tmp / fname)
    dump_json({
        "step": ckpt.step, "history": list(ckpt.history),
        "vocab_files": vocab_hashes, "extra": ckpt.extra,
    }, tmp / "state.json")

    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def load_checkpoint(path, with_optimizer=True, verify=True):
    path = Path(path)
    if not (path / "config.json").exists():
        raise FileNotFoundError(f"{path}: not a checkpoint directory (config.json missing)")
    config = json.loads((path / "config.json").read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(config["model"])
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    dtypes = {np.dtype(e["dtype"]).newbyteorder("=") for e in manifest["tensors"] if e["kind"] == "param"}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.dtype(np.float32)
    with T.precision(dtype):
        model = TranslationModel(cfg, init="empty")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for e in manifest["tensors"]:
        arr = _read_array(path / e["file"], e, verify)
        target = params.get(e["name"]) if e["kind"] == "param" else buffers.get(e["name"])
        if target is None:
            raise ValueError(f"{path}: unexpected tensor {e['name']}")
        dst = target.data if isinstance(target, T.Tensor) else target
        if dst.shape != arr.shape:
            raise ValueError(f"{path}: {e['name']} has shape {arr.shape}, model expects {dst.shape}")
        dst[...] = arr
        seen.add(e["name"])
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")

    optimizer = None
    if with_optimizer and (path / "optimizer" / "state.json").exists():
        st = json.loads((path / "optimizer" / "state.json").read_text(encoding="utf-8"))
        schedule = T.WarmupSchedule(**st["schedule"])
        optimizer = T.AdamState([], schedule, st["beta1"], st["beta2"], st["eps"])
        for mom in st["moments"]:
            optimizer.add_param(
                params[mom["name"]],
                _read_array(path / mom["m"]["file"], mom["m"], verify).copy(),
                _read_array(path / mom["v"]["file"], mom["v"], verify).copy(),
            )
        optimizer.t = st["t"]

    state = json.loads((path / "state.json").read_text(encoding="utf-8"))
    tokenizers = {}
    for fname, digest in state.get("vocab_files", {}).items():
        if verify and sha256_file(path / fname) != digest:
            raise ValueError(f"{path / fname}: vocabulary file hash mismatch")
        tokenizers[fname[: -len(".bpe")]] = Tokenizer.load(path / fname)
    render = RenderConfig(**config["render"]) if "render" in config else None
    return Checkpoint(model, optimizer, state["step"], state["history"], tokenizers, render, state.get("extra", {}))
