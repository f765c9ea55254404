"""Checkpoint directories: ``manifest.json`` plus a raw little-endian ``tensors.bin``.

Manifest entries are ``{name, shape, dtype: "f64", byte_offset, byte_len}`` in
file order. Model tensors come first, then gate tensors (``gate.*``) and any
optimizer moments (``opt.m.*`` / ``opt.v.*``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gating import GateParams
from .model import ModelConfig, ModelParams
from .tensor import Tensor

FORMAT = "absorbkit-checkpoint/1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    gates: GateParams | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(
    directory,
    params: ModelParams,
    gates: GateParams | None = None,
    rng_state: dict | None = None,
    meta: dict | None = None,
    optimizer: dict[str, np.ndarray] | None = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in params.named_tensors()]
    if gates is not None:
        named += [(k, t.data) for k, t in gates.named_tensors()]
    for k in sorted(optimizer or {}):
        named.append((k, optimizer[k]))

    entries = []
    offset = 0
    with open(directory / "tensors.bin", "wb") as fh:
        for name, arr in named:
            buf = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
            fh.write(buf)
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64",
                "byte_offset": offset,
                "byte_len": len(buf),
            })
            offset += len(buf)

    manifest = {
        "format": FORMAT,
        "config": params.config.to_dict(),
        "trainable": params.trainable_names(),
        "gate": None if gates is None else {
            "n_layers": gates.n_layers,
            "n_heads": gates.n_heads,
            "d_model": gates.d_model,
            "d_gate": gates.d_gate,
            "frozen": gates.frozen,
        },
        "rng_state": rng_state,
        "meta": meta or {},
        "entries": entries,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no manifest.json in {directory}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = (directory / "tensors.bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["entries"]:
        if e["dtype"] != "f64":
            raise CheckpointError(f"entry {e['name']} has dtype {e['dtype']}")
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        if e["byte_len"] != count * 8 or e["byte_offset"] + e["byte_len"] > len(blob):
            raise CheckpointError(f"entry {e['name']} is inconsistent with its shape or the blob size")
        arrays[e["name"]] = np.frombuffer(blob, dtype=_LE_F64, count=count, offset=e["byte_offset"]).reshape(shape).astype(np.float64)

    cfg = ModelConfig(**manifest["config"])
    ref = ModelParams.init(cfg, np.random.default_rng(0))
    tensors = {}
    for name in ref.tensors:
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if arrays[name].shape != ref.tensors[name].shape:
            raise CheckpointError(f"tensor {name} has shape {arrays[name].shape}, expected {ref.tensors[name].shape}")
        tensors[name] = Tensor(arrays[name], name=name)
    params = ModelParams(cfg, tensors)
    params.set_trainable_names(manifest.get("trainable", list(tensors)))

    gates = None
    gmeta = manifest.get("gate")
    if gmeta is not None:
        gates = GateParams(gmeta["n_layers"], gmeta["n_heads"], gmeta["d_model"], gmeta["d_gate"])
        gates.wq = [Tensor(arrays[f"gate.{i}.wq"], name=f"gate.{i}.wq") for i in range(gates.n_layers)]
        gates.wk = [Tensor(arrays[f"gate.{i}.wk"], name=f"gate.{i}.wk") for i in range(gates.n_layers)]
        gates.set_frozen(gmeta["frozen"])
    optimizer = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return Checkpoint(params, gates, manifest.get("rng_state"), manifest.get("meta", {}), optimizer)
