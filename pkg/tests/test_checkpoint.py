import json

import numpy as np
import pytest

from absorbkit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from absorbkit.gating import GateParams
from absorbkit.model import ModelConfig, ModelParams

CFG = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11, seq_len=6, d_gate=3)


def _build():
    rng = np.random.default_rng(0)
    params = ModelParams.init(CFG, rng, std=0.3)
    gates = GateParams.init(2, 2, 8, 3, rng)
    return params, gates


def test_round_trip_is_bitwise(tmp_path):
    params, gates = _build()
    gates.set_frozen(True)
    opt = {"opt.m.layers.0.attn.wq": np.arange(64.0).reshape(8, 8)}
    save_checkpoint(tmp_path / "c", params, gates, {"seed": 3}, {"step": 7}, opt)
    ck = load_checkpoint(tmp_path / "c")
    for (k, a), (k2, b) in zip(params.named_tensors(), ck.params.named_tensors()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()
    for (_, a), (_, b) in zip(gates.named_tensors(), ck.gates.named_tensors()):
        assert a.data.tobytes() == b.data.tobytes()
    assert ck.gates.frozen and ck.rng_state == {"seed": 3} and ck.meta == {"step": 7}
    assert np.array_equal(ck.optimizer["opt.m.layers.0.attn.wq"], opt["opt.m.layers.0.attn.wq"])


def test_trainable_flags_survive(tmp_path):
    params, _ = _build()
    keep = params.trainable_names()[:3]
    params.set_trainable_names(keep)
    save_checkpoint(tmp_path / "c", params)
    ck = load_checkpoint(tmp_path / "c")
    assert ck.params.trainable_names() == keep and ck.gates is None


def test_manifest_offsets_are_contiguous(tmp_path):
    params, gates = _build()
    save_checkpoint(tmp_path / "c", params, gates)
    entries = json.loads((tmp_path / "c" / "manifest.json").read_text())["entries"]
    offset = 0
    for e in entries:
        assert e["byte_offset"] == offset and e["dtype"] == "f64"
        offset += e["byte_len"]
    assert offset == (tmp_path / "c" / "tensors.bin").stat().st_size


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_truncated_blob_is_rejected(tmp_path):
    params, _ = _build()
    d = save_checkpoint(tmp_path / "c", params)
    blob = (d / "tensors.bin").read_bytes()
    (d / "tensors.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(d)


def test_wrong_format_is_rejected(tmp_path):
    params, _ = _build()
    d = save_checkpoint(tmp_path / "c", params)
    m = json.loads((d / "manifest.json").read_text())
    m["format"] = "other/9"
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
