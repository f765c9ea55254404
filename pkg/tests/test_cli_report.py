import csv
import json
import random

import numpy as np
import pytest

from absorbkit.cli import main
from absorbkit.config import ExperimentSpec
from absorbkit.experiments import runner
from absorbkit.experiments.records import Row, RunRecord, write_run_dir
from absorbkit.objectives import MetricsRecord
from absorbkit.report import AggregationError, emit_report
from absorbkit.tensor import Tensor

from conftest import SAMPLE_TEXT

N = 16


def config_doc(name="E2_hard", steps=3, **protocol):
    return {
        "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 256, "seq_len": N, "d_gate": 4},
        "data": {"path": str(SAMPLE_TEXT)},
        "train": {"batch_size": 4, "lr": 1e-2, "eval_interval": 5, "eval_batches": 2},
        "protocol": {"name": name, "k": 4, "seeds": [0], "steps": steps, **protocol},
    }


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "e1.json", config_doc("E1_soft", steps=4))
    assert main(["train", "--config", cfg, "--out", str(root / "run")]) == 0
    return root / "run"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# exit codes


def test_train_writes_a_run_directory(trained):
    for name in ("spec.json", "metrics.csv", "metrics.jsonl", "summary.json"):
        assert (trained / name).exists()
    assert json.loads((trained / "summary.json").read_text())["status"] == "ok"


def test_unknown_config_key_exits_1(tmp_path, capsys):
    doc = config_doc()
    doc["train"]["learning_rate"] = 0.1
    assert main(["train", "--config", write_config(tmp_path / "c.json", doc)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_wrong_subcommand_for_protocol_exits_1(tmp_path):
    assert main(["sweep", "--config", write_config(tmp_path / "c.json", config_doc())]) == 1


def test_divergence_exits_2(tmp_path, monkeypatch):
    monkeypatch.setattr(runner, "_lm_loss", lambda *a: Tensor(np.nan))
    cfg = write_config(tmp_path / "c.json", config_doc())
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["status"] == "failed"


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", config_doc(steps=1))
    assert main(["train", "--config", cfg, "--seed", "3", "--seed", "1", "--out", str(tmp_path / "run")]) == 0
    assert json.loads((tmp_path / "run" / "spec.json").read_text())["protocol"]["seeds"] == [3, 1]
    assert {r["seed"] for r in read_csv(tmp_path / "run" / "metrics.csv")} == {"1", "3"}


# --------------------------------------------------------------------------
# eval and analyze


def test_eval_is_deterministic(trained, tmp_path):
    ck = str(trained / "checkpoints" / "learned_s0")
    for out in ("a", "b"):
        assert main(["eval", "--ckpt", ck, "--mode", "stochastic_random", "--k", "4", "--seed", "2",
                     "--eval-batches", "2", "--batch-size", "4", "--out", str(tmp_path / out)]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_eval_hard_topk_covering_rows_matches_dense(trained, tmp_path):
    ck = str(trained / "checkpoints" / "learned_s0")
    got = {}
    for mode, extra in (("dense", []), ("hard_topk", ["--k", str(N)])):
        assert main(["eval", "--ckpt", ck, "--mode", mode, *extra, "--eval-batches", "2", "--batch-size", "4",
                     "--out", str(tmp_path / mode)]) == 0
        got[mode] = json.loads((tmp_path / mode / "summary.json").read_text())["val_ppl"]
    assert got["dense"] == got["hard_topk"]


def test_eval_gate_mode_without_gates_exits_1(trained, tmp_path):
    ck = str(trained / "checkpoints" / "dense_s0")
    assert main(["eval", "--ckpt", ck, "--mode", "hard_topk", "--k", "2", "--out", str(tmp_path)]) == 1


def test_eval_missing_checkpoint_exits_1(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none")]) == 1


def test_analyze_writes_concentration_table(trained, tmp_path):
    ck = str(trained / "checkpoints" / "dense_s0")
    assert main(["analyze", "--ckpt", ck, "--k", "2", str(N), "--batch-size", "4", "--eval-batches", "1",
                 "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "concentration.csv")
    full = [r for r in rows if r["k"] == str(N)]
    assert len(rows) == 6 and all(abs(float(r["topk_mass"]) - 1.0) < 1e-12 for r in full)


# --------------------------------------------------------------------------
# report aggregation


def fake_run(out, seeds, values, arms=("learned", "random", "dense")):
    spec = ExperimentSpec.from_dict(config_doc("E1_soft", seeds=list(seeds)))
    rec = RunRecord(spec)
    for s, v in zip(seeds, values):
        for i, arm in enumerate(arms):
            rec.rows.append(Row(s, arm, MetricsRecord(step=3, val_ppl=v + i, val_loss=float(np.log(v + i)))))
    return write_run_dir(rec, out)


def test_single_seed_std_is_zero(tmp_path):
    emit_report([fake_run(tmp_path / "r", [0], [5.0])], tmp_path / "rep")
    row = read_csv(tmp_path / "rep" / "table1_soft.csv")[0]
    assert row == {"arm": "learned", "seeds": "1", "ppl_mean": "5.0", "ppl_std": "0.0"}


def test_runs_split_by_seed_merge_to_sample_statistics(tmp_path):
    dirs = [fake_run(tmp_path / f"r{s}", [s], [float(s)]) for s in (1, 2, 3)]
    emit_report(dirs, tmp_path / "rep")
    learned = read_csv(tmp_path / "rep" / "table1_soft.csv")[0]
    assert float(learned["ppl_mean"]) == 2.0 and float(learned["ppl_std"]) == 1.0


def test_report_is_independent_of_input_order(tmp_path):
    dirs = [fake_run(tmp_path / f"r{s}", [s], [1.0 + s / 7]) for s in range(4)]
    emit_report(dirs, tmp_path / "a")
    random.Random(0).shuffle(dirs)
    emit_report(dirs[::-1], tmp_path / "b")
    assert (tmp_path / "a" / "table1_soft.csv").read_bytes() == (tmp_path / "b" / "table1_soft.csv").read_bytes()


def test_inconsistent_specs_are_rejected(tmp_path):
    a = fake_run(tmp_path / "a", [0], [1.0])
    b = fake_run(tmp_path / "b", [1], [1.0])
    spec = json.loads((b / "spec.json").read_text())
    spec["train"]["lr"] = 0.5
    (b / "spec.json").write_text(json.dumps(spec))
    with pytest.raises(AggregationError):
        emit_report([a, b], tmp_path / "rep")
    c = fake_run(tmp_path / "c", [0], [2.0])
    with pytest.raises(AggregationError):
        emit_report([a, c], tmp_path / "rep")


def test_report_cli_exit_codes(tmp_path, trained):
    assert main(["report", str(trained), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "table1_soft.csv").exists()
    assert main(["report", str(tmp_path / "missing"), "--out", str(tmp_path / "rep")]) == 1


@pytest.mark.parametrize("path", sorted((SAMPLE_TEXT.parents[2] / "configs").glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    from absorbkit.config import load_config

    assert load_config(path).protocol.name
