"""Run records and the on-disk run directory (spec.json, metrics.csv/.jsonl, summary.json)."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from ..config import ExperimentSpec
from ..objectives import MetricsRecord

BASE_COLUMNS = ["seed", "arm", "step", "train_loss", "val_loss", "val_ppl", "lr", "topk_mass", "entropy_ratio", "gate_f1"]


@dataclass
class Row:
    seed: int
    arm: str
    record: MetricsRecord


def stat(values: list[float]) -> dict:
    """Mean and sample standard deviation (0.0 for a single value)."""
    vals = [float(v) for v in values]
    clean = [v for v in vals if not math.isnan(v)]
    if not clean:
        return {"mean": math.nan, "std": math.nan, "n": 0, "values": vals}
    std = statistics.stdev(clean) if len(clean) > 1 else 0.0
    return {"mean": statistics.fmean(clean), "std": std, "n": len(clean), "values": vals}


def final_rows(rows: list[Row]) -> dict[str, dict[int, MetricsRecord]]:
    """Last record per (arm, seed)."""
    out: dict[str, dict[int, MetricsRecord]] = {}
    for r in rows:
        cur = out.setdefault(r.arm, {}).get(r.seed)
        if cur is None or r.record.step >= cur.step:
            out[r.arm][r.seed] = r.record
    return out


def summarize(rows: list[Row]) -> dict:
    """Per-arm final ``val_ppl`` and ``gate_f1`` statistics across seeds (sorted by seed)."""
    out = {}
    for arm, by_seed in sorted(final_rows(rows).items()):
        seeds = sorted(by_seed)
        out[arm] = {
            "seeds": seeds,
            "val_ppl": stat([by_seed[s].val_ppl for s in seeds]),
            "gate_f1": stat([by_seed[s].gate_f1 for s in seeds]),
        }
    return out


@dataclass
class RunRecord:
    spec: ExperimentSpec
    rows: list[Row] = field(default_factory=list)
    derived: dict = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    failed: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return summarize(self.rows)

    def values(self, arm: str, metric: str = "val_ppl") -> list[float]:
        return self.summary()[arm][metric]["values"]

    def mean(self, arm: str, metric: str = "val_ppl") -> float:
        return self.summary()[arm][metric]["mean"]

    def std(self, arm: str, metric: str = "val_ppl") -> float:
        return self.summary()[arm][metric]["std"]

    def series(self, arm: str, seed: int) -> list[MetricsRecord]:
        return [r.record for r in self.rows if r.arm == arm and r.seed == seed]

    @property
    def status(self) -> str:
        return "failed" if self.failed else "ok"


def _fmt(v) -> str:
    return repr(float(v))


def metrics_csv(rows: list[Row]) -> str:
    """Deterministic CSV text; wall-clock time is deliberately left out."""
    n_layers = max((len(r.record.topk_mass) for r in rows), default=0)
    cols = BASE_COLUMNS + [f"topk_mass_l{i}" for i in range(n_layers)] + [f"entropy_ratio_l{i}" for i in range(n_layers)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in sorted(rows, key=lambda r: (r.seed, r.arm, r.record.step)):
        m = r.record
        mass = list(m.topk_mass) + [math.nan] * (n_layers - len(m.topk_mass))
        ent = list(m.entropy_ratio) + [math.nan] * (n_layers - len(m.entropy_ratio))
        mean_mass = sum(m.topk_mass) / len(m.topk_mass) if m.topk_mass else math.nan
        mean_ent = sum(m.entropy_ratio) / len(m.entropy_ratio) if m.entropy_ratio else math.nan
        w.writerow([r.seed, r.arm, m.step, _fmt(m.train_loss), _fmt(m.val_loss), _fmt(m.val_ppl), _fmt(m.lr),
                    _fmt(mean_mass), _fmt(mean_ent), _fmt(m.gate_f1)]
                   + [_fmt(v) for v in mass] + [_fmt(v) for v in ent])
    return buf.getvalue()


def read_metrics_csv(path) -> list[Row]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            mass = [float(rec[c]) for c in rec if c.startswith("topk_mass_l")]
            ent = [float(rec[c]) for c in rec if c.startswith("entropy_ratio_l")]
            rows.append(Row(int(rec["seed"]), rec["arm"], MetricsRecord(
                step=int(rec["step"]), val_ppl=float(rec["val_ppl"]), val_loss=float(rec["val_loss"]),
                train_loss=float(rec["train_loss"]), lr=float(rec["lr"]),
                topk_mass=[v for v in mass if not math.isnan(v)],
                entropy_ratio=[v for v in ent if not math.isnan(v)],
                gate_f1=float(rec["gate_f1"]),
            )))
    return rows


def _json_safe(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_run_dir(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(record.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "metrics.csv").write_text(metrics_csv(record.rows))
    with open(out / "metrics.jsonl", "w") as fh:
        for r in sorted(record.rows, key=lambda r: (r.seed, r.arm, r.record.step)):
            fh.write(json.dumps(_json_safe({"seed": r.seed, "arm": r.arm, **r.record.to_dict()}), sort_keys=True) + "\n")
    summary = {
        "protocol": record.spec.protocol.name,
        "status": record.status,
        "failed": record.failed,
        "arms": record.summary(),
        "derived": record.derived,
        "checkpoints": record.checkpoints,
    }
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return out
