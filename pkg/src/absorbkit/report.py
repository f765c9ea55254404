"""Aggregate run directories into fixed-layout CSV tables.

Each protocol maps to one table file. Values are recomputed from the merged
``metrics.csv`` rows of every run directory of that protocol, so the output
depends only on the set of runs, never on the order they are given in.

Column layouts (fixed):

=========================  ====================================================
``table1_soft.csv``        arm, seeds, ppl_mean, ppl_std
``table_e2_hard.csv``      arm, seeds, ppl_mean, ppl_std
``table2_contrast.csv``    checkpoint, seeds, gate_f1_mean, gate_f1_std, deploy_ppl_mean, deploy_ppl_std, dense_ppl
``table3_stochastic.csv``  condition, seeds, ppl_mean, ppl_std
``table4_gate_only.csv``   arm, seeds, ppl_mean, ppl_std
``table5_posthoc.csv``     k, method, seeds, ppl_mean, ppl_std, gate_f1, efficiency
``table9_absorption.csv``  n_unfrozen, learned_mean, learned_std, random_mean, random_std, nogate_mean, gap
=========================  ====================================================
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from pathlib import Path

from .experiments.records import Row, read_metrics_csv, summarize
from .objectives import efficiency

TABLE_FILES = {
    "E1_soft": "table1_soft.csv",
    "E2_hard": "table_e2_hard.csv",
    "E3_contrast": "table2_contrast.csv",
    "E4_stochastic": "table3_stochastic.csv",
    "GATE_ONLY": "table4_gate_only.csv",
    "POSTHOC_DISTILL": "table5_posthoc.csv",
    "ABSORPTION_GRADIENT": "table9_absorption.csv",
}


class AggregationError(ValueError):
    pass


def _f(v) -> str:
    return repr(float(v))


def _spec_key(spec: dict) -> str:
    """Canonical spec text with the seed list removed (seeds may be split across runs)."""
    doc = json.loads(json.dumps(spec))
    doc["protocol"].pop("seeds", None)
    return json.dumps(doc, sort_keys=True)


def load_runs(run_dirs) -> dict[str, tuple[dict, list[Row]]]:
    """Merge run directories by protocol; specs must agree apart from their seeds."""
    groups: dict[str, tuple[dict, list[Row]]] = {}
    keys: dict[str, str] = {}
    for d in sorted(str(p) for p in run_dirs):
        d = Path(d)
        if not (d / "summary.json").exists():
            raise AggregationError(f"{d} has no summary.json")
        spec = json.loads((d / "spec.json").read_text())
        name = spec["protocol"]["name"]
        key = _spec_key(spec)
        rows = read_metrics_csv(d / "metrics.csv")
        if name in groups:
            if keys[name] != key:
                raise AggregationError(f"run {d} has a different {name} configuration from the others")
            seen = {(r.seed, r.arm, r.record.step) for r in groups[name][1]}
            clash = [r for r in rows if (r.seed, r.arm, r.record.step) in seen]
            if clash:
                raise AggregationError(f"run {d} repeats seed {clash[0].seed} of arm {clash[0].arm}")
            groups[name][1].extend(rows)
        else:
            groups[name] = (spec, list(rows))
            keys[name] = key
    return groups


def _table(header: list[str], body: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in body:
        w.writerow([_f(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _arm_rows(summ: dict, arms: list[str]) -> list[list]:
    out = []
    for a in arms:
        if a in summ:
            s = summ[a]["val_ppl"]
            out.append([a, s["n"], s["mean"], s["std"]])
    return out


def _n_key(arm: str) -> int:
    m = re.search(r"@n=(\d+)$", arm)
    return int(m.group(1)) if m else -1


def _k_of(arm: str) -> int:
    return int(re.search(r"k=(\d+)", arm).group(1))


def render(name: str, spec: dict, rows: list[Row]) -> str:
    summ = summarize(rows)
    if name == "E1_soft":
        return _table(["arm", "seeds", "ppl_mean", "ppl_std"], _arm_rows(summ, ["learned", "random", "dense"]))
    if name == "E2_hard":
        return _table(["arm", "seeds", "ppl_mean", "ppl_std"], _arm_rows(summ, ["learned", "random"]))
    if name == "E3_contrast":
        body = []
        for ck in ("dense", "soft"):
            if ck in summ:
                f1, ppl = summ[ck]["gate_f1"], summ[ck]["val_ppl"]
                dense = summ.get(f"{ck}/dense", {}).get("val_ppl", {}).get("mean", math.nan)
                body.append([ck, ppl["n"], f1["mean"], f1["std"], ppl["mean"], ppl["std"], dense])
        return _table(["checkpoint", "seeds", "gate_f1_mean", "gate_f1_std", "deploy_ppl_mean", "deploy_ppl_std", "dense_ppl"], body)
    if name == "E4_stochastic":
        body = _arm_rows(summ, ["dense", "stochastic"])
        body = [["baseline_dense" if r[0] == "dense" else "deployed_dense"] + r[1:] for r in body]
        body += [[a.split("/", 1)[1]] + _arm_rows(summ, [a])[0][1:] for a in sorted(summ) if a.startswith("stochastic/")]
        return _table(["condition", "seeds", "ppl_mean", "ppl_std"], body)
    if name == "GATE_ONLY":
        arms = ["learned", "random"] + sorted(a for a in summ if a.startswith("oracle@")) + ["dense"]
        return _table(["arm", "seeds", "ppl_mean", "ppl_std"], _arm_rows(summ, arms))
    if name == "POSTHOC_DISTILL":
        loss = spec["protocol"].get("distill_loss", "kl")
        ks = sorted({_k_of(a) for a in summ if a.startswith("oracle@")})
        dense = summ["dense"]["val_ppl"]
        body = []
        for k in ks:
            gate_arm = f"kl/deploy@k={k}" if loss == "kl" else f"bce@k={k}"
            f1_arm = f"kl/f1@k={k}" if loss == "kl" else f"bce@k={k}/f1@k={k}"
            oracle = summ[f"oracle@k={k}"]["val_ppl"]
            rnd = summ[f"fixed_random@k={k}"]["val_ppl"]
            gate = summ[gate_arm]["val_ppl"]
            eff = efficiency(gate["mean"], rnd["mean"], oracle["mean"])
            body.append([k, "dense", dense["n"], dense["mean"], dense["std"], math.nan, math.nan])
            body.append([k, "oracle", oracle["n"], oracle["mean"], oracle["std"], 1.0, 1.0])
            body.append([k, loss, gate["n"], gate["mean"], gate["std"], summ[f1_arm]["gate_f1"]["mean"], eff.raw])
            body.append([k, "fixed_random", rnd["n"], rnd["mean"], rnd["std"], math.nan, 0.0])
        return _table(["k", "method", "seeds", "ppl_mean", "ppl_std", "gate_f1", "efficiency"], body)
    if name == "ABSORPTION_GRADIENT":
        ns = sorted({_n_key(a) for a in summ if _n_key(a) >= 0})
        body = []
        for n in ns:
            lr_, rd, ng = (summ[f"{p}@n={n}"]["val_ppl"] for p in ("learned", "random", "nogate"))
            body.append([n, lr_["mean"], lr_["std"], rd["mean"], rd["std"], ng["mean"], rd["mean"] - lr_["mean"]])
        return _table(["n_unfrozen", "learned_mean", "learned_std", "random_mean", "random_std", "nogate_mean", "gap"], body)
    raise AggregationError(f"no table layout for protocol {name!r}")


def emit_report(run_dirs, out_dir) -> list[Path]:
    """Write one CSV per protocol found among ``run_dirs``; returns the written paths."""
    groups = load_runs(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(groups):
        spec, rows = groups[name]
        path = out / TABLE_FILES[name]
        path.write_text(render(name, spec, rows))
        written.append(path)
    return written
