"""Command-line entry point: ``absorbkit {train,distill,eval,analyze,sweep,report}``.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime failure
(divergence, invariant violation, I/O).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ExperimentSpec, load_config, runs_root
from .data import DataError, build_desk_corpus, eval_batches, load_corpus
from .gating import MaskKind, MaskMode
from .tensor import ConfigError

log = logging.getLogger("absorbkit")

COMMAND_PROTOCOLS = {
    "train": ("E1_soft", "E2_hard", "E4_stochastic", "GATE_ONLY"),
    "distill": ("POSTHOC_DISTILL", "E3_contrast"),
    "sweep": ("ABSORPTION_GRADIENT",),
}


def _spec_with_seeds(path, seeds) -> ExperimentSpec:
    spec = load_config(path)
    if seeds:
        doc = spec.to_dict()
        doc["protocol"]["seeds"] = list(seeds)
        spec = ExperimentSpec.from_dict(doc)
    return spec


def _default_out(spec: ExperimentSpec) -> Path:
    digest = hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:10]
    return runs_root() / f"{spec.protocol.name}_{digest}"


def cmd_protocol(args) -> int:
    from .experiments import run_protocol, write_run_dir

    spec = _spec_with_seeds(args.config, args.seed)
    allowed = COMMAND_PROTOCOLS[args.command]
    if spec.protocol.name not in allowed:
        raise ConfigError(f"'{args.command}' runs {', '.join(allowed)}; the config names {spec.protocol.name}")
    out = Path(args.out) if args.out else _default_out(spec)
    out.mkdir(parents=True, exist_ok=True)
    # echo the effective configuration before any compute
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    rec = run_protocol(spec, out_dir=out)
    write_run_dir(rec, out)
    print(out)
    if rec.failed:
        for f in rec.failed:
            print(f"error: arm {f['arm']} seed {f['seed']} diverged at step {f['step']}", file=sys.stderr)
        return 2
    print(json.dumps(rec.derived, indent=2, sort_keys=True, default=str))
    return 0


def _eval_corpus(args, ckpt):
    data = ckpt.meta.get("data", {}) if args.data is None else {"path": args.data}
    path = data.get("path") or str(build_desk_corpus(runs_root() / "data" / "desk_corpus.txt"))
    corpus = load_corpus(path, data.get("tokenizer", "byte"), data.get("val_fraction", 0.1))
    if corpus.vocab_size != ckpt.params.config.vocab_size:
        raise ConfigError(f"corpus has {corpus.vocab_size} symbols, checkpoint expects {ckpt.params.config.vocab_size}")
    return corpus


def cmd_eval(args) -> int:
    import numpy as np

    from .model import forward
    from .tensor import cross_entropy, no_grad

    ckpt = load_checkpoint(args.ckpt)
    mode = MaskMode.parse(args.mode, args.k, args.mask_seed)
    if mode.needs_gate and ckpt.gates is None:
        raise ConfigError(f"mode {args.mode} needs gate weights and {args.ckpt} has none")
    corpus = _eval_corpus(args, ckpt)
    cfg = ckpt.params.config
    batches = eval_batches(corpus.val, cfg.seq_len, args.batch_size, args.eval_batches)
    rng = np.random.default_rng([args.seed, 3])
    total, count = 0.0, 0
    with no_grad():
        for tokens, targets in batches:
            logits, _ = forward(ckpt.params, ckpt.gates, mode, tokens, rng=rng)
            total += cross_entropy(logits, targets).item() * targets.size
            count += targets.size
    loss = total / count
    summary = {"checkpoint": str(args.ckpt), "mode": mode.kind.value, "k": mode.k, "mask_seed": mode.seed,
               "seed": args.seed, "tokens": count, "val_loss": loss, "val_ppl": math.exp(loss)}
    out = Path(args.out) if args.out else Path(args.ckpt) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    from .experiments.protocols import analyze_concentration, concentration_csv

    ckpt = load_checkpoint(args.ckpt)
    corpus = _eval_corpus(args, ckpt)
    cfg = ckpt.params.config
    rows = analyze_concentration(ckpt, args.k, eval_batches(corpus.val, cfg.seq_len, args.batch_size, args.eval_batches))
    text = concentration_csv(rows)
    out = Path(args.out) if args.out else Path(args.ckpt) / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    (out / "concentration.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    from .report import emit_report

    out = Path(args.out) if args.out else runs_root() / "report"
    for p in emit_report(args.run_dirs, out):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="absorbkit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_ in (("train", "joint training protocols (E1, E2, E4, gate-only)"),
                        ("distill", "post-hoc distillation and the distillation contrast"),
                        ("sweep", "absorption-gradient sweep over unfrozen layers")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides protocol.seeds")
        p.add_argument("--out", help="run directory (default: under $ABSORBKIT_RUNS_DIR)")
        p.set_defaults(func=cmd_protocol)

    modes = [m.value for m in MaskKind]
    for name, func in (("eval", cmd_eval), ("analyze", cmd_analyze)):
        p = sub.add_parser(name, help="score a checkpoint" if name == "eval" else "attention concentration per layer")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", help="corpus path (default: the checkpoint's own data settings)")
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--eval-batches", type=int, default=16)
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--mode", choices=modes, default="dense")
            p.add_argument("--k", type=int)
            p.add_argument("--mask-seed", type=int, default=0, help="draw index for fixed_random masks")
            p.add_argument("--seed", type=int, default=0, help="seed for stochastic masks")
        else:
            p.add_argument("--k", type=int, nargs="+", default=[16])
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate run directories into table CSVs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    from .experiments.runner import DivergenceError, InvariantViolation
    from .report import AggregationError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, AggregationError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, InvariantViolation, OSError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
