"""The seven scripted experiment protocols plus the concentration analysis.

Every protocol takes an :class:`ExperimentSpec`, trains or evaluates its arms
for each seed (seeds in ascending order, arms in definition order) and returns
a :class:`RunRecord`. Derived quantities in ``RunRecord.derived`` are computed
from the per-arm summary, so they can be recomputed from ``metrics.csv``.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from pathlib import Path

import numpy as np

from ..checkpoint import Checkpoint, load_checkpoint
from ..config import DEFAULT_CORPUS, ExperimentSpec, runs_root
from ..data import Corpus, build_desk_corpus, eval_batches, load_corpus
from ..gating import DENSE, MaskKind, MaskMode
from ..model import forward
from ..objectives import MetricsRecord, efficiency, layer_stats
from ..tensor import ConfigError, no_grad
from .records import Row, RunRecord
from .runner import Arm, ArmResult, Evaluator, InvariantViolation, init_gates, train_arm


@functools.lru_cache(maxsize=4)
def _load(path: str, tokenizer: str, val_fraction: float) -> Corpus:
    return load_corpus(path, tokenizer, val_fraction)


def corpus_for(spec: ExperimentSpec) -> Corpus:
    path = spec.data.path
    if path is None:
        path = str(build_desk_corpus(runs_root() / "data" / DEFAULT_CORPUS))
    corpus = _load(str(path), spec.data.tokenizer, spec.data.val_fraction)
    if corpus.vocab_size != spec.model.vocab_size:
        raise ConfigError(f"model.vocab_size={spec.model.vocab_size} but the corpus has {corpus.vocab_size} symbols")
    return corpus


def source_checkpoint(spec: ExperimentSpec, key: str) -> Checkpoint:
    path = spec.protocol.source_checkpoints.get(key)
    if path is None:
        raise ConfigError(f"protocol {spec.protocol.name} requires source_checkpoints.{key}")
    if not (Path(path) / "manifest.json").exists():
        raise ConfigError(f"source checkpoint {key!r} not found at {path}")
    ckpt = load_checkpoint(path)
    if ckpt.params.config != spec.model:
        raise ConfigError(f"checkpoint {path} was trained with {ckpt.params.config}, config asks for {spec.model}")
    return ckpt


def _arm_dir(out_dir):
    return None if out_dir is None else Path(out_dir)


def _run_arms(spec, arms, record: RunRecord, corpus, evaluator, source=None, out_dir=None, on_result=None):
    for seed in sorted(spec.protocol.seeds):
        for arm in arms:
            res = train_arm(arm, seed, spec, corpus, evaluator, source=source, out_dir=_arm_dir(out_dir))
            _collect(record, res)
            if on_result is not None:
                on_result(arm, res)


def _collect(record: RunRecord, res: ArmResult) -> None:
    for m in res.series:
        record.rows.append(Row(res.seed, res.arm, m))
    if res.status != "ok":
        record.failed.append({"arm": res.arm, "seed": res.seed, "step": res.failed_step})
        return
    step = res.series[-1].step
    for label, ppl in res.final.items():
        if label == next(iter(res.final)):
            continue  # the arm's own eval mode is already the last series point
        record.rows.append(Row(res.seed, f"{res.arm}/{label}", MetricsRecord(step=step, val_ppl=ppl, val_loss=math.log(ppl))))
    if res.checkpoint:
        record.checkpoints[f"{res.arm}/s{res.seed}"] = res.checkpoint


def _eval_row(record, evaluator, params, gates, mode, arm, seed, step=0):
    loss = evaluator.loss(params, gates, mode, seed)
    record.rows.append(Row(seed, arm, MetricsRecord(step=step, val_ppl=math.exp(loss), val_loss=loss)))


def _setup(spec, corpus):
    corpus = corpus_for(spec) if corpus is None else corpus
    return corpus, Evaluator(corpus, spec)


def hard(kind: MaskKind, k: int, seed: int = 0) -> MaskMode:
    return MaskMode(kind, k, seed)


# --------------------------------------------------------------------------
# joint training: soft, hard and stochastic masks


def _initial_source(spec):
    return source_checkpoint(spec, "dense") if spec.protocol.from_checkpoint else None


def run_e1_soft(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Joint training with a learned soft gate vs a frozen random soft gate (and a dense baseline)."""
    corpus, ev = _setup(spec, corpus)
    soft, rand = MaskMode(MaskKind.SOFT_LEARNED), MaskMode(MaskKind.SOFT_RANDOM)
    arms = []
    if spec.protocol.with_dense_baseline:
        arms.append(Arm("dense", DENSE, DENSE))
    arms += [Arm("learned", soft, soft, gate="learned"), Arm("random", rand, rand, gate="frozen")]
    rec = RunRecord(spec)
    _run_arms(spec, arms, rec, corpus, ev, _initial_source(spec), out_dir)
    if not rec.failed:
        learned, random_ = rec.mean("learned"), rec.mean("random")
        d = {"learned": learned, "random": random_, "gap": random_ - learned}
        if spec.protocol.with_dense_baseline:
            dense = rec.mean("dense")
            benefit = random_ - dense
            d.update(dense=dense, benefit=benefit, absorption_ratio=(random_ - learned) / benefit if benefit > 0 else math.nan)
        rec.derived = d
    return rec


def run_e2_hard(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Joint training under hard top-k masks from a learned vs a frozen random gate.

    Both arms share the gate initialisation of a seed. The gate gradient is
    checked to be exactly zero after every backward pass, and the learned
    gate's weights must leave training bitwise unchanged.
    """
    corpus, ev = _setup(spec, corpus)
    mode = hard(MaskKind.HARD_TOPK, spec.k)
    arms = [Arm("learned", mode, mode, gate="learned", assert_zero_gate_grad=True),
            Arm("random", mode, mode, gate="frozen", assert_zero_gate_grad=True)]

    def check(arm, res):
        if res.gates is None or res.status != "ok":
            return
        init = init_gates(spec, res.seed)
        for a, b in zip(init.tensors(), res.gates.tensors()):
            if not np.array_equal(a.data, b.data):
                raise InvariantViolation(f"{arm.name}: gate weights moved under hard top-k training")

    rec = RunRecord(spec)
    _run_arms(spec, arms, rec, corpus, ev, _initial_source(spec), out_dir, on_result=check)
    if not rec.failed:
        rec.derived = {
            "learned": rec.mean("learned"),
            "random": rec.mean("random"),
            "gap": abs(rec.mean("learned") - rec.mean("random")),
            "random_std": rec.std("random"),
        }
    return rec


def run_e4_stochastic(spec: ExperimentSpec, out_dir=None, corpus=None, baseline: RunRecord | None = None) -> RunRecord:
    """Training under a fresh random mask per forward pass, deployed dense and with fixed masks.

    ``baseline`` may supply an equal-budget dense arm from another run (for
    example the dense arm of a soft-gating run with the same training setup).
    """
    corpus, ev = _setup(spec, corpus)
    k = spec.k
    extra = {f"fixed_random@k={k},mask={s}": hard(MaskKind.FIXED_RANDOM, k, s) for s in range(spec.protocol.mask_seeds)}
    arms = [Arm("stochastic", hard(MaskKind.STOCHASTIC_RANDOM, k), DENSE, extra_evals=extra)]
    rec = RunRecord(spec)
    if baseline is not None:
        _check_baseline(spec, baseline)
        rec.rows += [r for r in baseline.rows if r.arm == "dense"]
    elif spec.protocol.with_dense_baseline:
        arms.insert(0, Arm("dense", DENSE, DENSE))
    _run_arms(spec, arms, rec, corpus, ev, _initial_source(spec), out_dir)
    if not rec.failed:
        summ = rec.summary()
        d = {"deployed_dense": rec.mean("stochastic")}
        fixed = [summ[f"stochastic/{lab}"]["val_ppl"]["mean"] for lab in extra]
        d["deployed_fixed_random"] = float(np.mean(fixed))
        if "dense" in summ:
            gap = rec.mean("stochastic") - rec.mean("dense")
            sigma = max(rec.std("stochastic"), rec.std("dense"))
            d.update(baseline=rec.mean("dense"), gap=gap, sigma=sigma, z=gap / sigma if sigma > 0 else math.inf)
        rec.derived = d
    return rec


def _check_baseline(spec: ExperimentSpec, baseline: RunRecord) -> None:
    b = baseline.spec
    same = (b.model == spec.model and b.train == spec.train and b.data == spec.data and b.steps == spec.steps
            and sorted(b.protocol.seeds) == sorted(spec.protocol.seeds))
    if not same:
        raise ConfigError("the supplied dense baseline was not trained with the same budget and setup")
    if not any(r.arm == "dense" for r in baseline.rows):
        raise ConfigError("the supplied baseline run has no dense arm")


# --------------------------------------------------------------------------
# frozen-model protocols


def _reference_rows(rec, ev, params, k, mask_seeds, step=0):
    """Dense, oracle and fixed-random evaluations of a frozen model (seed-independent)."""
    _eval_row(rec, ev, params, None, DENSE, "dense", 0, step)
    _eval_row(rec, ev, params, None, hard(MaskKind.ORACLE, k), f"oracle@k={k}", 0, step)
    for s in range(mask_seeds):
        _eval_row(rec, ev, params, None, hard(MaskKind.FIXED_RANDOM, k, s), f"fixed_random@k={k}", s, step)


def run_e3_contrast(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Distil a fresh gate with BCE on a dense-trained and a soft-gate-trained model, then deploy it hard."""
    corpus, ev = _setup(spec, corpus)
    k = spec.k
    rec = RunRecord(spec)
    derived = {}
    for name in ("dense", "soft"):
        src = source_checkpoint(spec, name)
        arm = Arm(name, DENSE, hard(MaskKind.HARD_TOPK, k), selector="gate_only", gate="learned",
                  objective="bce", distill_k=k, extra_evals={"dense": DENSE})
        _run_arms(spec, [arm], rec, corpus, ev, src, out_dir)
        if not rec.failed:
            derived[name] = {"f1": rec.mean(name, "gate_f1"), "deploy_ppl": rec.mean(name), "dense_ppl": rec.mean(f"{name}/dense")}
    rec.derived = derived
    return rec


def convergence_step(series: list[MetricsRecord], frac: float = 0.99) -> int | None:
    """First eval step at which the improvement over step 0 reaches ``frac`` of the final improvement."""
    if not series:
        return None
    start, end = series[0].val_ppl, series[-1].val_ppl
    total = start - end
    if total <= 0:
        return None
    for m in series:
        if start - m.val_ppl >= frac * total:
            return m.step
    return series[-1].step


def run_gate_only(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Frozen dense model, gate trained by the task loss through soft gating, deployed as hard top-k."""
    corpus, ev = _setup(spec, corpus)
    src = source_checkpoint(spec, "dense")
    k = spec.k
    deploy = hard(MaskKind.HARD_TOPK, k)
    arms = [
        Arm("learned", MaskMode(MaskKind.SOFT_LEARNED), deploy, selector="gate_only", gate="learned"),
        Arm("random", MaskMode(MaskKind.SOFT_RANDOM), deploy, selector="gate_only", gate="frozen"),
    ]
    rec = RunRecord(spec)
    _reference_rows(rec, ev, src.params, k, spec.protocol.mask_seeds)
    _run_arms(spec, arms, rec, corpus, ev, src, out_dir)
    if not rec.failed:
        learned, random_, oracle = rec.mean("learned"), rec.mean("random"), rec.mean(f"oracle@k={k}")
        eff = efficiency(learned, random_, oracle)
        steps = [convergence_step(rec.series("learned", s)) for s in sorted(spec.protocol.seeds)]
        rec.derived = {
            "learned": learned, "random": random_, "oracle": oracle, "dense": rec.mean("dense"),
            "delta": random_ - learned, "efficiency": eff.raw, "efficiency_clamped": eff.clamped,
            "convergence_step": steps,
        }
    return rec


def run_posthoc_distill(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Distil the gate of a frozen dense model (KL or BCE) and deploy it at each configured k."""
    corpus, ev = _setup(spec, corpus)
    src = source_checkpoint(spec, "dense")
    loss = spec.protocol.distill_loss
    k_list = sorted(set(spec.protocol.k_list or [spec.k]))
    rec = RunRecord(spec)
    _eval_row(rec, ev, src.params, None, DENSE, "dense", 0)
    for k in k_list:
        _eval_row(rec, ev, src.params, None, hard(MaskKind.ORACLE, k), f"oracle@k={k}", 0)
        for s in range(spec.protocol.mask_seeds):
            _eval_row(rec, ev, src.params, None, hard(MaskKind.FIXED_RANDOM, k, s), f"fixed_random@k={k}", s)

    def f1_per_k(arm, res):
        if res.status == "ok":
            step = res.series[-1].step
            for kk in k_list:
                f1 = ev.attention(res.params, res.gates, kk)["gate_f1"]
                rec.rows.append(Row(res.seed, f"{arm.name}/f1@k={kk}", MetricsRecord(step=step, val_ppl=math.nan, gate_f1=f1)))

    if loss == "kl":
        extra = {f"deploy@k={kk}": hard(MaskKind.HARD_TOPK, kk) for kk in k_list}
        arms = [Arm("kl", DENSE, hard(MaskKind.HARD_TOPK, k_list[0]), selector="gate_only", gate="learned",
                    objective="kl", extra_evals=extra)]
        _run_arms(spec, arms, rec, corpus, ev, src, out_dir, on_result=f1_per_k)
    else:
        for kk in k_list:
            arms = [Arm(f"bce@k={kk}", DENSE, hard(MaskKind.HARD_TOPK, kk), selector="gate_only", gate="learned",
                        objective="bce", distill_k=kk)]
            _run_arms(spec, arms, rec, corpus, ev, src, out_dir, on_result=f1_per_k)

    if not rec.failed:
        summ = rec.summary()
        dense = rec.mean("dense")
        per_k = {}
        for kk in k_list:
            gate_arm = f"kl/deploy@k={kk}" if loss == "kl" else f"bce@k={kk}"
            gate, oracle = summ[gate_arm]["val_ppl"]["mean"], rec.mean(f"oracle@k={kk}")
            rnd = summ[f"fixed_random@k={kk}"]["val_ppl"]
            eff = efficiency(gate, rnd["mean"], oracle)
            f1_arm = f"kl/f1@k={kk}" if loss == "kl" else f"bce@k={kk}/f1@k={kk}"
            per_k[str(kk)] = {
                "dense": dense, "oracle": oracle, "distilled": gate, "random": rnd["mean"], "random_std": rnd["std"],
                "efficiency": eff.raw, "efficiency_clamped": eff.clamped, "f1": summ[f1_arm]["gate_f1"]["mean"],
                "ordering": bool(dense <= oracle <= gate <= rnd["mean"]),
            }
        rec.derived = {"loss": loss, "per_k": per_k}
    return rec


def run_absorption_gradient(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    """Unfreeze the attention projections of the lowest ``n`` layers and compare learned vs random soft gates."""
    L = spec.model.n_layers
    n_list = spec.protocol.n_unfrozen if spec.protocol.n_unfrozen is not None else list(range(L + 1))
    for n in n_list:
        if not 0 <= n <= L:
            raise ConfigError(f"n_unfrozen={n} is outside 0..{L}")
    corpus, ev = _setup(spec, corpus)
    src = source_checkpoint(spec, "dense")
    soft, rand = MaskMode(MaskKind.SOFT_LEARNED), MaskMode(MaskKind.SOFT_RANDOM)
    rec = RunRecord(spec)
    for n in sorted(set(n_list)):
        sel = ("attn_layers", tuple(range(n)))
        arms = [
            Arm(f"learned@n={n}", soft, soft, selector=sel, gate="learned"),
            Arm(f"random@n={n}", rand, rand, selector=sel, gate="frozen"),
            Arm(f"nogate@n={n}", DENSE, DENSE, selector=sel),
        ]
        _run_arms(spec, arms, rec, corpus, ev, src, out_dir)
    if not rec.failed:
        rows = {}
        for n in sorted(set(n_list)):
            learned, random_ = rec.mean(f"learned@n={n}"), rec.mean(f"random@n={n}")
            rows[str(n)] = {"learned": learned, "random": random_, "nogate": rec.mean(f"nogate@n={n}"), "gap": random_ - learned}
        rec.derived = {"per_n": rows}
    return rec


# --------------------------------------------------------------------------
# analysis


def analyze_concentration(ckpt: Checkpoint, k_list, batches) -> list[dict]:
    """Per-layer top-k mass and entropy ratio of dense attention over ``batches``."""
    L = ckpt.params.config.n_layers
    probs: list[list[np.ndarray]] = [[] for _ in range(L)]
    with no_grad():
        for tokens, _ in batches:
            _, tr = forward(ckpt.params, None, DENSE, tokens, trace=True)
            for i in range(L):
                probs[i].append(tr.probs[i])
    per_layer = [np.concatenate(p) for p in probs]
    out = []
    for k in sorted(set(int(k) for k in k_list)):
        stats = layer_stats(per_layer, k)
        for i in range(L):
            out.append({"k": k, "layer": str(i), "topk_mass": stats["topk_mass"][i], "entropy_ratio": stats["entropy_ratio"][i]})
        out.append({"k": k, "layer": "mean", "topk_mass": stats["topk_mass_mean"], "entropy_ratio": stats["entropy_ratio_mean"]})
    return out


def concentration_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "layer", "topk_mass", "entropy_ratio"])
    for r in rows:
        w.writerow([r["k"], r["layer"], repr(float(r["topk_mass"])), repr(float(r["entropy_ratio"]))])
    return buf.getvalue()


def validation_batches(spec: ExperimentSpec, corpus: Corpus | None = None):
    corpus = corpus_for(spec) if corpus is None else corpus
    return eval_batches(corpus.val, spec.model.seq_len, spec.train.batch_size, spec.train.eval_batches)


PROTOCOL_RUNNERS = {
    "E1_soft": run_e1_soft,
    "E2_hard": run_e2_hard,
    "E3_contrast": run_e3_contrast,
    "E4_stochastic": run_e4_stochastic,
    "GATE_ONLY": run_gate_only,
    "POSTHOC_DISTILL": run_posthoc_distill,
    "ABSORPTION_GRADIENT": run_absorption_gradient,
}


def run_protocol(spec: ExperimentSpec, out_dir=None, corpus=None) -> RunRecord:
    return PROTOCOL_RUNNERS[spec.protocol.name](spec, out_dir=out_dir, corpus=corpus)
