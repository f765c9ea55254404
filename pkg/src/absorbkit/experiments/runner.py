"""Single-arm training and evaluation.

An *arm* is one training condition (mask regime, trainable set, gate state,
objective). Arms inside a protocol share seeds, data streams, schedules and
step counts; they differ only in what the arm definition says.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import gating
from ..checkpoint import Checkpoint, save_checkpoint
from ..config import ExperimentSpec
from ..data import BatchStream, Corpus, eval_batches
from ..gating import DENSE, GateParams, MaskMode
from ..model import ModelParams, forward, set_trainable
from ..objectives import (
    MetricsRecord,
    bce_distill_loss,
    gate_f1,
    kl_distill_loss,
    layer_stats,
)
from ..tensor import Tensor, backward, cross_entropy, no_grad, scale, add
from .optim import AdamW, lr_at

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


class InvariantViolation(AssertionError):
    pass


@dataclass
class Arm:
    name: str
    train_mode: MaskMode
    eval_mode: MaskMode
    selector: object = "all"
    gate: str = "none"  # none | learned | frozen
    objective: str = "lm"  # lm | kl | bce
    distill_k: int | None = None
    extra_evals: dict[str, MaskMode] = field(default_factory=dict)
    assert_zero_gate_grad: bool = False


@dataclass
class ArmResult:
    arm: str
    seed: int
    series: list[MetricsRecord]
    final: dict[str, float]
    params: ModelParams
    gates: GateParams | None
    status: str = "ok"
    failed_step: int | None = None
    checkpoint: str | None = None


def split_seed(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one purpose (0 model init, 1 gate init, 2 masks)."""
    return np.random.default_rng([int(seed), int(stream)])


def init_gates(spec: ExperimentSpec, seed: int) -> GateParams:
    cfg = spec.model
    return GateParams.init(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_gate, split_seed(seed, 1),
                           std=spec.train.gate_init_std)


class Evaluator:
    """Fixed validation batches shared by every arm of a run."""

    def __init__(self, corpus: Corpus, spec: ExperimentSpec):
        t = spec.train
        self.batches = eval_batches(corpus.val, spec.model.seq_len, t.batch_size, t.eval_batches)
        self.analysis = self.batches[: max(1, t.analysis_batches)]
        self.k = spec.protocol.k

    def loss(self, params, gates, mode: MaskMode, seed: int = 0) -> float:
        rng = split_seed(seed, 3)
        total, count = 0.0, 0
        with no_grad():
            for tokens, targets in self.batches:
                logits, _ = forward(params, gates, mode, tokens, rng=rng)
                total += cross_entropy(logits, targets).item() * targets.size
                count += targets.size
        return total / count

    def ppl(self, params, gates, mode: MaskMode, seed: int = 0) -> float:
        return math.exp(self.loss(params, gates, mode, seed))

    def attention(self, params, gates, k: int | None = None) -> dict:
        """Dense-mode attention statistics and, when a gate exists, its F1 vs the oracle."""
        k = self.k if k is None else k
        probs: list[list[np.ndarray]] = []
        scores: list[list[np.ndarray]] = []
        with no_grad():
            for tokens, _ in self.analysis:
                _, tr = forward(params, None, DENSE, tokens, trace=True)
                probs.append(tr.probs)
                if gates is not None:
                    scores.append([gating.gate_projections(Tensor(a), gates, i).data for i, a in enumerate(tr.inputs)])
        L = params.config.n_layers
        per_layer = [np.concatenate([b[i] for b in probs]) for i in range(L)]
        stats = layer_stats(per_layer, k)
        if gates is not None:
            g_layers = [np.concatenate([b[i] for b in scores]) for i in range(L)]
            stats["gate_f1"] = gate_f1(g_layers, per_layer, k)
        else:
            stats["gate_f1"] = math.nan
        return stats


def _lm_loss(params, gates, mode, tokens, targets, rng):
    logits, _ = forward(params, gates, mode, tokens, rng=rng)
    return cross_entropy(logits, targets)


def _distill_loss(params, gates, arm: Arm, teacher_gates, teacher_mode, tokens):
    with no_grad():
        _, tr = forward(params, teacher_gates, teacher_mode, tokens, trace=True)
    L = params.config.n_layers
    total = None
    for layer in range(L):
        g = gating.gate_projections(Tensor(tr.inputs[layer]), gates, layer)
        if arm.objective == "kl":
            term = kl_distill_loss(tr.probs[layer], g)
        else:
            term = bce_distill_loss(g, gating.oracle_mask(tr.probs[layer], arm.distill_k))
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / L)


def train_arm(
    arm: Arm,
    seed: int,
    spec: ExperimentSpec,
    corpus: Corpus,
    evaluator: Evaluator,
    source: Checkpoint | None = None,
    out_dir: Path | None = None,
    steps: int | None = None,
) -> ArmResult:
    """Train one arm for one seed and evaluate it at every eval interval."""
    tcfg = spec.train
    steps = spec.steps if steps is None else steps
    if source is not None:
        params = source.params.copy()
    else:
        params = ModelParams.init(spec.model, split_seed(seed, 0), tcfg.init_std)
    gates = init_gates(spec, seed) if arm.gate != "none" else None
    set_trainable(params, arm.selector, gates)
    if gates is not None:
        gates.set_frozen(arm.gate == "frozen")

    teacher_gates, teacher_mode = None, DENSE
    if arm.objective != "lm" and source is not None and source.gates is not None:
        teacher_gates = source.gates
        teacher_mode = MaskMode.parse(source.meta.get("native_mode", "soft_learned"), source.meta.get("native_k"))
        if not teacher_mode.needs_gate:
            teacher_gates = None

    named = params.named_tensors() + (gates.named_tensors() if gates is not None else [])
    opt = AdamW(named, tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay, tcfg.gate_weight_decay, tcfg.grad_clip)
    trainable = [t for _, t in named if t.requires_grad]
    gate_tensors = gates.tensors() if gates is not None else []

    stream = BatchStream(corpus.train, spec.model.seq_len, tcfg.batch_size, seed)
    mask_rng = split_seed(seed, 2)
    series: list[MetricsRecord] = []
    recent: list[float] = []
    lr = 0.0
    start = time.perf_counter()
    ckpt_dir = None if out_dir is None else Path(out_dir) / "checkpoints" / f"{arm.name}_s{seed}"

    def checkpoint(step: int):
        if ckpt_dir is None:
            return
        meta = {"arm": arm.name, "seed": seed, "step": step, "native_mode": arm.eval_mode.kind.value, "native_k": arm.eval_mode.k,
                "k": spec.protocol.k, "data": spec.data.to_dict()}
        rng_state = {"mask_rng": mask_rng.bit_generator.state, "stream_epoch": stream.epoch}
        save_checkpoint(ckpt_dir, params, gates, rng_state, meta)

    def record(step: int):
        stats = evaluator.attention(params, gates)
        val_loss = evaluator.loss(params, gates, arm.eval_mode, seed)
        rec = MetricsRecord(
            step=step,
            val_ppl=math.exp(val_loss),
            val_loss=val_loss,
            train_loss=float(np.mean(recent)) if recent else math.nan,
            lr=lr,
            topk_mass=stats["topk_mass"],
            entropy_ratio=stats["entropy_ratio"],
            gate_f1=stats["gate_f1"],
            wall_clock=time.perf_counter() - start,
        )
        recent.clear()
        series.append(rec)
        log.info("%s seed=%d step=%d val_ppl=%.4f", arm.name, seed, step, rec.val_ppl)
        checkpoint(step)

    for step in range(steps + 1):
        if step % tcfg.eval_interval == 0 or step == steps:
            record(step)
        if step == steps:
            break
        tokens, targets = next(stream)
        if not trainable:
            continue
        lr = lr_at(step, steps, tcfg.lr, tcfg.warmup_frac, tcfg.min_lr_frac)
        for t in trainable:
            t.zero_grad()
        if arm.objective == "lm":
            loss = _lm_loss(params, gates, arm.train_mode, tokens, targets, mask_rng)
        else:
            loss = _distill_loss(params, gates, arm, teacher_gates, teacher_mode, tokens)
        value = loss.item()
        if not math.isfinite(value):
            log.error("%s seed=%d diverged at step %d", arm.name, seed, step)
            return ArmResult(arm.name, seed, series, {}, params, gates, "failed", step)
        backward(loss)
        if arm.assert_zero_gate_grad:
            for t in gate_tensors:
                if t.grad is not None and np.any(t.grad != 0.0):
                    raise InvariantViolation(f"{arm.name}: nonzero gradient on {t.name} at step {step}")
        recent.append(value)
        opt.step(lr)

    final = {arm.eval_mode.label(): series[-1].val_ppl}
    for label, mode in arm.extra_evals.items():
        final[label] = evaluator.ppl(params, gates, mode, seed)
    return ArmResult(arm.name, seed, series, final, params, gates,
                     checkpoint=None if ckpt_dir is None else str(ckpt_dir))
