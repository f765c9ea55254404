"""Training objectives and attention/routing metrics.

Attention arrays are ``[..., n, n]`` causal post-softmax weights. Unless noted
otherwise, per-row statistics are averaged uniformly over every leading index
and query row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .gating import causal_mask, row_budget, topk_mask
from .tensor import Tensor, _sigmoid, cross_entropy, record_op, accumulate


def perplexity(logits, targets) -> float:
    """``exp`` of the mean next-token cross-entropy (nats)."""
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    return math.exp(cross_entropy(logits, targets).item())


# --------------------------------------------------------------------------
# distillation losses


def kl_distill_loss(p_teacher, g: Tensor) -> Tensor:
    """Mean over query rows of ``KL(teacher_row || softmax(G_row))``.

    The softmax runs over causally-valid keys only. The teacher is a constant,
    so gradient reaches only ``g``.
    """
    p = np.asarray(p_teacher.data if isinstance(p_teacher, Tensor) else p_teacher, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"teacher {p.shape} and gate scores {g.shape} differ")
    n = p.shape[-1]
    valid = causal_mask(n)
    gm = np.where(valid, g.data, -np.inf)
    m = gm.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(gm - m).sum(axis=-1, keepdims=True))
    logq = gm - lse
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, p * (logp - np.where(pos, logq, 0.0)), 0.0)
    rows = p.size // n
    loss = terms.sum() / rows

    def backward(up):
        q = np.exp(logq)
        accumulate(g, (up / rows) * (q - p), fresh=True)

    return record_op(np.asarray(loss), (g,), backward)


def bce_distill_loss(g: Tensor, oracle) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(G)`` against a 0/1 mask over valid positions."""
    target = np.asarray(oracle, dtype=np.float64)
    target = np.broadcast_to(target, g.shape)
    n = g.shape[-1]
    valid = np.broadcast_to(causal_mask(n), g.shape)
    count = valid.sum()
    gd = g.data
    # softplus(G) - y G == -[y log s + (1 - y) log(1 - s)]
    per = np.logaddexp(0.0, gd) - target * gd
    loss = np.where(valid, per, 0.0).sum() / count

    def backward(up):
        accumulate(g, np.where(valid, (up / count) * (_sigmoid(gd) - target), 0.0), fresh=True)

    return record_op(np.asarray(loss), (g,), backward)


# --------------------------------------------------------------------------
# attention statistics


def topk_mass_rows(p, k: int) -> np.ndarray:
    """Per-row mass captured by the ``min(k, q + 1)`` largest entries, shape ``[..., n]``."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    if k >= n:
        return p.sum(axis=-1)
    top = -np.partition(-p, k - 1, axis=-1)[..., :k]
    # rows shorter than k hold only zeros beyond their width, so the sum is unaffected
    return top.sum(axis=-1)


def topk_mass(p, k: int) -> float:
    """Fraction of attention mass kept by each row's top ``min(k, q + 1)`` entries."""
    return float(topk_mass_rows(p, k).mean())


def entropy_ratio_rows(p) -> np.ndarray:
    """``H(row) / ln(width)`` for rows of width >= 2, shape ``[..., n - 1]``."""
    p = np.asarray(p, dtype=np.float64)
    n = p.shape[-1]
    pos = p > 0
    h = -np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0).sum(axis=-1)
    widths = np.arange(1, n + 1)
    return h[..., 1:] / np.log(widths[1:])


def entropy_ratio(p) -> float:
    """Mean entropy ratio; width-1 rows (maximum entropy 0) are excluded."""
    r = entropy_ratio_rows(p)
    return float(r.mean()) if r.size else 0.0


def gate_f1_counts(g, p_teacher, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row overlap ``|top_k(G) & top_k(P)|`` and set size ``min(k, q + 1)``."""
    mg = topk_mask(g, k)
    mt = topk_mask(p_teacher, k)
    inter = (mg & mt).sum(axis=-1)
    n = mg.shape[-1]
    budget = np.broadcast_to(row_budget(n, k), inter.shape)
    return inter, budget


def gate_f1(g, p_teacher, k: int, average: str = "micro") -> float:
    """F1 between the gate's and the teacher's top-k key sets.

    Both sets have the same size per row, so row F1 equals overlap / size.
    ``micro`` pools overlaps and sizes over all rows; ``macro`` averages the
    per-row values. ``g`` and ``p_teacher`` may be per-layer lists.
    """
    if isinstance(g, (list, tuple)):
        pairs = [gate_f1_counts(gi, pi, k) for gi, pi in zip(g, p_teacher)]
        inter = np.concatenate([a.reshape(-1) for a, _ in pairs])
        budget = np.concatenate([b.reshape(-1) for _, b in pairs])
    else:
        inter, budget = gate_f1_counts(g, p_teacher, k)
    if average == "micro":
        return float(inter.sum() / budget.sum())
    if average == "macro":
        return float((inter / budget).mean())
    raise ValueError(f"unknown F1 averaging {average!r}")


class Efficiency(NamedTuple):
    raw: float
    clamped: float
    defined: bool


def efficiency(ppl_gate: float, ppl_random: float, ppl_oracle: float) -> Efficiency:
    """Share of the random-to-oracle perplexity gap the gate closes.

    ``raw`` is unclamped (it can exceed 1 when the gate beats the oracle);
    ``clamped`` lies in ``[0, 1]``. A gap below 1e-9 is undefined.
    """
    denom = ppl_random - ppl_oracle
    if not denom > 1e-9:
        return Efficiency(math.nan, math.nan, False)
    raw = (ppl_random - ppl_gate) / denom
    return Efficiency(raw, min(max(raw, 0.0), 1.0), True)


def layer_stats(probs: Sequence[np.ndarray], k: int) -> dict:
    """Per-layer top-k mass and entropy ratio plus their layer averages."""
    mass = [topk_mass(p, k) for p in probs]
    ent = [entropy_ratio(p) for p in probs]
    return {
        "topk_mass": mass,
        "entropy_ratio": ent,
        "topk_mass_mean": float(np.mean(mass)),
        "entropy_ratio_mean": float(np.mean(ent)),
    }


@dataclass
class MetricsRecord:
    """One evaluation point of one training arm."""

    step: int
    val_ppl: float
    val_loss: float = math.nan
    train_loss: float = math.nan
    lr: float = 0.0
    topk_mass: list[float] = field(default_factory=list)
    entropy_ratio: list[float] = field(default_factory=list)
    gate_f1: float = math.nan
    losses: dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    def __post_init__(self):
        if not math.isnan(self.val_ppl) and self.val_ppl < 1.0 - 1e-12:
            raise ValueError(f"perplexity below 1: {self.val_ppl}")
        for v in list(self.topk_mass) + list(self.entropy_ratio) + [self.gate_f1]:
            if not math.isnan(v) and not -1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"fraction metric outside [0, 1]: {v}")

    def to_dict(self) -> dict:
        return asdict(self)
