"""Gate parameters, mask construction and mask application.

Masks are boolean arrays shaped ``[..., n, n]`` (query rows, key columns).
Every mask produced here is causal and keeps exactly ``min(k, q + 1)`` keys in
query row ``q``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .tensor import (
    InvalidRowError,
    Tensor,
    matmul,
    masked_fill,
    mul,
    permute,
    reshape,
    scale,
    sigmoid,
    transpose,
)


class MaskKind(str, Enum):
    DENSE = "dense"
    SOFT_LEARNED = "soft_learned"
    SOFT_RANDOM = "soft_random"
    HARD_TOPK = "hard_topk"
    ORACLE = "oracle"
    FIXED_RANDOM = "fixed_random"
    STOCHASTIC_RANDOM = "stochastic_random"


_NEEDS_K = {MaskKind.HARD_TOPK, MaskKind.ORACLE, MaskKind.FIXED_RANDOM, MaskKind.STOCHASTIC_RANDOM}


@dataclass(frozen=True)
class MaskMode:
    """The gating regime for a forward pass.

    ``HARD_TOPK``, ``ORACLE`` and ``FIXED_RANDOM`` are one family of hard
    top-k masks that differ only in ranking source (gate scores, the model's
    own attention scores, uniform noise). ``seed`` fixes the draw for
    ``FIXED_RANDOM``.
    """

    kind: MaskKind
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        kind = MaskKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in _NEEDS_K:
            if self.k is None or int(self.k) < 1:
                raise ValueError(f"mask mode {kind.value} requires k >= 1, got {self.k}")
            object.__setattr__(self, "k", int(self.k))

    @property
    def needs_gate(self) -> bool:
        return self.kind in (MaskKind.SOFT_LEARNED, MaskKind.SOFT_RANDOM, MaskKind.HARD_TOPK)

    @property
    def is_soft(self) -> bool:
        return self.kind in (MaskKind.SOFT_LEARNED, MaskKind.SOFT_RANDOM)

    @property
    def is_hard(self) -> bool:
        return self.kind in _NEEDS_K

    @property
    def source(self) -> str | None:
        return {
            MaskKind.HARD_TOPK: "gate",
            MaskKind.ORACLE: "teacher",
            MaskKind.FIXED_RANDOM: "random",
            MaskKind.STOCHASTIC_RANDOM: "random",
        }.get(self.kind)

    @classmethod
    def parse(cls, name: str, k: int | None = None, seed: int = 0) -> "MaskMode":
        return cls(MaskKind(name), k, seed)

    def label(self) -> str:
        if self.k is None:
            return self.kind.value
        return f"{self.kind.value}@k={self.k}"


DENSE = MaskMode(MaskKind.DENSE)


# --------------------------------------------------------------------------
# gate parameters


@dataclass
class GateParams:
    """Per-layer bilinear gate projections.

    ``wq[l]`` and ``wk[l]`` are ``d x (n_heads * d_gate)``; column block ``h``
    is head ``h``'s ``d x d_gate`` projection.
    """

    n_layers: int
    n_heads: int
    d_model: int
    d_gate: int
    wq: list[Tensor] = field(default_factory=list)
    wk: list[Tensor] = field(default_factory=list)
    frozen: bool = False

    @classmethod
    def init(cls, n_layers, n_heads, d_model, d_gate, rng: np.random.Generator, std: float | None = None,
             frozen: bool = False) -> "GateParams":
        if std is None:
            std = 1.0 / math.sqrt(d_model)
        gp = cls(n_layers, n_heads, d_model, d_gate, frozen=frozen)
        for layer in range(n_layers):
            gp.wq.append(Tensor(rng.normal(0.0, std, (d_model, n_heads * d_gate)), name=f"gate.{layer}.wq"))
            gp.wk.append(Tensor(rng.normal(0.0, std, (d_model, n_heads * d_gate)), name=f"gate.{layer}.wk"))
        gp.set_frozen(frozen)
        return gp

    def head_weights(self, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
        sl = slice(head * self.d_gate, (head + 1) * self.d_gate)
        return self.wq[layer].data[:, sl], self.wk[layer].data[:, sl]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in range(self.n_layers):
            out.append((f"gate.{layer}.wq", self.wq[layer]))
            out.append((f"gate.{layer}.wk", self.wk[layer]))
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def count(self) -> int:
        return sum(t.size for t in self.tensors())

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = bool(frozen)
        for t in self.tensors():
            t.requires_grad = not self.frozen
            t.grad = None if self.frozen else np.zeros_like(t.data)

    def copy(self) -> "GateParams":
        gp = GateParams(self.n_layers, self.n_heads, self.d_model, self.d_gate)
        gp.wq = [Tensor(t.data, name=t.name) for t in self.wq]
        gp.wk = [Tensor(t.data, name=t.name) for t in self.wk]
        gp.set_frozen(self.frozen)
        return gp


def gate_projections(x: Tensor, gp: GateParams, layer: int) -> Tensor:
    """All heads' gate scores ``[B, H, n, n]`` for one layer's post-norm input."""
    B, n, _ = x.shape
    H, dg = gp.n_heads, gp.d_gate
    gq = permute(reshape(matmul(x, gp.wq[layer]), (B, n, H, dg)), (0, 2, 1, 3))
    gk = permute(reshape(matmul(x, gp.wk[layer]), (B, n, H, dg)), (0, 2, 1, 3))
    return scale(matmul(gq, transpose(gk)), 1.0 / math.sqrt(dg))


def gate_scores(x: Tensor, gp: GateParams, layer: int, head: int) -> Tensor:
    """Gate scores ``(x W_gq)(x W_gk)^T / sqrt(d_gate)`` for one head, ``[B, n, n]``."""
    sl = slice(head * gp.d_gate, (head + 1) * gp.d_gate)
    wq = _column_block(gp.wq[layer], sl)
    wk = _column_block(gp.wk[layer], sl)
    return scale(matmul(matmul(x, wq), transpose(matmul(x, wk))), 1.0 / math.sqrt(gp.d_gate))


def _column_block(w: Tensor, sl: slice) -> Tensor:
    # differentiable column slice expressed as a product with a selector matrix
    sel = np.zeros((w.shape[1], sl.stop - sl.start))
    sel[np.arange(sl.start, sl.stop), np.arange(sl.stop - sl.start)] = 1.0
    return matmul(w, Tensor(sel))


# --------------------------------------------------------------------------
# masks


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def row_budget(n: int, k: int) -> np.ndarray:
    """Keys kept per query row: ``min(k, q + 1)``."""
    return np.minimum(k, np.arange(1, n + 1))


def topk_mask(scores, k: int, causal: bool = True) -> np.ndarray:
    """Keep the ``min(k, q + 1)`` highest causally-valid scores per query row.

    Ties go to the lower key index. The result is a detached boolean array;
    no gradient is defined through it.
    """
    if k < 1:
        raise ValueError(f"topk_mask requires k >= 1, got {k}")
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    n = s.shape[-1]
    valid = causal_mask(n) if causal else np.ones((n, n), dtype=bool)
    valid = np.broadcast_to(valid, s.shape)
    if k >= n:
        return valid.copy()
    sv = np.where(valid & ~np.isnan(s), s, -np.inf)
    # k-th largest value of each row; rows with <= k valid entries keep all of them
    thr = -np.partition(-sv, k - 1, axis=-1)[..., k - 1:k]
    above = sv > thr
    tied = (sv == thr) & valid
    need = k - above.sum(axis=-1, keepdims=True)
    take_tied = tied & (np.cumsum(tied, axis=-1) <= need)
    mask = above | take_tied
    short_rows = (np.arange(n) + 1) <= k
    mask[..., short_rows, :] = valid[..., short_rows, :]
    return mask


def oracle_mask(p_teacher, k: int) -> np.ndarray:
    """Top-k of a dense teacher's attention (rank-equivalent to its pre-softmax scores)."""
    return topk_mask(p_teacher, k, causal=True)


def random_mask(k: int, n: int, rng: np.random.Generator, shape: tuple[int, ...] = (), causal: bool = True) -> np.ndarray:
    """Per query row, ``min(k, q + 1)`` valid keys drawn uniformly without replacement."""
    if k < 1:
        raise ValueError(f"random_mask requires k >= 1, got {k}")
    u = rng.random(tuple(shape) + (n, n))
    return topk_mask(u, k, causal=causal)


class FixedRandomMasks:
    """One random mask per ``(layer, n)``, drawn once from ``seed`` and reused."""

    def __init__(self, k: int, n_heads: int, seed: int):
        self.k = k
        self.n_heads = n_heads
        self.seed = seed
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def get(self, layer: int, n: int) -> np.ndarray:
        key = (layer, n)
        if key not in self._cache:
            rng = np.random.default_rng([self.seed, layer, n])
            self._cache[key] = random_mask(self.k, n, rng, (self.n_heads,))
        return self._cache[key]


def stochastic_mask_per_step(k: int, n: int, rng: np.random.Generator, shape: tuple[int, ...] = ()) -> np.ndarray:
    """Fresh uniform random mask; call once per forward pass."""
    return random_mask(k, n, rng, shape)


def apply_hard(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Set masked-out scores to ``-inf`` ahead of softmax."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise InvalidRowError("mask removes every key of some query row")
    return masked_fill(scores, mask)


def apply_soft(p: Tensor, g: Tensor) -> Tensor:
    """Scale post-softmax weights by ``sigmoid(G)``; rows are not renormalised."""
    return mul(p, sigmoid(g))


# --------------------------------------------------------------------------
# mask artifacts: JSON header line followed by packed bits


def save_mask(path, mask: np.ndarray, k: int, seed: int | None) -> None:
    mask = np.asarray(mask, dtype=bool)
    header = json.dumps({"shape": list(mask.shape), "k": int(k), "seed": seed}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.packbits(mask.reshape(-1)).tobytes())


def load_mask(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    shape = tuple(header["shape"])
    size = int(np.prod(shape)) if shape else 1
    bits = np.unpackbits(np.frombuffer(raw[nl + 1:], dtype=np.uint8), count=size)
    return bits.astype(bool).reshape(shape), header


def export_masks(directory, masks: list[np.ndarray], k: int, seed: int | None) -> list[Path]:
    """Write one file per (layer, head); ``masks[l]`` is ``[B, H, n, n]`` or ``[H, n, n]``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, m in enumerate(masks):
        m = np.asarray(m, dtype=bool)
        for head in range(m.shape[-3]):
            p = directory / f"mask_l{layer}_h{head}.bin"
            save_mask(p, m[..., head, :, :], k, seed)
            paths.append(p)
    return paths
