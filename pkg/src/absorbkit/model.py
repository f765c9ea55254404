"""Pre-norm decoder-only transformer with a gating hook in every attention layer."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gating
from .gating import DENSE, GateParams, MaskKind, MaskMode
from .tensor import (
    ConfigError,
    Tensor,
    add,
    embed,
    gelu,
    layernorm,
    matmul,
    permute,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 256
    vocab_size: int = 256
    seq_len: int = 128
    d_gate: int = 8

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_gate < 0:
            raise ConfigError(f"d_gate must be non-negative, got {self.d_gate}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


# the architecture of the reference experiments; the desk preset is ModelConfig()
FULL_SCALE_CONFIG = ModelConfig(n_layers=6, d_model=256, n_heads=4, d_ff=1024, vocab_size=50257, seq_len=512, d_gate=32)


@dataclass(frozen=True)
class ParamReport:
    gate_params: int
    gate_params_per_layer: int
    qkv_params_per_layer: int
    qkv_params: int
    model_params: int
    model_params_untied_head: int
    total_with_gate: int
    qkv_to_gate_ratio_per_layer: float
    model_to_gate_ratio: float


def count_params(cfg: ModelConfig) -> ParamReport:
    """Closed-form parameter counts and gate asymmetry ratios."""
    d, L, dff = cfg.d_model, cfg.n_layers, cfg.d_ff
    gate_layer = 2 * cfg.n_heads * d * cfg.d_gate
    qkv_layer = 3 * d * cfg.n_heads * cfg.d_head
    per_layer = 4 * d * d + 2 * d * dff + dff + d + 4 * d
    model = cfg.vocab_size * d + cfg.seq_len * d + L * per_layer + 2 * d
    gate = L * gate_layer
    return ParamReport(
        gate_params=gate,
        gate_params_per_layer=gate_layer,
        qkv_params_per_layer=qkv_layer,
        qkv_params=L * qkv_layer,
        model_params=model,
        model_params_untied_head=model + cfg.vocab_size * d,
        total_with_gate=model + gate,
        qkv_to_gate_ratio_per_layer=qkv_layer / gate_layer if gate_layer else math.inf,
        model_to_gate_ratio=model / gate if gate else math.inf,
    )


def _group(name: str) -> str:
    if name in ("tok_emb", "pos_emb"):
        return "embed"
    if name.startswith("ln_f."):
        return "final_norm"
    _, layer, block, _ = name.split(".")
    kind = {"ln1": "norm", "ln2": "norm", "attn": "attn", "ff": "ff"}[block]
    return f"layer{layer}.{kind}"


@dataclass
class ModelParams:
    """All transformer weights by name, with per-tensor trainability.

    The output head is tied to ``tok_emb``.
    """

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02) -> "ModelParams":
        d, dff = cfg.d_model, cfg.d_ff
        resid_std = std / math.sqrt(2 * cfg.n_layers)
        t: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0.0, std, (cfg.vocab_size, d)),
            "pos_emb": rng.normal(0.0, std / 2, (cfg.seq_len, d)),
        }
        for layer in range(cfg.n_layers):
            p = f"layers.{layer}."
            t[p + "ln1.g"] = np.ones(d)
            t[p + "ln1.b"] = np.zeros(d)
            t[p + "attn.wq"] = rng.normal(0.0, std, (d, d))
            t[p + "attn.wk"] = rng.normal(0.0, std, (d, d))
            t[p + "attn.wv"] = rng.normal(0.0, std, (d, d))
            t[p + "attn.wo"] = rng.normal(0.0, resid_std, (d, d))
            t[p + "ln2.g"] = np.ones(d)
            t[p + "ln2.b"] = np.zeros(d)
            t[p + "ff.w1"] = rng.normal(0.0, std, (d, dff))
            t[p + "ff.b1"] = np.zeros(dff)
            t[p + "ff.w2"] = rng.normal(0.0, resid_std, (dff, d))
            t[p + "ff.b2"] = np.zeros(d)
        t["ln_f.g"] = np.ones(d)
        t["ln_f.b"] = np.zeros(d)
        return cls(cfg, {k: Tensor(v, requires_grad=True, name=k) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def group(self, name: str) -> str:
        return _group(name)

    def trainable_names(self) -> list[str]:
        return [k for k, t in self.tensors.items() if t.requires_grad]

    def set_trainable_names(self, names) -> None:
        names = set(names)
        for k, t in self.tensors.items():
            t.requires_grad = k in names
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config, {k: Tensor(t.data, name=k) for k, t in self.tensors.items()})
        out.set_trainable_names(self.trainable_names())
        return out


def parse_selector(selector) -> tuple[str, frozenset[int]]:
    """Normalise ``"all" | "none" | "gate_only" | "attn_layers:0,2" | ("attn_layers", {..})``."""
    if isinstance(selector, tuple) and len(selector) == 2:
        name, layers = selector
        return str(name), frozenset(int(i) for i in layers)
    s = str(selector)
    if s.startswith("attn_layers"):
        _, _, rest = s.partition(":")
        layers = frozenset(int(i) for i in rest.split(",") if i.strip() != "")
        return "attn_layers", layers
    return s, frozenset()


def set_trainable(params: ModelParams, selector, gates: GateParams | None = None) -> None:
    """Choose which groups later optimizer steps may touch.

    ``all`` and ``none`` apply to the gate too; ``gate_only`` freezes the model
    and unfreezes the gate. ``attn_layers`` unfreezes only the Q/K/V/O
    projections of the listed layers and leaves the gate's state unchanged.
    """
    name, layers = parse_selector(selector)
    cfg = params.config
    if name == "all":
        params.set_trainable_names(params.tensors)
        if gates is not None:
            gates.set_frozen(False)
    elif name == "none":
        params.set_trainable_names(())
        if gates is not None:
            gates.set_frozen(True)
    elif name == "gate_only":
        params.set_trainable_names(())
        if gates is not None:
            gates.set_frozen(False)
    elif name == "attn_layers":
        bad = [i for i in layers if not 0 <= i < cfg.n_layers]
        if bad:
            raise ConfigError(f"attn_layers: layer indices {sorted(bad)} outside 0..{cfg.n_layers - 1}")
        params.set_trainable_names(
            f"layers.{i}.attn.{w}" for i in sorted(layers) for w in ("wq", "wk", "wv", "wo")
        )
    else:
        raise ConfigError(f"unknown trainability selector {selector!r}")


@dataclass
class AttnTrace:
    """Per-layer attention internals retained from one forward pass.

    ``probs`` are post-softmax weights before any soft gating, ``gates`` the
    gate scores (or None), ``masks`` the hard masks applied (or None) and
    ``inputs`` the post-norm activations the projections saw.
    """

    inputs: list[np.ndarray] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    gates: list[np.ndarray | None] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def forward(
    params: ModelParams,
    gates: GateParams | None,
    mode: MaskMode,
    tokens,
    *,
    trace: bool = False,
    rng: np.random.Generator | None = None,
    masks: list[np.ndarray] | None = None,
) -> tuple[Tensor, AttnTrace | None]:
    """Run the model on ``tokens [B, n]`` and return pre-softmax logits ``[B, n, V]``.

    ``rng`` drives stochastic masks; ``masks`` replays explicit per-layer
    boolean masks (any hard mode) instead of constructing them.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, n], got shape {tokens.shape}")
    B, n = tokens.shape
    if n > cfg.seq_len:
        raise ValueError(f"sequence length {n} exceeds seq_len={cfg.seq_len}")
    if mode.needs_gate and gates is None:
        raise ConfigError(f"mask mode {mode.kind.value} requires gate parameters")
    if mode.kind is MaskKind.STOCHASTIC_RANDOM and rng is None and masks is None:
        raise ConfigError("stochastic_random masks need an rng")

    H, dh = cfg.n_heads, cfg.d_head
    causal = gating.causal_mask(n)
    fixed = gating.FixedRandomMasks(mode.k, H, mode.seed) if mode.kind is MaskKind.FIXED_RANDOM else None
    tr = AttnTrace() if trace else None

    x = add(embed(tokens, params["tok_emb"]), embed(np.arange(n), params["pos_emb"]))
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        a = layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        q = permute(reshape(matmul(a, params[p + "attn.wq"]), (B, n, H, dh)), (0, 2, 1, 3))
        k = permute(reshape(matmul(a, params[p + "attn.wk"]), (B, n, H, dh)), (0, 2, 1, 3))
        v = permute(reshape(matmul(a, params[p + "attn.wv"]), (B, n, H, dh)), (0, 2, 1, 3))
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh))

        g = gating.gate_projections(a, gates, layer) if mode.needs_gate else None
        mask = None
        if mode.is_hard:
            if masks is not None:
                mask = np.asarray(masks[layer], dtype=bool) & causal
            elif mode.kind is MaskKind.HARD_TOPK:
                mask = gating.topk_mask(g.data, mode.k)
            elif mode.kind is MaskKind.ORACLE:
                mask = gating.topk_mask(scores.data, mode.k)
            elif mode.kind is MaskKind.FIXED_RANDOM:
                mask = fixed.get(layer, n)
            else:
                mask = gating.stochastic_mask_per_step(mode.k, n, rng, (B, H))
            scores = gating.apply_hard(scores, mask)
        else:
            scores = gating.apply_hard(scores, causal)
        probs = softmax_rows(scores)
        weights = gating.apply_soft(probs, g) if mode.is_soft else probs

        if tr is not None:
            tr.inputs.append(a.data)
            tr.probs.append(probs.data)
            tr.gates.append(None if g is None else g.data)
            tr.masks.append(mask)

        ctx = reshape(permute(matmul(weights, v), (0, 2, 1, 3)), (B, n, cfg.d_model))
        x = add(x, matmul(ctx, params[p + "attn.wo"]))
        hdn = layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
        hdn = gelu(add(matmul(hdn, params[p + "ff.w1"]), params[p + "ff.b1"]))
        x = add(x, add(matmul(hdn, params[p + "ff.w2"]), params[p + "ff.b2"]))

    x = layernorm(x, params["ln_f.g"], params["ln_f.b"], LN_EPS)
    logits = matmul(x, transpose(params["tok_emb"]))
    return logits, tr


__all__ = [
    "AttnTrace",
    "DENSE",
    "ModelConfig",
    "ModelParams",
    "FULL_SCALE_CONFIG",
    "ParamReport",
    "count_params",
    "forward",
    "parse_selector",
    "set_trainable",
]
