"""Run configuration: a strict JSON document with model/data/train/protocol sections."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .tensor import ConfigError

PROTOCOLS = (
    "E1_soft",
    "E2_hard",
    "E3_contrast",
    "E4_stochastic",
    "GATE_ONLY",
    "POSTHOC_DISTILL",
    "ABSORPTION_GRADIENT",
)
DEFAULT_CORPUS = "desk_corpus.txt"


def runs_root() -> Path:
    return Path(os.environ.get("ABSORBKIT_RUNS_DIR", "runs"))


@dataclass
class DataConfig:
    path: str | None = None  # None: build the local desk corpus under the runs root
    tokenizer: str = "byte"
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.tokenizer not in ("byte", "word"):
            raise ConfigError(f"data.tokenizer must be 'byte' or 'word', got {self.tokenizer!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"data.val_fraction must be in (0, 1), got {self.val_fraction}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    warmup_frac: float = 0.02
    min_lr_frac: float = 0.1
    weight_decay: float = 0.01
    gate_weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    eval_interval: int = 250
    eval_batches: int = 16
    analysis_batches: int = 2
    init_std: float = 0.02
    gate_init_std: float | None = None  # None: 1/sqrt(d_model)

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        for name in ("batch_size", "eval_interval", "eval_batches", "analysis_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolConfig:
    name: str
    k: int = 16
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    steps: int | None = None  # overrides train.steps when set
    source_checkpoints: dict[str, str] = field(default_factory=dict)
    from_checkpoint: bool = False  # E1/E2/E4: start from source_checkpoints["dense"]
    distill_loss: str = "kl"
    k_list: list[int] = field(default_factory=list)
    mask_seeds: int = 5
    n_unfrozen: list[int] | None = None
    with_dense_baseline: bool = True

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.name!r}; expected one of {', '.join(PROTOCOLS)}")
        if not self.seeds:
            raise ConfigError("protocol.seeds must be non-empty")
        if self.k < 1:
            raise ConfigError("protocol.k must be >= 1")
        if self.distill_loss not in ("kl", "bce"):
            raise ConfigError(f"protocol.distill_loss must be 'kl' or 'bce', got {self.distill_loss!r}")
        if self.mask_seeds < 1:
            raise ConfigError("protocol.mask_seeds must be >= 1")
        needs = {"E3_contrast": ("dense", "soft"), "GATE_ONLY": ("dense",), "POSTHOC_DISTILL": ("dense",),
                 "ABSORPTION_GRADIENT": ("dense",)}
        required = needs.get(self.name, ())
        if self.from_checkpoint:
            required = required + ("dense",)
        for key in required:
            if key not in self.source_checkpoints:
                raise ConfigError(f"protocol {self.name} requires source_checkpoints.{key}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentSpec:
    model: ModelConfig
    data: DataConfig
    train: TrainConfig
    protocol: ProtocolConfig

    @property
    def steps(self) -> int:
        return self.train.steps if self.protocol.steps is None else self.protocol.steps

    @property
    def k(self) -> int:
        return self.protocol.k

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "protocol": self.protocol.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"model", "data", "train", "protocol"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        if "protocol" not in doc:
            raise ConfigError("config requires a protocol section")
        spec = cls(
            model=_build(ModelConfig, doc.get("model", {}), "model"),
            data=_build(DataConfig, doc.get("data", {}), "data"),
            train=_build(TrainConfig, doc.get("train", {}), "train"),
            protocol=_build(ProtocolConfig, doc["protocol"], "protocol"),
        )
        if spec.protocol.n_unfrozen is not None:
            for n in spec.protocol.n_unfrozen:
                if not 0 <= n <= spec.model.n_layers:
                    raise ConfigError(f"n_unfrozen={n} is outside 0..{spec.model.n_layers}")
        return spec


def _build(kind, section, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"section {where} must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return kind(**section)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return ExperimentSpec.from_dict(doc)
