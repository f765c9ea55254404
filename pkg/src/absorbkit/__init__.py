"""Gated sparse attention in a small numpy transformer, with routing-absorption experiments."""

from .config import ExperimentSpec, load_config
from .gating import DENSE, GateParams, MaskKind, MaskMode
from .model import ModelConfig, ModelParams, count_params, forward, set_trainable
from .tensor import ConfigError, InvalidRowError, LifecycleError, ShapeError, Tensor, backward

__version__ = "0.1.0"
