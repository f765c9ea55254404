"""Optimizer, training runner and experiment protocols."""

from .optim import AdamW, AdamState, lr_at, optimizer_step
from .protocols import (
    PROTOCOL_RUNNERS,
    analyze_concentration,
    run_absorption_gradient,
    run_e1_soft,
    run_e2_hard,
    run_e3_contrast,
    run_e4_stochastic,
    run_gate_only,
    run_posthoc_distill,
    run_protocol,
)
from .records import RunRecord, write_run_dir
from .runner import Arm, DivergenceError, Evaluator, InvariantViolation, train_arm
