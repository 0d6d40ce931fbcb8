"""Recurrent cell families with differentiable-stack integration."""

from .model import Model, SequenceOutput, cfl_arrays, lm_arrays
from .params import (
    DISPLAY_NAMES,
    FAMILIES,
    FAMILY_ORDER,
    CheckpointError,
    Family,
    ModelParams,
    get_family,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .reference import CellState, sequence_loss_tape, step, step_carry_forward, stack_read_inject

__all__ = [
    "DISPLAY_NAMES",
    "FAMILIES",
    "FAMILY_ORDER",
    "CellState",
    "CheckpointError",
    "Family",
    "Model",
    "ModelParams",
    "SequenceOutput",
    "cfl_arrays",
    "get_family",
    "init_params",
    "lm_arrays",
    "load_checkpoint",
    "save_checkpoint",
    "sequence_loss_tape",
    "stack_read_inject",
    "step",
    "step_carry_forward",
]
