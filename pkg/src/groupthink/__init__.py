"""Concurrent reasoning chains with token-level mutual visibility."""

from .engine import (
    ModelSource,
    SamplerConfig,
    ScriptedSource,
    Transcript,
    run_answer_phase,
    run_think_phase,
    sample,
)
from .model import ModelConfig, forward_full, forward_incremental, init_model
from .scheduler import (
    GroupConfig,
    Mode,
    TokenCoordinate,
    assign_position_local,
    assign_slots_interleaved,
    build_mask,
    generation_order,
    visibility_oracle,
)

__version__ = "0.1.0"

__all__ = [
    "GroupConfig",
    "Mode",
    "ModelConfig",
    "ModelSource",
    "SamplerConfig",
    "ScriptedSource",
    "TokenCoordinate",
    "Transcript",
    "assign_position_local",
    "assign_slots_interleaved",
    "build_mask",
    "forward_full",
    "forward_incremental",
    "generation_order",
    "init_model",
    "run_answer_phase",
    "run_think_phase",
    "sample",
    "visibility_oracle",
]
