"""Multi-motion-model SLAMMOT backend.

IMM object tracking over constant-position, constant-velocity and
constant-turn-rate models, coupled with sliding-window bundle adjustment.
"""

from .imm import ImmOptions, ImmTrack, imm_step, imm_step_many
from .metrics import ape, monte_carlo, motp, rpe
from .motion import ModelId
from .pipeline import EstimateLog, LevelId, PipelineConfig, run_level
from .sim import ScenarioConfig, get_scenario, simulate

__version__ = "0.1.0"

__all__ = [
    "EstimateLog",
    "ImmOptions",
    "ImmTrack",
    "LevelId",
    "ModelId",
    "PipelineConfig",
    "ScenarioConfig",
    "ape",
    "get_scenario",
    "imm_step",
    "imm_step_many",
    "monte_carlo",
    "motp",
    "rpe",
    "run_level",
    "simulate",
]
