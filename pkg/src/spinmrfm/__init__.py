"""Continuous quantum measurement of a single spin by magnetic resonance force microscopy."""

from .config import RunConfig, preset
from .errors import (AdiabaticityWarning, ConfigError, RegimeWarning, SolverError, StepSizeWarning,
                     TruncationError, TruncationWarning)
from .model import DriveProfile, PhysParams

__all__ = [
    "RunConfig", "preset", "PhysParams", "DriveProfile", "ConfigError", "SolverError", "TruncationError",
    "TruncationWarning", "RegimeWarning", "AdiabaticityWarning", "StepSizeWarning",
]
