"""Exception and warning types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid parameters, profiles or run configuration."""


class SolverError(RuntimeError):
    """A numerical solver aborted (step too large, positivity or trace loss)."""


class TruncationError(ValueError):
    """A requested state does not fit in the truncated Fock space."""


class TruncationWarning(UserWarning):
    """Population reached the highest retained Fock level."""


class RegimeWarning(UserWarning):
    """A physical regime assumption (bad cavity, weak damping, high T) is violated."""


class AdiabaticityWarning(UserWarning):
    """The drive varies too quickly for the adiabatic spin frame."""


class StepSizeWarning(UserWarning):
    """The step size is large compared with the fastest physical time scale."""
