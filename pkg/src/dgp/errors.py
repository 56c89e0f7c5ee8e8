"""Exception types shared across the package."""


class DGPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DGPError, ValueError):
    """Invalid architecture, schedule, corpus or experiment configuration."""


class DomainError(DGPError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class CheckpointError(DGPError):
    """A checkpoint could not be loaded."""


class IntegrityError(CheckpointError):
    """A checkpoint archive is truncated, corrupted or fails its checksums."""


class StateError(DGPError, RuntimeError):
    """An operation was called on an object in the wrong state."""


class DivergenceError(DGPError, FloatingPointError):
    """An optimization produced a non-finite loss."""
