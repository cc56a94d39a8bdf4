"""Exception types shared across the package."""


class MoesegError(Exception):
    """Base class for all package errors."""


class DimensionError(MoesegError):
    """Tensor shapes or dimensions do not line up."""


class ConfigError(MoesegError):
    """A configuration value violates its constraints."""


class ContractError(MoesegError):
    """A call-time precondition was violated."""


class ValidationError(MoesegError):
    """User-supplied data (prompts, datasets, corpora) is invalid."""


class RegistryError(MoesegError):
    """Expert bank lookup or registration failed."""


class GenerationError(MoesegError):
    """A synthetic sample could not be generated under its spec."""


class CheckpointError(MoesegError):
    """A checkpoint file is unreadable, corrupt, or inconsistent."""
