"""Exception hierarchy shared across the package."""


class EvoAgentError(Exception):
    """Base class for package errors."""


class ConfigError(EvoAgentError):
    """Invalid configuration: bad splits, unknown tools, empty arm sets."""


class ContractError(EvoAgentError):
    """A caller violated an operation precondition (e.g. reward outside [0,1])."""


class FrozenStateError(EvoAgentError):
    """Mutation attempted on frozen state (read-only memory, frozen posteriors)."""


class DataError(EvoAgentError):
    """Malformed or misaligned market data."""
