"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Unsupported or inconsistent configuration values."""


class ContractError(ValueError):
    """Inputs violate an operation's shape or size precondition."""


class DomainError(ValueError):
    """Numerical input outside an operation's domain."""


class StateError(RuntimeError):
    """Operation invoked in the wrong lifecycle state."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a computation."""
