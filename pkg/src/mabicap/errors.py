"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(RuntimeError):
    """A call violated a documented precondition."""


class ConfigError(ValueError):
    """Invalid configuration or an unusable input collection."""


class FormatError(ValueError):
    """Malformed dataset, sentence or file content."""


class IntegrityError(ValueError):
    """Checkpoint bytes failed validation (truncated or corrupt)."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint written by an unsupported format version."""
