"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(ValueError):
    """A call violated a documented precondition."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(RuntimeError):
    """Checkpoint archive is unreadable or does not match the model."""
