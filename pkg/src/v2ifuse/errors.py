"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A hyperparameter or configuration value is invalid."""


class ContractError(ValueError):
    """A call violates an operation's precondition."""


class TrainingError(RuntimeError):
    """Training produced a non-finite value."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints."""


class DecodeError(ValueError):
    """A serialized message is truncated or corrupt.

    ``offset`` is the byte position where decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
