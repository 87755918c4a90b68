"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class EmptyInputError(ValueError):
    """An operation received an empty set of rows/keys/items."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class VocabularyError(IndexError):
    """A token index is outside the vocabulary."""


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class CorruptArtifactError(ValueError):
    """A checkpoint or corpus file failed validation."""
