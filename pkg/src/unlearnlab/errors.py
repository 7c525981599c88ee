"""Exception types shared across the package."""


class UnlearnLabError(Exception):
    """Base class for package errors."""


class ShapeError(UnlearnLabError, ValueError):
    """Operand shapes incompatible with the requested op."""


class DomainError(UnlearnLabError, ValueError):
    """Input outside the mathematical domain of the op (e.g. log of <= 0)."""


class ContractError(UnlearnLabError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(UnlearnLabError, ValueError):
    """Invalid configuration value."""


class VocabError(UnlearnLabError, ValueError):
    """Unknown token or token index."""


class InputError(UnlearnLabError, ValueError):
    """Malformed runtime input (e.g. pixel values outside [0, 1])."""


class LayoutError(UnlearnLabError, ValueError):
    """Invalid scene layout (overlapping grid positions)."""


class TrainingFailure(UnlearnLabError, RuntimeError):
    """Training finished without reaching its required quality floor."""


class DivergenceError(UnlearnLabError, RuntimeError):
    """Optimization produced non-finite values."""
