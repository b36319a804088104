"""Exception types shared across the package."""


class ResolutionError(ValueError):
    """A spectral product or exponential left the resolvable band."""


class BlowUpError(RuntimeError):
    """A trajectory exceeded the blow-up threshold."""


class ConditioningError(RuntimeError):
    """A moment problem could not be solved to tolerance.

    The ``diagnostics`` attribute holds singular values and scaled targets.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ContractionError(RuntimeError):
    """The exact-steering iteration failed to contract."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class BudgetError(RuntimeError):
    """A compiled schedule or steering run missed its error budget."""

    def __init__(self, message, error=None, subtree=None, diagnostics=None):
        super().__init__(message)
        self.error = error
        self.subtree = subtree
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field path."""
