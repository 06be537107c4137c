"""Exception hierarchy shared across the package."""


class DraftflowError(Exception):
    """Base class for all package errors."""


class ConfigError(DraftflowError):
    """Invalid configuration value (bad dims, ratios, resolutions, ...)."""


class NumericInputError(DraftflowError):
    """NaN or non-finite values where finite numbers are required."""


class ShapeMismatchError(DraftflowError):
    """Array shapes inconsistent with the operation's contract."""


class EmptyBatchError(DraftflowError):
    """A batch operation received no samples."""


class IncompleteBundleError(DraftflowError):
    """A guidance variant needs a condition slot that is absent."""


class InvalidSceneError(DraftflowError):
    """Scene violates the shapes-world invariants (cell collisions, ...)."""


class InvalidPromptError(DraftflowError):
    """Prompt violates the constraint-budget or vocabulary rules."""


class InconsistentPairError(DraftflowError):
    """Prompt does not actually describe the target scene of a pair."""


class ModelStateError(DraftflowError):
    """Model weights unusable (non-finite after training, untrained, ...)."""
