"""Exception hierarchy shared by all modules."""


class RedrafterError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RedrafterError):
    """Tensor dimensions are inconsistent with the operation's contract."""


class ConfigError(RedrafterError):
    """Invalid model or run configuration."""


class VocabError(RedrafterError):
    """Token id outside the model vocabulary."""


class CapacityError(RedrafterError):
    """Sequence would exceed the model's maximum context length."""


class ContractError(RedrafterError):
    """Caller violated a structural precondition (misaligned inputs, non-path commits, ...)."""


class FormatError(RedrafterError):
    """Weight or dataset file is malformed."""


class TrainingError(RedrafterError):
    """Optimization diverged."""
