"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(ValueError):
    """User-supplied input (text, image, file) cannot be processed."""


class GenerationError(RuntimeError):
    """The synthetic-scene sampler exhausted its retry budget."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or does not match the model."""


class TrainingAborted(RuntimeError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, message, epoch=None, batch=None, terms=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.terms = terms
