"""Exception hierarchy shared by every module.

The CLI maps these onto its documented exit codes, so new failure modes
should subclass one of them rather than raising bare builtins.
"""


class HFRError(Exception):
    """Base class for all package errors."""


class ConfigError(HFRError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(HFRError, ValueError):
    """Tensor or array shapes do not line up."""


class DomainError(HFRError, ValueError):
    """Input outside the mathematical domain of an operation (empty, single-class, ...)."""


class NumericError(HFRError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataError(HFRError, IOError):
    """Dataset layout or file content problems."""


class WeightsUnavailableError(HFRError, IOError):
    """Backbone weights could not be located or downloaded."""


class TrainingDivergedError(NumericError):
    """Raised when the training loss becomes non-finite.

    Attributes:
        batch_index: index of the offending minibatch within its epoch.
        epoch: 1-based epoch number.
        level_losses: per-level losses at the time of failure.
    """

    def __init__(self, epoch: int, batch_index: int, level_losses):
        self.epoch = epoch
        self.batch_index = batch_index
        self.level_losses = list(level_losses)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; "
            f"per-level losses: {self.level_losses}"
        )
