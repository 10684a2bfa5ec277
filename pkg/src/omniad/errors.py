"""Exception types shared across the package."""


class OmniError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OmniError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ConfigError(OmniError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(OmniError, ValueError):
    """An API contract was violated (e.g. non-scalar loss, missing field)."""


class MetricError(OmniError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class FormatError(OmniError, ValueError):
    """A file does not conform to the expected binary or text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDiverged(OmniError, RuntimeError):
    """Training hit a non-finite loss; carries the failing step index."""

    def __init__(self, step, checkpoint_dir=None):
        msg = f"non-finite loss at step {step}"
        if checkpoint_dir is not None:
            msg += f"; last good checkpoint written to {checkpoint_dir}"
        super().__init__(msg)
        self.step = step
        self.checkpoint_dir = checkpoint_dir
