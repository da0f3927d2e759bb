class BanError(Exception):
    """Base class for every error raised by the change detection framework"""


class ConfigurationError(BanError):
    """Invalid run configuration or an inconsistent model assembly"""


class ShapeError(BanError):
    """Tensor shapes that do not agree with the configured geometry"""


class NumericError(BanError):
    """Non-finite values produced during a forward pass"""

    def __init__(self, message, block_index=None):
        super().__init__(message)
        self.block_index = block_index


class DataError(BanError):
    """Dataset layout, label values or split requests that cannot be honoured"""


class CheckpointError(BanError):
    """Checkpoint container missing keys or holding mismatched tensors"""


class TrainingDivergedError(BanError):
    """Loss became non-finite; carries the path of the diagnostics dump"""

    def __init__(self, message, iteration, diagnostics_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.diagnostics_path = diagnostics_path


class InferenceError(BanError):
    """Sliding-window bookkeeping left pixels uncovered"""
