# Exceptions shared by every module. The CLI maps ConfigError to exit 2 and any
# other LabError to exit 3.


class LabError(Exception):
    pass


class ConfigError(LabError):
    pass


class ShapeError(LabError, ValueError):
    pass


class SingularSystemError(LabError):
    pass


class NonConvergenceError(LabError):
    def __init__(self, message, estimate=None, vector=None):
        super().__init__(message)
        self.estimate = estimate
        self.vector = vector


class DivergenceError(LabError):
    pass


class SequenceTooLongError(LabError):
    pass


class CheckpointFormatError(LabError):
    pass


class CorpusError(LabError):
    pass


class MetricError(LabError, ValueError):
    pass


class LayerError(LabError, ValueError):
    pass
