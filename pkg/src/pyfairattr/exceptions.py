class FairAttrError(Exception):
    """Generic exception."""


class ConfigurationError(FairAttrError):
    """When shapes, spans, indices or config values do not fit together."""


class EmptyInputError(FairAttrError):
    """When a batch or record set has no elements."""


class UnsupportedBackboneError(FairAttrError):
    """When a backbone cannot be split into stages, e.g. it has no convolutions."""


class SequencingError(FairAttrError):
    """When a training step runs before the step that produces its inputs."""


class ModelStateError(FairAttrError):
    """When inference is asked of a model that was never fitted or loaded."""


class UndefinedMetricError(FairAttrError):
    """When a fairness metric is not defined for the given records."""


class DegenerateMetricError(UndefinedMetricError):
    """When a ratio metric would divide by zero."""


class UnsupportedArityError(UndefinedMetricError):
    """When a two-group metric is given a different number of protected groups."""


class ManifestValidationError(FairAttrError):
    """When a dataset manifest fails validation, errors are itemized."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class DatasetError(FairAttrError):
    """When samples handed to training do not match the configured classes."""


class CheckpointIncompatibleError(FairAttrError):
    """When a checkpoint was written by another format version or model shape."""


class NonFiniteLossError(FairAttrError):
    """When a training loss becomes nan or inf."""


class UsageError(FairAttrError):
    """When the command line is malformed."""
