"""Exception taxonomy shared across the package."""


class HsttnError(Exception):
    """Base class for all package errors."""


class ShapeError(HsttnError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(HsttnError):
    """A configuration value violates a documented invariant."""


class ContractError(HsttnError):
    """A caller broke an API precondition (not a shape problem)."""


class OracleError(HsttnError):
    """A verification oracle could not be evaluated (e.g. non-finite values)."""


class IngestError(HsttnError):
    """A dataset file could not be parsed into a record grid."""


class DatasetError(HsttnError):
    """A dataset is structurally valid but unusable (empty split, no valid cells)."""


class TrainingError(HsttnError):
    """Training diverged or received unusable gradients."""


class EvaluationError(HsttnError):
    """Evaluation was requested on an empty or fully-invalid sample set."""
