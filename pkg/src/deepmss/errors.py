"""Exception hierarchy shared across the package.

Two broad families matter for exit-code mapping in the CLI:
``DataError`` (bad inputs, schemas, geometry) and ``NumericFault``
(NaN/blow-up during computation).
"""


class DeepMSSError(Exception):
    """Base class for all package-specific errors."""


class DataError(DeepMSSError):
    """Invalid or inconsistent input data / configuration."""


class SchemaError(DataError):
    """Manifest or config violates its declared schema."""


class LoadError(DataError):
    """A referenced file is missing or unreadable."""


class GeometryError(DataError):
    """Volume geometry precondition violated (degenerate axis, bad center...)."""


class EncodingError(DataError):
    """Clinical value cannot be encoded under the declared schema."""


class CoverageError(DataError):
    """External per-patient table does not cover the cohort."""


class ShapeMismatchError(DataError):
    """Tensor/array arguments disagree in shape."""


class ConfigError(DataError):
    """Invalid model or run configuration."""


class TransferError(DataError):
    """Checkpoint is incompatible with the target configuration."""


class DegenerateIntervalError(DataError):
    """Too few distinct times to build the requested interval scheme."""


class UndefinedMetricError(DataError):
    """Metric has no comparable pairs (e.g. all patients censored)."""


class ExtractionError(DataError):
    """Radiomics feature extraction impossible (e.g. empty mask)."""


class DegenerateCovariateError(DataError):
    """A covariate column is constant and cannot enter a Cox fit."""


class SeparationError(DataError):
    """Cox partial likelihood is monotone / Newton iteration did not converge."""


class SelectionError(DataError):
    """Feature selection could not be cross-validated."""


class NumericFault(DeepMSSError):
    """NaN or non-finite value produced during computation."""
