# exceptions.py


class SepalError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(SepalError):
    """A shape, pooling, dataset or schedule setting is invalid."""


class UsageError(SepalError):
    """An API was called in a state where it cannot do its job."""


class ValidationError(SepalError):
    """Input files (manifest rows, tensor files) failed to parse or validate."""


class UnsupportedMetricError(SepalError):
    """The requested query metric needs data the prediction does not carry."""
