class GrassError(Exception):
    pass


class ConfigError(GrassError, ValueError):
    """Invalid configuration or hyperparameter."""


class DataError(GrassError):
    """Malformed or inconsistent dataset contents."""


class ModelError(GrassError):
    pass


class UsageError(GrassError):
    """An API was called in a state it does not support."""


class NumericError(GrassError, FloatingPointError):
    pass
