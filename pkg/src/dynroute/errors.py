"""Exception hierarchy shared by all dynroute modules."""


class DynrouteError(Exception):
    """Base class for all dynroute errors."""


class ConfigurationError(DynrouteError):
    """A spec, config file, or op was given structurally invalid settings."""


class UsageError(DynrouteError):
    """An API was called with arguments that violate its contract."""


class DataError(DynrouteError):
    """An input record (image, annotation) is malformed."""


class NumericError(DynrouteError):
    """A numeric failure (NaN/inf) was detected during optimization."""
