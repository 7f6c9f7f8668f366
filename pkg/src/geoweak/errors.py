class GeoweakError(Exception):
    """Base class for pipeline errors."""


class InputError(GeoweakError, ValueError):
    """A precondition on caller-supplied data was violated."""


class RetryableError(GeoweakError):
    """Transient failure of an external service; the call may be retried."""


class BackendUnavailable(RetryableError):
    pass


class NotFoundError(GeoweakError, LookupError):
    pass


class DecodeError(GeoweakError):
    """A raster or response payload could not be decoded."""
