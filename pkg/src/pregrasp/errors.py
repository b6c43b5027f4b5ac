"""Exception types shared across the package."""


class DataError(Exception):
    """Bad input data: malformed mesh, missing annotation, invalid config."""


class CacheError(DataError):
    """A cache file exists but cannot be trusted."""


class StateError(Exception):
    """An operation that violates an object's lifecycle, like stepping a
    finished episode."""


class DivergenceError(Exception):
    """Training left the numerically healthy region."""
