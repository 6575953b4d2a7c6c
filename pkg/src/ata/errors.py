"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised for malformed inputs: bad files, non-finite values, shape mismatches."""


class AtafError(DataError):
    """Raised when an ATAF container fails to parse or validate."""
