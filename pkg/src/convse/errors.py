"""Exception hierarchy shared across the package."""


class ConvseError(Exception):
    """Base class for every error raised by convse."""


class ShapeError(ConvseError, ValueError):
    pass


class DegenerateRowError(ConvseError, ValueError):
    """A row whose L2 norm is too small to normalize."""

    def __init__(self, row: int, modality: str | None = None):
        self.row = row
        self.modality = modality
        where = f"{modality} row {row}" if modality else f"row {row}"
        super().__init__(f"{where} has (near-)zero L2 norm")


class NoNegativesError(ConvseError, ValueError):
    pass


class NumericError(ConvseError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(ConvseError, ValueError):
    pass


class DataError(ConvseError):
    """Dataset files are malformed or inconsistent."""


class FormatError(DataError):
    """Bad magic bytes or an unparseable record."""


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    def __init__(self, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"format version {found} is not supported (expected {expected})")


class DuplicateIdError(DataError):
    def __init__(self, ident: str):
        self.ident = ident
        super().__init__(f"duplicate id {ident!r}")


class StaleCacheError(ConvseError, ValueError):
    """A forward cache was handed to a network it did not come from."""
