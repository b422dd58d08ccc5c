"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class MedcoderError(Exception):
    exit_code = 1


class UsageError(MedcoderError):
    exit_code = 2


class DependencyError(MedcoderError):
    """A required upstream artifact or input is missing or incompatible."""

    exit_code = 3


class DataError(MedcoderError):
    exit_code = 4


class IngestError(DataError):
    pass
