"""Exceptions raised across the `HyperEHR` pipeline.

Every error carries the exit code the command line reports for it.
"""


class HyperEHRError(Exception):
    exit_code = 1

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def __str__(self):
        message = super().__str__()
        if not self.context:
            return message
        details = ', '.join(f'{key}={value}' for key, value in sorted(self.context.items()))
        return f'{message} ({details})'


class ConfigError(HyperEHRError):
    exit_code = 2


class DataError(HyperEHRError):
    exit_code = 3


class CorpusExhaustedError(DataError):
    pass


class CorpusFormatError(DataError):
    pass


class HierarchyError(DataError):
    pass


class InputError(DataError):
    pass


class DimensionError(DataError):
    pass


class LineageError(DataError):
    pass


class BoundsError(DataError, IndexError):
    pass


class NumericFailure(HyperEHRError):
    exit_code = 4


class EmptyBatchError(NumericFailure, ValueError):
    pass


class ArtifactIOError(HyperEHRError):
    exit_code = 5
