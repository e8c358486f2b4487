"""Exception hierarchy.

Each family carries the process exit code the command line maps it to.
"""


class A2AError(Exception):
    exit_code = 1


class ConfigError(A2AError):
    exit_code = 2


class DataError(A2AError):
    exit_code = 3


class EmptyFeatureError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class FormatError(DataError):
    pass


class AdaptationError(DataError):
    pass


class NumericError(A2AError):
    exit_code = 4


class InternalError(A2AError):
    exit_code = 1
