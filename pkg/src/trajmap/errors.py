"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class TrajmapError(Exception):
    exit_code = 1


class InvariantError(TrajmapError):
    exit_code = 1


class ConfigError(TrajmapError):
    exit_code = 2


class ShapeError(TrajmapError, ValueError):
    exit_code = 2


class DataIOError(TrajmapError, OSError):
    exit_code = 3


class NumericError(TrajmapError, ArithmeticError):
    exit_code = 4


class DegenerateMaskError(NumericError):
    pass


class CheckpointError(TrajmapError):
    exit_code = 5


class DatasetError(TrajmapError):
    exit_code = 6


class InsufficientDataError(DatasetError):
    pass


class ProtocolError(TrajmapError, ValueError):
    exit_code = 2


class OrderingError(ProtocolError):
    pass
