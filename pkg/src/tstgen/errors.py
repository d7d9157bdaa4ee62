"""Exception hierarchy shared across the toolkit."""


class TSTError(Exception):
    """Base class for every error raised by tstgen."""


class ShapeError(TSTError, ValueError):
    pass


class ContractError(TSTError, ValueError):
    pass


class ConfigError(TSTError, ValueError):
    pass


class WindowError(ConfigError):
    pass


class DataError(TSTError, ValueError):
    pass


class DegenerateInputError(TSTError, ValueError):
    pass


class CheckpointError(TSTError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass
