"""Exception types shared across the package.

Each family maps onto one CLI exit code (see ``covernet.cli``).
"""


class CovernetError(Exception):
    exit_code = 1


# -- shape / parameter problems inside kernels --------------------------------

class ShapeError(CovernetError, ValueError):
    """A tensor dimension disagrees with what a kernel or layer expects."""

    exit_code = 5

    def __init__(self, message, axis=None, layer=None):
        super().__init__(message)
        self.axis = axis
        self.layer = layer


class InvalidParameterError(CovernetError, ValueError):
    exit_code = 5


class LabelError(CovernetError, ValueError):
    exit_code = 2

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class NumericalError(CovernetError, ArithmeticError):
    exit_code = 5


class DegenerateProjectionError(NumericalError):
    pass


# -- checkpoint format ---------------------------------------------------------

class CheckpointError(CovernetError):
    exit_code = 4


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class WeightShapeError(CheckpointError, ShapeError):
    exit_code = 2


class UnknownTensorError(CheckpointError, KeyError):
    exit_code = 2


class MissingTensorError(CheckpointError, KeyError):
    exit_code = 2


# -- data pipeline ---------------------------------------------------------------

class ManifestError(CovernetError, ValueError):
    """Malformed manifest/class-table row; ``line`` is 1-based."""

    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownClassError(ManifestError):
    pass


class UnderpopulatedClassError(CovernetError, ValueError):
    exit_code = 2

    def __init__(self, class_name, available, required):
        super().__init__(
            f"class {class_name!r} has {available} records, {required} required"
        )
        self.class_name = class_name
        self.available = available
        self.required = required


class DataProtocolError(CovernetError, ValueError):
    exit_code = 2


class ImageDecodeError(CovernetError, OSError):
    exit_code = 4

    def __init__(self, message, record_id=None):
        super().__init__(message)
        self.record_id = record_id


class ConfigError(CovernetError, ValueError):
    exit_code = 3
