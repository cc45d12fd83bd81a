"""Exception hierarchy. CLI exit codes hang off these classes."""


class SynthVisionError(Exception):
    exit_code = 1


class ConfigError(SynthVisionError):
    exit_code = 2


class DataError(SynthVisionError):
    exit_code = 3


class DimensionError(SynthVisionError, ValueError):
    pass


class ParameterError(SynthVisionError, ValueError):
    pass


class ManifestParseError(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"{message} (line {line})")
        self.line = line


class SchemaError(ConfigError):
    pass


class ImageFormatError(DataError):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode image {path}: {reason}")
        self.path = path


class ShortageError(DataError):
    def __init__(self, available, required):
        super().__init__(f"only {available} candidates available, at least {required} required")
        self.available = available
        self.required = required


class IntegrityError(DataError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class ConfigMismatchError(ConfigError):
    pass


class NonFiniteError(SynthVisionError, FloatingPointError):
    pass
