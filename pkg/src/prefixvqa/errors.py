"""Exception types raised across the package."""


class DimensionError(ValueError):
    pass


class DegenerateMaskError(ValueError):
    pass


class LengthError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class VariantError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class FormatError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestReferenceError(ValueError):
    """An image id or (image_id, question) pair does not resolve cleanly."""


class DataError(ValueError):
    pass


class InputError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass
