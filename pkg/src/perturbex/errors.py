class PerturbexError(ValueError):
    """Base class for every error raised by perturbex."""


class DimensionError(PerturbexError):
    pass


class StateError(PerturbexError):
    pass


class NumericalError(PerturbexError):
    pass


class DatasetFormatError(PerturbexError):
    """A dataset file does not follow its binary layout."""


class MagicNumberError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class ConfigurationError(PerturbexError):
    """
    Invalid network geometry or run configuration.

    Attributes
    ----------
    path : str or None
        Configuration file the error was found in.
    line : int or None
        1-based line number inside ``path``.
    key : str or None
        Offending ``section.key``.
    """

    def __init__(self, message: str, path: str = None, line: int = None, key: str = None):
        self.path = path
        self.line = line
        self.key = key
        location = []
        if path is not None:
            location.append(str(path))
        if line is not None:
            location.append(f"line {line}")
        if key is not None:
            location.append(f"key '{key}'")
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)
