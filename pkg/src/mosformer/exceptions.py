"""Exception types raised across the package."""


class MosformerError(Exception):
    pass


class DimensionError(MosformerError, ValueError):
    """Operand shapes are incompatible with an operation."""


class InputError(MosformerError, ValueError):
    """A caller-supplied argument is out of its valid range."""


class DataError(MosformerError, ValueError):
    """Label or volume content violates its declared schema."""


class ConfigError(MosformerError, ValueError):
    """A configuration file or checkpoint disagrees with the model layout."""


class FormatError(MosformerError, ValueError):
    """A binary file does not follow its on-disk layout."""


class TrainingDiverged(MosformerError, RuntimeError):
    """Raised when the training loss becomes non-finite."""
