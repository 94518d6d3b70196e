"""Exception hierarchy shared by every stage of the pipeline."""


class KermitError(Exception):
    """Base class for all errors raised by this package."""


class DatasetError(KermitError):
    """A dataset directory could not be loaded."""


class ReferentialIntegrityError(DatasetError):
    """A triple references an entity or relation that was never declared."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class RegistryError(KermitError):
    """The inverse-relation registry is malformed."""


class RegistryLookupError(RegistryError, KeyError):
    """A relation is not present in the registry."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TemplateError(KermitError):
    """A prompt template is missing slots or has duplicates."""


class GenerationError(KermitError):
    """The text-generation service failed after all retries."""

    def __init__(self, message, query_key=None):
        self.query_key = query_key
        super().__init__(message if query_key is None else f"{message} (query {query_key})")


class DimensionError(KermitError, ValueError):
    """Input does not fit the model's dimensions."""


class NumericError(KermitError, ArithmeticError):
    """Non-finite or degenerate numeric input."""


class BatchError(KermitError, ValueError):
    """A training batch violates its contract."""


class ConfigError(KermitError, ValueError):
    """Invalid run configuration."""


class DataError(KermitError):
    """Required data (e.g. a predictive description) is missing."""


class ContractError(KermitError, ValueError):
    """A function precondition was violated by the caller."""


class CheckpointError(KermitError):
    """A checkpoint file is corrupt or has an unsupported version."""
