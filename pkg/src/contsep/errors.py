"""Exception hierarchy shared by every module of the package."""


class ContSepError(Exception):
    """Base class; ``kind`` is used for the CLI's machine-readable error JSON."""

    kind = "error"


class DimensionError(ContSepError, ValueError):
    kind = "dimension"


class NumericError(ContSepError, FloatingPointError):
    kind = "numeric"


class ContractError(ContSepError, RuntimeError):
    kind = "contract"


class ConfigError(ContSepError, ValueError):
    kind = "config"


class InputError(ContSepError, ValueError):
    kind = "input"


class IngestionError(InputError):
    kind = "ingestion"


class OutputExistsError(ContSepError, FileExistsError):
    kind = "output_exists"
