"""Class-incremental audio-visual source separation on a small numpy autodiff engine."""

from .config import ExperimentConfig, load_config
from .errors import (ConfigError, ContractError, ContSepError, DimensionError, IngestionError,
                     InputError, NumericError, OutputExistsError)

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "load_config", "ConfigError", "ContractError", "ContSepError",
    "DimensionError", "IngestionError", "InputError", "NumericError", "OutputExistsError",
]
