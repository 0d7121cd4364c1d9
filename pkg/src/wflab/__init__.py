"""wflab: seamless website fingerprinting on packet jitter and size, with domain
adaptation, finetuning, traffic defenses and an experiment harness."""
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    WFLabError,
)
from .traffic import SampleSet, Trace, extract_windows, read_dataset, write_dataset

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FormatError",
    "NumericError",
    "SampleSet",
    "Trace",
    "WFLabError",
    "extract_windows",
    "read_dataset",
    "write_dataset",
]
