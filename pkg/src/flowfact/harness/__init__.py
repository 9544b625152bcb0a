"""Experiment harness: file formats, configuration, sweeps and the CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .formats import FileFormatError
