"""Command line interface: configuration, orchestration and reproducible output."""

from .config import ConfigError, RunConfig, load_config
from .main import main, run
from .plotdata import emit_plotdata

__all__ = ["ConfigError", "RunConfig", "emit_plotdata", "load_config", "main", "run"]
