"""
Settings loader for the two-level HLM workflow.

All tunables live in config/settings.yaml. Components accept an optional
config path and fall back to the repository default.
"""

import logging
from pathlib import Path
from typing import Optional

import yaml

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parents[2] / "config" / "settings.yaml"

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def load_settings(config_path: Optional[str] = None) -> dict:
    """Load the YAML settings file."""
    path = Path(config_path) if config_path else DEFAULT_CONFIG_PATH
    with open(path, 'r') as f:
        return yaml.safe_load(f)


def configure_logging(settings: dict, verbose: Optional[bool] = None) -> None:
    """Configure root logging on stderr, plus a log file when one is configured."""
    processing = settings.get('processing', {})
    if verbose is None:
        verbose = processing.get('verbose', True)

    handlers = [logging.StreamHandler()]
    log_file = processing.get('log_file')
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
