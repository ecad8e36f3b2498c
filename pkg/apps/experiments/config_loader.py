"""
INI experiment config files: one section per subcommand, flat key = value pairs
"""

import configparser
import logging
from pathlib import Path
from typing import Optional

logger = logging.getLogger(__name__)


class ConfigFileError(ValueError):
    """Unreadable config file"""


def load_section(path: Optional[str], section: str) -> dict:
    """
    Raw string values of ``[section]``; an absent section yields {}

    Raises:
        ConfigFileError: missing or malformed file
    """
    if not path:
        return {}
    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigFileError(f"Config file {file_path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, default_section='__defaults__')
    try:
        parser.read(file_path, encoding='utf-8')
    except configparser.Error as e:
        raise ConfigFileError(f"Cannot parse {file_path}: {e}") from e
    if not parser.has_section(section):
        logger.warning(f"{file_path} has no [{section}] section; using defaults")
        return {}
    return {key: value.strip() for key, value in parser.items(section)}
