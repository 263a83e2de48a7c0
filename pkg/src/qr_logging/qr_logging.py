import configparser
import logging
import logging.config
from pathlib import Path
from typing import Sequence

logging_config_file = Path(__file__).with_name("logging-config.ini")


def configure_logging(level: str = "INFO", json_logging: bool = False, loggers_to_reset: Sequence[str] = ()) -> None:
    """Configure global logging for quadrecon runs
    Args:
        level: The level to set the root logger to
        json_logging: Whether to emit one JSON object per record (for log shippers and sweeps)
        loggers_to_reset:
            Logger names to re-point at the root handlers after configuration.
            Import the modules that create them first, or they will be configured again on import.
    """

    # fileConfig takes a ConfigParser directly, so the level and handler swap happen in memory
    logging_config = configparser.ConfigParser()
    logging_config.read(logging_config_file)
    logging_config["logger_root"]["level"] = level.upper()

    if json_logging:
        for section in logging_config.sections():
            if section.startswith("logger_"):
                logging_config[section]["handlers"] = "console_json"

    logging.config.fileConfig(logging_config, disable_existing_loggers=False)

    root_logger = logging.getLogger()
    for logger_name in loggers_to_reset:
        logger = logging.getLogger(logger_name)
        logger.handlers = root_logger.handlers
        logger.propagate = False
        logger.setLevel(root_logger.level)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)
