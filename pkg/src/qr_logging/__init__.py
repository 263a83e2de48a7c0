from .qr_logging import configure_logging, get_logger, logging_config_file

__all__ = ["configure_logging", "get_logger", "logging_config_file"]
