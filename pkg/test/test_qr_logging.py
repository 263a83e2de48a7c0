import configparser
import logging
import logging.config
from pathlib import Path
from unittest.mock import MagicMock, patch

import pytest

from qr_logging import configure_logging, get_logger, logging_config_file


class TestConfigureLogging:
    """Test the configure_logging function"""

    @pytest.fixture
    def mock_config_parser(self):
        """Mock ConfigParser for testing"""
        with patch("qr_logging.qr_logging.configparser.ConfigParser") as mock_cp:
            config = MagicMock()
            mock_cp.return_value = config
            config.sections.return_value = ["logger_root", "logger_quadrecon", "handler_console_string", "handler_console_json"]
            sections = {
                "logger_root": {"handlers": "console_string"},
                "logger_quadrecon": {"handlers": "console_string"},
            }
            config.__getitem__.side_effect = sections.__getitem__
            config.sections_dict = sections
            yield config

    @pytest.fixture
    def mock_file_config(self):
        """Mock logging.config.fileConfig"""
        with patch("qr_logging.qr_logging.logging.config.fileConfig") as mock_fc:
            yield mock_fc

    def test_configure_logging_default_parameters(self, mock_config_parser, mock_file_config):
        configure_logging()

        mock_config_parser.read.assert_called_once_with(logging_config_file)
        assert mock_config_parser.sections_dict["logger_root"]["level"] == "INFO"
        mock_file_config.assert_called_once_with(mock_config_parser, disable_existing_loggers=False)

    def test_configure_logging_custom_level(self, mock_config_parser, mock_file_config):
        configure_logging(level="debug")

        assert mock_config_parser.sections_dict["logger_root"]["level"] == "DEBUG"

    def test_configure_logging_json_logging_true(self, mock_config_parser, mock_file_config):
        configure_logging(json_logging=True)

        mock_config_parser.sections.assert_called_once()
        assert mock_config_parser.sections_dict["logger_root"]["handlers"] == "console_json"
        assert mock_config_parser.sections_dict["logger_quadrecon"]["handlers"] == "console_json"

    def test_configure_logging_json_logging_false(self, mock_config_parser, mock_file_config):
        configure_logging(json_logging=False)

        mock_config_parser.sections.assert_not_called()
        assert mock_config_parser.sections_dict["logger_root"]["handlers"] == "console_string"

    def test_configure_logging_with_loggers_to_reset(self, mock_config_parser, mock_file_config):
        root_logger = MagicMock()
        root_logger.handlers = [MagicMock()]
        root_logger.level = logging.INFO
        test_logger = MagicMock()

        with patch("qr_logging.qr_logging.logging.getLogger") as mock_get_logger:
            mock_get_logger.side_effect = [root_logger, test_logger]

            configure_logging(loggers_to_reset=["quadrecon.trainer"])

            assert test_logger.handlers == root_logger.handlers
            assert test_logger.propagate is False
            test_logger.setLevel.assert_called_once_with(root_logger.level)

    def test_configure_logging_empty_loggers_to_reset(self, mock_config_parser, mock_file_config):
        with patch("qr_logging.qr_logging.logging.getLogger") as mock_get_logger:
            mock_get_logger.return_value = MagicMock()

            configure_logging(loggers_to_reset=[])

            assert mock_get_logger.call_count == 1


class TestGetLogger:
    @patch("qr_logging.qr_logging.logging.getLogger")
    def test_get_logger(self, mock_get_logger):
        expected_logger = MagicMock()
        mock_get_logger.return_value = expected_logger

        result = get_logger("quadrecon.render")

        mock_get_logger.assert_called_once_with("quadrecon.render")
        assert result == expected_logger


class TestLoggingConfigFile:
    def test_logging_config_file_path(self):
        expected_path = Path(__file__).parent.parent / "src" / "qr_logging" / "logging-config.ini"
        assert logging_config_file == expected_path
        assert logging_config_file.exists()

    def test_both_handlers_are_declared(self):
        config = configparser.ConfigParser()
        config.read(logging_config_file)
        assert config["handlers"]["keys"] == "console_string,console_json"
        assert config["formatter_json"]["class"] == "pythonjsonlogger.json.JsonFormatter"
