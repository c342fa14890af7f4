import logging

import pytest

from src.logging_config import APP_LOGGER, attach_run_log, get_logger, setup_logging


@pytest.fixture
def restore_logging():
    """Drop the handlers a test installs and put the root level back"""
    root = logging.getLogger()
    level = root.level
    yield
    for logger in (root, logging.getLogger(APP_LOGGER)):
        for handler in list(logger.handlers):
            if type(handler) in (logging.FileHandler, logging.StreamHandler):
                logger.removeHandler(handler)
                handler.close()
    root.setLevel(level)


def test_setup_logging_writes_the_session_file(tmp_path, monkeypatch, restore_logging):
    monkeypatch.delenv("LOG_LEVEL", raising=False)
    log_file = tmp_path / "logs" / "session.log"
    setup_logging("INFO", log_file)
    get_logger("trainer").info("step 10: return 1.00")
    get_logger("trainer").debug("hidden at INFO")
    for handler in logging.getLogger().handlers:
        handler.flush()

    text = log_file.read_text(encoding="utf-8")
    assert "vitrl.trainer - INFO - step 10: return 1.00" in text
    assert "hidden at INFO" not in text
    assert logging.getLogger("torch").level == logging.WARNING


def test_environment_level_wins(tmp_path, monkeypatch, restore_logging):
    monkeypatch.setenv("LOG_LEVEL", "debug")
    setup_logging("WARNING", tmp_path / "session.log")
    assert logging.getLogger().level == logging.DEBUG


def test_run_log_mirrors_application_records(tmp_path, monkeypatch, restore_logging):
    monkeypatch.delenv("LOG_LEVEL", raising=False)
    setup_logging("INFO", tmp_path / "session.log")
    handler = attach_run_log(tmp_path / "run")
    get_logger("sac").info("critic updated")
    logging.getLogger("elsewhere").warning("not ours")
    handler.flush()

    text = (tmp_path / "run" / "train.log").read_text(encoding="utf-8")
    assert "vitrl.sac - INFO - critic updated" in text
    assert "not ours" not in text
