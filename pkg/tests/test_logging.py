import logging

from companion.logging import getLogger


def test_single_handler():
    getLogger(name="twice", level="INFO")
    log = getLogger(name="twice", level="DEBUG")
    assert log.name == "companion.twice"
    assert log.level == logging.DEBUG
    assert len(log.handlers) == 1
    assert log.handlers[0].level == logging.DEBUG


def test_records(caplog):
    log = getLogger(name="records", level="WARNING")
    log.info("hidden")
    log.warning("shown")
    assert "shown" in caplog.text
    assert "hidden" not in caplog.text
