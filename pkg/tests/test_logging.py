import logging

from src.logging_config import resolve_level, setup_colored_logging
from src.structured_logging import (
    clear_run_context,
    format_with_context,
    get_run_context,
    log_with_context,
    new_run_id,
    set_run_context,
)


def test_resolve_level():
    assert resolve_level("debug") == logging.DEBUG
    assert resolve_level("WARNING") == logging.WARNING
    assert resolve_level(logging.ERROR) == logging.ERROR
    assert resolve_level("chiacchierone") == logging.INFO


def test_setup_replaces_handlers():
    root = setup_colored_logging("test-svc", "warning")
    setup_colored_logging("test-svc", "warning")
    assert len(root.handlers) == 1
    assert root.level == logging.WARNING
    assert logging.getLogger("py.warnings").propagate is False
    setup_colored_logging("test-svc", "info")


def test_context_is_appended():
    set_run_context("abc123", "bench")
    try:
        message = format_with_context("[BENCH] cella", peak_bytes=64)
        assert message == "[BENCH] cella [run_id=abc123] [command=bench] peak_bytes=64"
    finally:
        clear_run_context()
    assert get_run_context() == {"run_id": None, "command": None}


def test_log_with_context_goes_through_logging(caplog):
    set_run_context(new_run_id(), "pretrain")
    try:
        with caplog.at_level(logging.INFO):
            log_with_context("info", "[PRETRAIN] passo 1/3", loss="2.0794")
    finally:
        clear_run_context()
    assert "[command=pretrain]" in caplog.text
    assert "loss=2.0794" in caplog.text


def test_run_ids_are_short_and_distinct():
    ids = {new_run_id() for _ in range(50)}
    assert len(ids) == 50
    assert all(len(run_id) == 8 for run_id in ids)
