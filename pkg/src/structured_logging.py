"""
Structured logging con contesto per il tracking delle run
"""
import logging
import threading
import uuid
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

# Thread-local storage per contesto della run
_context = threading.local()


def new_run_id() -> str:
    return uuid.uuid4().hex[:8]


def set_run_context(run_id: str, command: str):
    """
    Imposta contesto della run per logging strutturato.
    """
    _context.run_id = run_id
    _context.command = command


def clear_run_context():
    _context.run_id = None
    _context.command = None


def get_run_context() -> Dict[str, Any]:
    """
    Ottieni contesto della run corrente.
    """
    return {
        "run_id": getattr(_context, 'run_id', None),
        "command": getattr(_context, 'command', None)
    }


def format_with_context(message: str, run_id: Optional[str] = None, command: Optional[str] = None, **kwargs) -> str:
    ctx = get_run_context()
    final_run_id = run_id or ctx.get('run_id')
    final_command = command or ctx.get('command')

    parts = [message]
    if final_run_id:
        parts.append(f"[run_id={final_run_id}]")
    if final_command:
        parts.append(f"[command={final_command}]")
    if kwargs:
        parts.extend(f"{k}={v}" for k, v in kwargs.items())
    return " ".join(parts)


def log_with_context(
    level: str,
    message: str,
    run_id: Optional[str] = None,
    command: Optional[str] = None,
    **kwargs
):
    """
    Log con contesto strutturato.

    Args:
        level: Livello log ('info', 'warning', 'error', 'debug')
        message: Messaggio da loggare
        run_id: ID della run (opzionale, usa contesto se non fornito)
        command: comando in esecuzione (opzionale, usa contesto se non fornito)
        **kwargs: Campi aggiuntivi da includere nel log
    """
    log_func = getattr(logger, level.lower(), logger.info)
    log_func(format_with_context(message, run_id=run_id, command=command, **kwargs))
