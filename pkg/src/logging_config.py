"""
Configurazione logging colorato per la CLI di benchmark e pre-training
"""
import logging
import sys
from typing import Union

import colorlog

LOG_FORMAT = '%(log_color)s[%(levelname)s]%(reset)s %(cyan)s{service}%(reset)s | %(message)s'

LEVEL_COLORS = {
    'DEBUG': 'white',
    'INFO': 'blue',
    'WARNING': 'yellow',
    'ERROR': 'red',
    'CRITICAL': 'red,bg_white',
}

# logger rumorosi: solo WARNING, sul nostro handler
QUIET_LOGGERS = ('py.warnings', 'matplotlib', 'numba')


def resolve_level(level: Union[str, int]) -> int:
    """`"info"`, `"INFO"` o `logging.INFO` → valore numerico; nome sconosciuto → INFO."""
    if isinstance(level, int):
        return level
    value = logging.getLevelName(level.strip().upper())
    return value if isinstance(value, int) else logging.INFO


def setup_colored_logging(service_name: str = "bestrq-bench", level: Union[str, int] = logging.INFO):
    """
    Configura logging colorato con:
    - ROSSO per ERROR
    - BLU per INFO/SUCCESS
    - GIALLO per WARNING
    - Normale per DEBUG

    Chiamata più volte (test, comandi in sequenza) sostituisce l'handler invece di duplicarlo.
    """
    handler = colorlog.StreamHandler(sys.stdout)
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(colorlog.ColoredFormatter(
        LOG_FORMAT.format(service=service_name),
        reset=True,
        log_colors=LEVEL_COLORS,
        style='%',
    ))

    root_logger = logging.getLogger()
    root_logger.setLevel(resolve_level(level))
    root_logger.handlers = [handler]

    # RuntimeWarning di numpy (overflow, divisioni per zero) passano dal logging
    logging.captureWarnings(True)
    for logger_name in QUIET_LOGGERS:
        lib_logger = logging.getLogger(logger_name)
        lib_logger.handlers = [handler]
        lib_logger.setLevel(logging.WARNING)
        lib_logger.propagate = False

    return root_logger
