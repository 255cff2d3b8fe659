"""Configure logging for pyfedaf.

Adds a formatter which prepends the PID of the logging process to any output when
running inside a worker process, which is helpful when trials are fanned out with
``--jobs``.
"""

import logging
import sys
from multiprocessing import current_process

_LOGGER_NAME = "pyfedaf"


class PIDFormatter(logging.Formatter):
    """Logging formatter which prepends the PID of the logging process to any output."""

    _mylogger = logging.getLogger(_LOGGER_NAME)

    def format(self, record):  # noqa
        """Set the format of the log."""
        fmt = "{asctime} | {levelname} |"

        if self._mylogger.level <= logging.DEBUG:
            fmt += " {filename}::{funcName}() |"

        if current_process().name != "MainProcess":
            fmt += " pid={process} |"

        self._style = logging.StrFormatStyle(fmt + " {message}")

        return logging.Formatter.format(self, record)


def configure_logging(level=None):
    """Configure logging for the 'pyfedaf' logger.

    Calling this more than once does not stack handlers.
    """
    logger = logging.getLogger(_LOGGER_NAME)
    if not any(isinstance(h.formatter, PIDFormatter) for h in logger.handlers):
        hdlr = logging.StreamHandler(sys.stderr)
        hdlr.setFormatter(PIDFormatter())
        logger.addHandler(hdlr)

    if level is not None:
        logger.setLevel(level)

    return logger
