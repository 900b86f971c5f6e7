"""Package logger."""

import logging
import sys
from typing import Union

logger = logging.getLogger(__package__.split(".")[0])
logger.addHandler(logging.NullHandler())

_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
}


def set_log_level(verbose: Union[bool, int, str, None] = None):
    """Set the log level of the package logger.

    Parameters
    ----------
    verbose : bool | int | str | None
        ``True`` maps to INFO and ``False``/``None`` to WARNING. Strings are
        one of ``"debug"``, ``"info"``, ``"warning"`` or ``"error"``; integers
        are passed to :mod:`logging` unchanged.
    """
    if verbose is None or verbose is False:
        level = logging.WARNING
    elif verbose is True:
        level = logging.INFO
    elif isinstance(verbose, str):
        if verbose.lower() not in _LEVELS:
            raise ValueError(
                f"Unknown log level {verbose!r}; use one of {sorted(_LEVELS)}."
            )
        level = _LEVELS[verbose.lower()]
    else:
        level = int(verbose)
    logger.setLevel(level)


def add_stream_handler(stream=None):
    """Attach a console handler using the ``[LEVEL] message`` format.

    Parameters
    ----------
    stream : file-like, default=None
        Destination stream, :data:`sys.stderr` if None.

    Returns
    -------
    handler : logging.StreamHandler
        The attached handler, so callers can detach it again.
    """
    handler = logging.StreamHandler(sys.stderr if stream is None else stream)
    handler.setFormatter(logging.Formatter("[%(levelname)s] %(message)s"))
    logger.addHandler(handler)
    return handler
