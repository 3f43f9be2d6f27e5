from __future__ import annotations

import logging
import sys
import time
import typing
from typing import Dict, Tuple

LOG = logging.getLogger("desk-sim")
TRAIN_LOG = logging.getLogger("desk-sim.trainer")

# Verbosity runs from 0 to 50. Each channel switches to DEBUG once the
# verbosity reaches its threshold and otherwise sits at its quiet level.
CHANNELS = {
    TRAIN_LOG.name: (10, logging.INFO),
    LOG.name: (20, logging.INFO),
    "PIL": (40, logging.WARNING),
    "asyncio": (40, logging.WARNING),
    "": (40, logging.INFO),
}  # type: Dict[str, Tuple[int, int]]

MAX_VERBOSITY = 50

_verbosity = 0


def FAIL(message: str) -> typing.NoReturn:
    LOG.error(f"=== FATAL ERROR: {message} ===")

    sys.exit(9)


def setup_default_logging():
    """
    UTC timestamps on standard error. Standard output stays reserved for
    command results.
    """
    logging.Formatter.converter = time.gmtime

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] (%(name)s) %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S%z",
        stream=sys.stderr,
    )

    set_log_level(0)


def get_log_level() -> int:
    return _verbosity


def set_log_level(level: int):
    global _verbosity

    if not 0 <= level <= MAX_VERBOSITY:
        FAIL(f"Requested log level, {level}, is out of the valid range [0,{MAX_VERBOSITY}].")

    if level != _verbosity:
        LOG.info("Changing log level from %d to %d", _verbosity, level)

    for name, (threshold, quiet) in CHANNELS.items():
        logging.getLogger(name).setLevel(logging.DEBUG if level >= threshold else quiet)

    _verbosity = level
