import logging
import os
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

"""
Approach:

-> Library modules only ever call logging.getLogger(__name__) and attach
   structured fields through `extra=`.
-> The entry point calls configure_logging() once; records go to stderr as
   one JSON object per line, so stdout stays reserved for result data.

Example:

    configure_logging("INFO")
    logging.getLogger("src.core.contractivity").info(
        "discrete rate", extra={"scheme": "UBU", "h": 0.5, "rho": 0.99999})

    stderr:
    {"asctime": "...", "name": "src.core.contractivity", "levelname": "INFO",
     "message": "discrete rate", "scheme": "UBU", "h": 0.5, "rho": 0.99999}
"""

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"
_HANDLER_NAME = "langevin-json"


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    level = (level or os.environ.get("LANGEVIN_LOG_LEVEL") or "WARNING").upper()
    root = logging.getLogger("src")

    handler = next((h for h in root.handlers if h.get_name() == _HANDLER_NAME), None)
    if handler is None:
        handler = logging.StreamHandler(sys.stderr)
        handler.set_name(_HANDLER_NAME)
        handler.setFormatter(jsonlogger.JsonFormatter(LOG_FORMAT))
        root.addHandler(handler)

    root.setLevel(level)
    root.propagate = False
    return root
