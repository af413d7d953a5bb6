from __future__ import annotations

import logging
from datetime import datetime, timezone

MANAGER_WARNING = 35
logging.addLevelName(MANAGER_WARNING, "MANAGER_WARNING")

ROOT = "ensemble"


class _Formatter(logging.Formatter):
    def format(self, record):
        record.component = record.name.rsplit(".", 1)[-1]
        return super().format(record)

    def formatTime(self, record, datefmt=None):
        return datetime.fromtimestamp(record.created, timezone.utc).isoformat(timespec="milliseconds")


def parse_level(level) -> int:
    if isinstance(level, int):
        return level
    value = logging.getLevelName(str(level).upper())
    if not isinstance(value, int):
        raise ValueError(f"unknown log level {level!r}")
    return value


def attach_file_log(path, level="INFO") -> logging.Handler:
    """Send package logs to ``path`` as ``<ISO8601> <LEVEL> <component>: <message>``."""
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(_Formatter("%(asctime)s %(levelname)s %(component)s: %(message)s"))
    handler.setLevel(parse_level(level))
    logger = logging.getLogger(ROOT)
    logger.addHandler(handler)
    logger.setLevel(min(logger.level or logging.WARNING, handler.level))
    return handler


def detach(handler: logging.Handler) -> None:
    logging.getLogger(ROOT).removeHandler(handler)
    handler.close()
