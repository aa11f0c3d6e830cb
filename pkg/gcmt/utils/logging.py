# # Follow an adaptation run on stderr
# export GCMT_LOG_LEVEL=INFO

# # Per-iteration losses as JSON lines, also kept in a file
# export GCMT_LOG_LEVEL=DEBUG
# export GCMT_LOG_OUTPUT=both
# export GCMT_LOG_FORMAT=json
# export GCMT_LOG_FILE=adapt_run.jsonl

# # Library use (the default): nothing is emitted
# unset GCMT_LOG_LEVEL


import json
import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, List

from loguru import logger

HUMAN_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)

OUTPUTS = ("stderr", "stdout", "file", "both")


@dataclass(frozen=True)
class LogSettings:
    """Logging switches read from `GCMT_*` environment variables."""

    enabled: bool
    level: str
    output: str
    fmt: str
    file: str

    @classmethod
    def from_env(cls) -> "LogSettings":
        level = os.environ.get("GCMT_LOG_LEVEL", "").upper()
        disabled = os.environ.get("GCMT_DISABLE_LOGGING", "").lower() in ("true", "1", "yes")
        output = os.environ.get("GCMT_LOG_OUTPUT", "stderr").lower()
        return cls(
            enabled=bool(level) and not disabled,
            level=level or "INFO",
            output=output if output in OUTPUTS else "stderr",
            fmt=os.environ.get("GCMT_LOG_FORMAT", "human").lower(),
            file=os.environ.get("GCMT_LOG_FILE", "gcmt.log"),
        )

    def sinks(self) -> List[Any]:
        targets: List[Any] = []
        if self.output in ("stdout", "both"):
            targets.append(sys.stdout)
        if self.output in ("stderr", "both"):
            targets.append(sys.stderr)
        if self.output in ("file", "both"):
            targets.append(self.file)
        return targets


def json_format(record: Dict[str, Any]) -> str:
    """One JSON object per line; `extra` carries bound context such as the epoch."""
    payload = {
        "time": record["time"].isoformat(),
        "level": record["level"].name,
        "message": record["message"],
        "module": record["module"],
        "function": record["function"],
        "line": record["line"],
        "thread": record["thread"].name,
        "extra": record["extra"],
    }
    if record["exception"] is not None:
        payload["exception"] = {
            "type": record["exception"].type.__name__,
            "value": str(record["exception"].value),
        }

    # loguru treats the returned string as a format template
    return json.dumps(payload, default=str).replace("{", "{{").replace("}", "}}") + "\n"


def setup_logger(settings: LogSettings) -> None:
    """Replace every loguru sink according to `settings`."""
    logger.remove()
    if not settings.enabled:
        logger.disable("gcmt")
        return

    logger.enable("gcmt")
    fmt = json_format if settings.fmt == "json" else HUMAN_FORMAT
    for sink in settings.sinks():
        logger.add(sink, format=fmt, level=settings.level)


def get_logger():
    """Get the configured logger."""
    return logger


# Set up the logger when this module is imported
setup_logger(LogSettings.from_env())
