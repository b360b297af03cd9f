import sys

from loguru import logger

from .config import settings


def setup_logging(level: str | None = None, serialize: bool | None = None) -> None:
    """Install the stderr sink used by every command."""
    logger.remove()
    logger.add(
        sys.stderr,
        level=(level or settings.log_level).upper(),
        format=settings.log_format,
        serialize=settings.log_serialize if serialize is None else serialize,
        backtrace=settings.debug,
        diagnose=settings.debug,
    )
