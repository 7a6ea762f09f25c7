"""
structlog setup used by the CLI and the demo script
"""

import logging
import os
import sys

import structlog


def configure_logging(level: str = None) -> None:
    """Route structured logs to stderr; stdout carries command results only"""
    level_name = (level or os.getenv("NORMTWEAK_LOG_LEVEL", "INFO")).upper()
    numeric_level = getattr(logging, level_name, logging.INFO)

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
