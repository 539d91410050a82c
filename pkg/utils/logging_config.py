"""
Logging Configuration

Provides structured logging for the anonymization pipeline with:
- Structured output for parsing
- Per-frame performance tracking
- Environment-based levels and log file location
"""

import logging
import os
import sys
from datetime import datetime
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional


DEFAULT_LOG_FILE = 'logs/sign_anonymizer.log'


class StructuredFormatter(logging.Formatter):
    """
    Structured log formatter for better parsing and debugging.

    Format: [TIMESTAMP] [LEVEL] [MODULE:FUNCTION:LINE] MESSAGE {context}
    """

    def format(self, record: logging.LogRecord) -> str:
        if not hasattr(record, 'frame_context'):
            record.frame_context = ''

        timestamp = datetime.fromtimestamp(record.created).strftime('%Y-%m-%d %H:%M:%S.%f')[:-3]
        location = f"{record.module}:{record.funcName}:{record.lineno}"

        base_msg = f"[{timestamp}] [{record.levelname:8s}] [{location}] {record.getMessage()}"

        if record.exc_info:
            base_msg += f"\n{self.formatException(record.exc_info)}"

        if record.frame_context:
            base_msg += f" {record.frame_context}"

        return base_msg


def frame_context(frame_index: Optional[int]) -> dict:
    """Logging extra that tags a record with the frame it concerns."""
    if frame_index is None:
        return {}
    return {'frame_context': f"{{frame={frame_index}}}"}


class PerformanceLogger:
    """Context manager for performance logging. Keeps the measured duration."""

    def __init__(
        self,
        logger: logging.Logger,
        operation: str,
        threshold_ms: float = 1000,
        frame_index: Optional[int] = None
    ):
        self.logger = logger
        self.operation = operation
        self.threshold_ms = threshold_ms
        self.extra = frame_context(frame_index)
        self.start_time = None
        self.duration_ms: float = 0.0

    def __enter__(self):
        self.start_time = datetime.now()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time:
            self.duration_ms = (datetime.now() - self.start_time).total_seconds() * 1000

            if self.duration_ms > self.threshold_ms:
                self.logger.warning(f"SLOW: {self.operation} took {self.duration_ms:.1f}ms", extra=self.extra)
            else:
                self.logger.debug(f"{self.operation} took {self.duration_ms:.1f}ms", extra=self.extra)


def setup_logger(
    name: str,
    level: Optional[str] = None,
    log_file: Optional[str] = None
) -> logging.Logger:
    """
    Set up a logger with structured formatting and optional file output.

    Args:
        name: Logger name (usually __name__)
        level: Log level (DEBUG, INFO, WARNING, ERROR). Defaults to LOG_LEVEL env var or INFO
        log_file: Optional file path for logs. Defaults to SIGNANON_LOG_FILE env var,
            then logs/sign_anonymizer.log. An empty string disables file output.

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    if level is None:
        level = os.getenv('LOG_LEVEL', 'INFO').upper()

    log_level = getattr(logging, level, logging.INFO)
    logger.setLevel(log_level)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(StructuredFormatter())
    logger.addHandler(console_handler)

    if log_file is None:
        log_file = os.getenv('SIGNANON_LOG_FILE', DEFAULT_LOG_FILE)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        # Rotating handler keeps long batch runs from filling the disk
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding='utf-8'
        )
        file_handler.setLevel(log_level)
        file_handler.setFormatter(StructuredFormatter())
        logger.addHandler(file_handler)

    logger.propagate = False

    return logger


def get_perf_logger(
    logger: logging.Logger,
    operation: str,
    threshold_ms: float = 1000,
    frame_index: Optional[int] = None
):
    """
    Get a performance logger context manager.

    Usage:
        with get_perf_logger(logger, "frame 3", threshold_ms=5000) as perf:
            generate_frame(...)
        timings.append(perf.duration_ms)

    Args:
        logger: Logger instance
        operation: Operation name for logging
        threshold_ms: Milliseconds threshold for SLOW warning
        frame_index: Frame the operation works on, added to each record's context

    Returns:
        PerformanceLogger context manager
    """
    return PerformanceLogger(logger, operation, threshold_ms, frame_index)


def log_frame_table(logger: logging.Logger, df, name: str = "Frame table"):
    """
    Log summary statistics of a per-frame pandas DataFrame.

    Args:
        logger: Logger instance
        df: Pandas DataFrame with one row per frame
        name: Name for the table in logs
    """
    if df is None:
        logger.warning(f"{name} is None")
        return

    if df.empty:
        logger.info(f"{name} is empty (0 rows)")
        return

    logger.info(f"{name}: {len(df)} rows, {len(df.columns)} columns")

    if 'duration_ms' in df.columns:
        logger.info(
            f"{name}: mean {df['duration_ms'].mean():.1f}ms, "
            f"max {df['duration_ms'].max():.1f}ms per frame"
        )
