"""Logging configuration for the scheduling toolkit.

This module provides the logging setup shared by every component:
- Colourised console output on stderr (stdout is kept for command output)
- Optional rotating file handler for persistent logs
- Optional serialized JSON sink for structured analysis
- Structured helpers for training epochs, evaluations, errors and timings
"""

import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from loguru import logger
from rich.console import Console
from rich.traceback import install

# Install rich traceback handler
install(show_locals=False)

# Rich console for tables and summaries
console = Console()


def _stderr_sink(message: str) -> None:
    # Resolve sys.stderr at write time so redirected streams keep working.
    sys.stderr.write(message)


class SchedulingLogger:
    """Logger wrapper holding the toolkit-wide loguru configuration."""

    def __init__(self):
        self.logger = logger
        self._setup_complete = False

    def setup_logger(
        self,
        log_level: str = "INFO",
        log_file_path: Optional[str] = None,
        max_file_size: str = "10 MB",
        backup_count: int = 5,
        enable_console: bool = True,
        enable_json_logs: bool = False,
        force: bool = False,
    ) -> None:
        """Setup logging sinks.

        Args:
            log_level: Minimum log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            log_file_path: Path to a log file, or None for console only
            max_file_size: Maximum size before rotation (e.g., "10 MB")
            backup_count: Number of rotated files to keep
            enable_console: Enable the stderr console sink
            enable_json_logs: Enable JSON structured logging next to the log file
            force: Reconfigure even if a setup already happened
        """
        if self._setup_complete and not force:
            return

        self.logger.remove()

        if enable_console:
            self.logger.add(
                _stderr_sink,
                level=log_level,
                format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
                       "<level>{level: <8}</level> | "
                       "<cyan>{extra[component]}</cyan> | "
                       "<level>{message}</level>",
                colorize=sys.stderr.isatty(),
                backtrace=True,
                diagnose=False,
            )

        if log_file_path:
            Path(log_file_path).parent.mkdir(parents=True, exist_ok=True)
            self.logger.add(
                log_file_path,
                level=log_level,
                format="{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} | {message}",
                rotation=max_file_size,
                retention=f"{backup_count} files",
                compression="zip",
                backtrace=True,
                diagnose=False,
            )

            if enable_json_logs:
                json_log_path = str(log_file_path).replace(".log", "_structured.json")
                self.logger.add(
                    json_log_path,
                    level=log_level,
                    serialize=True,
                    rotation=max_file_size,
                    retention=f"{backup_count} files",
                )

            error_log_path = str(log_file_path).replace(".log", "_errors.log")
            self.logger.add(
                error_log_path,
                level="ERROR",
                format="{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} | {message}\n{exception}",
                rotation="1 day",
                retention="30 days",
            )

        self._setup_complete = True
        self.logger.bind(component="logger").debug("Logger initialized")

    def get_component_logger(self, component_name: str):
        """Get a logger bound to a component name.

        Args:
            component_name: Name of the component (e.g., 'simulator', 'trainer')

        Returns:
            Logger instance bound to the component
        """
        return self.logger.bind(component=component_name)

    def log_epoch_summary(self, epoch: int, mean_metric: float, policy_loss: float,
                          value_loss: float, seconds: float):
        """Log one training epoch with structured data."""
        self.logger.bind(
            component="trainer",
            epoch=epoch,
            mean_metric=mean_metric,
            policy_loss=policy_loss,
            value_loss=value_loss,
            seconds=seconds,
            timestamp=datetime.utcnow().isoformat(),
            event_type="epoch_summary",
        ).info(
            f"epoch {epoch}: metric={mean_metric:.4f} pi_loss={policy_loss:.5f} "
            f"v_loss={value_loss:.5f} ({seconds:.1f}s)"
        )

    def log_evaluation_result(self, trace: str, scheduler: str, backfilling: bool, metric: float):
        """Log one scheduler's mean metric on one trace."""
        self.logger.bind(
            component="evaluate",
            trace=trace,
            scheduler=scheduler,
            backfilling=backfilling,
            metric=metric,
            timestamp=datetime.utcnow().isoformat(),
            event_type="evaluation_result",
        ).info(f"{trace} | {scheduler} | backfill={backfilling} | {metric:.4f}")

    def log_error_with_context(self, error: Exception, context: Dict[str, Any]):
        """Log error with additional context.

        Args:
            error: Exception that occurred
            context: Additional context information
        """
        self.logger.bind(
            component=context.get("stage", "error"),
            error_type=type(error).__name__,
            error_message=str(error),
            context=context,
            timestamp=datetime.utcnow().isoformat(),
            event_type="error",
        ).error(f"Error occurred: {error}")

    def log_performance_metric(self, operation: str, duration: float, success: bool):
        """Log performance metrics.

        Args:
            operation: Name of the operation
            duration: Duration in seconds
            success: Whether operation was successful
        """
        self.logger.bind(
            component="perf",
            operation=operation,
            duration_seconds=duration,
            success=success,
            timestamp=datetime.utcnow().isoformat(),
            event_type="performance_metric",
        ).debug(f"Performance metric: {operation} took {duration:.3f}s")


# Global logger instance
_scheduling_logger = SchedulingLogger()

# Records emitted before setup_logger still need the component field.
logger.configure(extra={"component": "-"})


def setup_logger(
    log_level: str = "INFO",
    log_file_path: Optional[str] = None,
    max_file_size: str = "10 MB",
    backup_count: int = 5,
    enable_console: bool = True,
    enable_json_logs: bool = False,
    force: bool = False,
) -> None:
    """Setup the global logger configuration."""
    _scheduling_logger.setup_logger(
        log_level=log_level,
        log_file_path=log_file_path,
        max_file_size=max_file_size,
        backup_count=backup_count,
        enable_console=enable_console,
        enable_json_logs=enable_json_logs,
        force=force,
    )


def get_logger(component_name: Optional[str] = None):
    """Get logger instance.

    Args:
        component_name: Optional component name for context

    Returns:
        Logger instance
    """
    if component_name:
        return _scheduling_logger.get_component_logger(component_name)
    return _scheduling_logger.logger


def log_epoch_summary(epoch: int, mean_metric: float, policy_loss: float,
                      value_loss: float, seconds: float):
    """Log an epoch summary event."""
    _scheduling_logger.log_epoch_summary(epoch, mean_metric, policy_loss, value_loss, seconds)


def log_evaluation_result(trace: str, scheduler: str, backfilling: bool, metric: float):
    """Log an evaluation result event."""
    _scheduling_logger.log_evaluation_result(trace, scheduler, backfilling, metric)


def log_error_with_context(error: Exception, context: Dict[str, Any]):
    """Log error with context."""
    _scheduling_logger.log_error_with_context(error, context)


def log_performance_metric(operation: str, duration: float, success: bool):
    """Log performance metric."""
    _scheduling_logger.log_performance_metric(operation, duration, success)
