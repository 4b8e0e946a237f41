"""Utilities package for the scheduling toolkit."""

from .logger import setup_logger, get_logger
from .validators import (
    validate_swf_fields,
    is_power_of_two,
    powers_of_two_in_range,
    sanitize_trace_name,
)

__all__ = [
    "setup_logger",
    "get_logger",
    "validate_swf_fields",
    "is_power_of_two",
    "powers_of_two_in_range",
    "sanitize_trace_name",
]
