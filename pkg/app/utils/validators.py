"""Validation utilities for workload input.

This module provides the checks shared by the SWF parser and the synthetic
generator:
- SWF data-line shape and numeric conversion
- Power-of-two processor counts
- Trace name sanitization for file names and CSV cells
"""

import re
from typing import List, Sequence

from app.exceptions import ParseError

SWF_FIELD_COUNT = 18

# Valid header pattern, e.g. "; MaxProcs: 128"
HEADER_PATTERN = re.compile(r"^;\s*(\w+)\s*:\s*(.*?)\s*$")

_UNSAFE_NAME_CHARS = re.compile(r"[^A-Za-z0-9._-]+")


def validate_swf_fields(fields: Sequence[str], line_no: int) -> List[float]:
    """Validate one SWF data line and convert its fields to numbers.

    Args:
        fields: Whitespace-split tokens of the line
        line_no: 1-based line number, used in error messages

    Returns:
        The 18 numeric field values

    Raises:
        ParseError: if the line has too few fields or a non-numeric token
    """
    if len(fields) < SWF_FIELD_COUNT:
        raise ParseError(
            f"expected {SWF_FIELD_COUNT} fields, found {len(fields)}", line_no
        )

    values = []
    for position, token in enumerate(fields[:SWF_FIELD_COUNT], start=1):
        try:
            values.append(float(token))
        except ValueError:
            raise ParseError(f"field {position} is not numeric: {token!r}", line_no) from None
    return values


def is_power_of_two(n: int) -> bool:
    """Check whether n is a positive power of two."""
    return n > 0 and (n & (n - 1)) == 0


def powers_of_two_in_range(low: int, high: int) -> List[int]:
    """All powers of two p with low <= p <= high."""
    powers = []
    p = 1
    while p <= high:
        if p >= low:
            powers.append(p)
        p *= 2
    return powers


def sanitize_trace_name(name: str, max_length: int = 64) -> str:
    """Sanitize a trace name for use in file names and table cells.

    Args:
        name: Raw name, usually a file stem
        max_length: Maximum allowed length

    Returns:
        Sanitized name, "trace" when nothing usable remains
    """
    if not name or not isinstance(name, str):
        return "trace"

    sanitized = _UNSAFE_NAME_CHARS.sub("_", name.strip()).strip("_")

    if len(sanitized) > max_length:
        sanitized = sanitized[:max_length]

    return sanitized or "trace"
