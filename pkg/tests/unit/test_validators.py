"""Unit tests for workload validation helpers."""

import pytest

from app.exceptions import ParseError
from app.utils.validators import (
    HEADER_PATTERN,
    is_power_of_two,
    powers_of_two_in_range,
    sanitize_trace_name,
    validate_swf_fields,
)


def test_validate_swf_fields():
    values = validate_swf_fields([str(i) for i in range(18)] + ["extra"], line_no=4)

    assert values == [float(i) for i in range(18)]


def test_short_line():
    with pytest.raises(ParseError, match="line 7: expected 18 fields, found 3"):
        validate_swf_fields(["1", "2", "3"], line_no=7)


@pytest.mark.parametrize("n,expected", [(1, True), (2, True), (64, True), (0, False), (6, False), (-4, False)])
def test_is_power_of_two(n, expected):
    assert is_power_of_two(n) is expected


def test_powers_of_two_in_range():
    assert powers_of_two_in_range(3, 40) == [4, 8, 16, 32]
    assert powers_of_two_in_range(5, 7) == []


@pytest.mark.parametrize(
    "raw,expected",
    [("SDSC-SP2-1998-4.2-cln", "SDSC-SP2-1998-4.2-cln"), ("my trace (v2)", "my_trace_v2"), ("", "trace"), ("///", "trace")],
)
def test_sanitize_trace_name(raw, expected):
    assert sanitize_trace_name(raw) == expected


def test_header_pattern():
    match = HEADER_PATTERN.match("; MaxProcs: 128")

    assert match.group(1) == "MaxProcs"
    assert match.group(2) == "128"
