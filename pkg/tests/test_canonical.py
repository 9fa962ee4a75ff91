"""Canonical JSON encoding: determinism, number form, timestamp normalization."""

from __future__ import annotations

import json
import math
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from medlog.canonical import (
    CanonicalizationError,
    canonical_bytes,
    format_number,
    format_rfc3339,
    parse_rfc3339,
)


def test_sorted_keys_no_whitespace():
    value = {"b": 1, "a": {"z": [1, 2], "y": "x"}}
    assert canonical_bytes(value) == b'{"a":{"y":"x","z":[1,2]},"b":1}'


def test_key_order_of_input_is_irrelevant():
    a = {"one": 1, "two": {"x": 1, "y": 2}}
    b = {"two": {"y": 2, "x": 1}, "one": 1}
    assert canonical_bytes(a) == canonical_bytes(b)


@pytest.mark.parametrize(
    "value,expected",
    [
        (0.0, "0"),
        (-0.0, "0"),
        (1.0, "1"),
        (0.5, "0.5"),
        (0.92, "0.92"),
        (212.5, "212.5"),
        (1e21, "1e+21"),
        (1e20, "100000000000000000000"),
        (1e-6, "0.000001"),
        (1e-7, "1e-7"),
        (2.5e-10, "2.5e-10"),
        (5e22, "5e+22"),
        (123456.789, "123456.789"),
        (3, "3"),
        (-17, "-17"),
        (-0.25, "-0.25"),
    ],
)
def test_number_form_matches_ecmascript(value, expected):
    assert format_number(value) == expected


def test_nan_and_infinity_rejected():
    for bad in (float("nan"), float("inf"), float("-inf")):
        with pytest.raises(CanonicalizationError):
            format_number(bad)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_number_form_round_trips(x):
    # Shortest form must parse back to exactly the same double.
    assert float(format_number(x)) == x or (x == 0 and format_number(x) == "0")


@given(
    st.recursive(
        st.none() | st.booleans() | st.integers(-(2**53), 2**53) | st.text(max_size=20),
        lambda children: st.lists(children, max_size=4)
        | st.dictionaries(st.text(max_size=8), children, max_size=4),
        max_leaves=20,
    )
)
def test_canonical_bytes_are_valid_json(value):
    encoded = canonical_bytes(value)
    assert json.loads(encoded) == value


@given(
    st.recursive(
        st.none()
        | st.booleans()
        | st.integers(-(2**53), 2**53)
        | st.floats(allow_nan=False, allow_infinity=False)
        | st.text(max_size=20),
        lambda children: st.lists(children, max_size=4)
        | st.dictionaries(st.text(max_size=8), children, max_size=4),
        max_leaves=20,
    )
)
def test_fast_encoder_matches_reference_writer(value):
    from medlog.canonical import canonical_bytes_slow

    assert canonical_bytes(value) == canonical_bytes_slow(value)


def test_timestamp_offset_normalization():
    # Same instant spelled two ways must canonicalize identically.
    plus2 = parse_rfc3339("2023-03-01T10:00:00+02:00")
    zulu = parse_rfc3339("2023-03-01T08:00:00Z")
    # Independent oracle: apply the offset by hand.
    oracle = datetime(2023, 3, 1, 10, 0, 0, tzinfo=timezone.utc) - timedelta(hours=2)
    assert plus2 == zulu == oracle
    assert format_rfc3339(plus2) == "2023-03-01T08:00:00.000Z"


def test_timestamp_millisecond_truncation():
    dt = parse_rfc3339("2024-01-02T03:04:05.123456Z")
    assert format_rfc3339(dt) == "2024-01-02T03:04:05.123Z"
    assert format_rfc3339(parse_rfc3339("2024-01-02T03:04:05Z")) == "2024-01-02T03:04:05.000Z"


@pytest.mark.parametrize(
    "bad", ["2024-01-02", "2024-01-02T03:04:05", "not a time", "2024-13-02T03:04:05Z"]
)
def test_bad_timestamps_rejected(bad):
    with pytest.raises(CanonicalizationError):
        parse_rfc3339(bad)


def test_naive_datetime_rejected():
    with pytest.raises(CanonicalizationError):
        format_rfc3339(datetime(2024, 1, 1))


def test_string_escapes_match_json_stringify():
    assert canonical_bytes('he said "hi"\n') == b'"he said \\"hi\\"\\n"'
    assert canonical_bytes("") == b'"\\u001f"'
    # Non-ASCII stays raw UTF-8 (no \u escaping of printable text).
    assert canonical_bytes("åäö") == '"åäö"'.encode("utf-8")


def test_unencodable_values_rejected():
    with pytest.raises(CanonicalizationError):
        canonical_bytes({"x": object()})
    with pytest.raises(CanonicalizationError):
        canonical_bytes({1: "non-string key"})
    with pytest.raises(CanonicalizationError):
        canonical_bytes(float("nan"))
