"""Canonical JSON encoding and RFC 3339 timestamp handling.

The wire format is UTF-8 JSON canonicalized in the JCS style (RFC 8785
conventions): object members sorted lexicographically by code point, no
insignificant whitespace, and numbers in the shortest round-trip decimal
form ECMAScript produces. Timestamps are normalized to UTC at millisecond
precision before encoding. The canonical byte form is normative: it is what
gets hashed for digests and compared for idempotency collision checks.
"""

from __future__ import annotations

import json
import math
import re
from datetime import datetime, timezone
from typing import Any


class CanonicalizationError(ValueError):
    """Raised when a value has no canonical JSON representation."""


_STRING_DUMPS = json.JSONEncoder(ensure_ascii=False, separators=(",", ":")).encode

# Strings without quotes, backslashes, or control characters need no escaping.
_PLAIN_STRING = re.compile(r'[^"\\\x00-\x1f]*')


def _write_string(value: str, out: list[str]) -> None:
    if _PLAIN_STRING.fullmatch(value):
        out.append('"')
        out.append(value)
        out.append('"')
    else:
        out.append(_STRING_DUMPS(value))

_RFC3339_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})[Tt ]"
    r"(\d{2}):(\d{2}):(\d{2})(\.\d+)?"
    r"([Zz]|[+-]\d{2}:\d{2})$"
)


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp to a UTC datetime truncated to milliseconds.

    Accepts any numeric offset or Z; the result always carries tzinfo=UTC so
    that two spellings of the same instant compare (and encode) identically.
    """
    m = _RFC3339_RE.match(text)
    if not m:
        raise CanonicalizationError(f"not an RFC 3339 timestamp: {text!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    frac, offset = m.group(7), m.group(8)
    micro = 0
    if frac:
        digits = frac[1:][:6].ljust(6, "0")
        micro = int(digits)
    if offset in ("Z", "z"):
        tz = timezone.utc
    else:
        sign = 1 if offset[0] == "+" else -1
        oh, om = int(offset[1:3]), int(offset[4:6])
        from datetime import timedelta

        tz = timezone(sign * timedelta(hours=oh, minutes=om))
    try:
        dt = datetime(year, month, day, hour, minute, second, micro, tzinfo=tz)
    except ValueError as exc:
        raise CanonicalizationError(f"invalid timestamp {text!r}: {exc}") from exc
    return truncate_millis(dt.astimezone(timezone.utc))


def truncate_millis(dt: datetime) -> datetime:
    """Normalize a datetime to UTC with microseconds truncated to milliseconds."""
    if dt.tzinfo is None:
        raise CanonicalizationError("naive datetimes are not allowed")
    dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=(dt.microsecond // 1000) * 1000)


def format_rfc3339(dt: datetime) -> str:
    """Render a datetime in the canonical form YYYY-MM-DDTHH:MM:SS.mmmZ."""
    dt = truncate_millis(dt)
    return (
        f"{dt.year:04d}-{dt.month:02d}-{dt.day:02d}"
        f"T{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d}"
        f".{dt.microsecond // 1000:03d}Z"
    )


def format_number(value: Any) -> str:
    """Format an int or float the way ECMAScript Number-to-string does.

    This is what keeps independently written emitters byte-compatible:
    JSON.stringify-style shortest form, `1.0` rendered as `1`, exponent
    notation only outside [1e-6, 1e21).
    """
    if isinstance(value, bool):
        raise CanonicalizationError("bool is not a number")
    if isinstance(value, int):
        return str(value)
    return _format_float(float(value))


def _format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise CanonicalizationError("NaN and Infinity cannot be encoded")
    if x == 0.0:
        return "0"
    if x < 0:
        return "-" + _format_float(-x)
    # Fast path: in [1e-4, 1e16) Python's shortest repr never uses exponent
    # notation, which is exactly the ECMAScript rendering; integral floats
    # just drop the ".0".
    if 1e-4 <= x < 1e16:
        if x == int(x):
            return str(int(x))
        return repr(x)
    mantissa = repr(x)  # shortest round-trip decimal
    if "e" in mantissa:
        mantissa, _, exp_text = mantissa.partition("e")
        exp = int(exp_text)
    else:
        exp = 0
    if "." in mantissa:
        int_part, frac_part = mantissa.split(".")
    else:
        int_part, frac_part = mantissa, ""
    digits = (int_part + frac_part).lstrip("0")
    e10 = exp - len(frac_part)
    stripped = digits.rstrip("0")
    e10 += len(digits) - len(stripped)
    digits = stripped
    k = len(digits)
    n = e10 + k  # value == 0.<digits> * 10**n
    if k <= n <= 21:
        return digits + "0" * (n - k)
    if 0 < n <= 21:
        return digits[:n] + "." + digits[n:]
    if -6 < n <= 0:
        return "0." + "0" * (-n) + digits
    mant = digits[0] + ("." + digits[1:] if k > 1 else "")
    return f"{mant}e{'+' if n - 1 >= 0 else '-'}{abs(n - 1)}"


_FAST_DUMPS = json.JSONEncoder(
    ensure_ascii=False, separators=(",", ":"), sort_keys=True
).encode


class _SlowPath(Exception):
    """A float in the tree needs ECMAScript exponent treatment."""


def _normalize_fast(value: Any) -> Any:
    """Rewrite a tree so the C json encoder emits canonical bytes.

    Integral floats become ints (same JSON number, ES rendering); datetimes
    become canonical strings. Floats whose shortest repr differs from the
    ECMAScript form (outside [1e-4, 1e16)) bail out to the slow writer.
    """
    if value is None or value is True or value is False:
        return value
    t = type(value)
    if t is str or t is int:
        return value
    if t is float:
        if math.isnan(value) or math.isinf(value):
            raise CanonicalizationError("NaN and Infinity cannot be encoded")
        if value == 0.0:
            return 0
        a = abs(value)
        if value == int(value) and a < 1e16:
            return int(value)
        if 1e-4 <= a < 1e16:
            return value
        raise _SlowPath
    if t is datetime or isinstance(value, datetime):
        return format_rfc3339(value)
    if t is dict or isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise CanonicalizationError("object keys must be strings")
            out[k] = _normalize_fast(v)
        return out
    if isinstance(value, (list, tuple)):
        return [_normalize_fast(v) for v in value]
    if isinstance(value, (str, int)):  # enum/str|int subclasses
        return value
    if isinstance(value, float):
        return _normalize_fast(float(value))
    raise CanonicalizationError(f"type {type(value).__name__} has no canonical JSON form")


def canonical_bytes(value: Any) -> bytes:
    """Encode a JSON-compatible value to its canonical UTF-8 bytes."""
    try:
        return _FAST_DUMPS(_normalize_fast(value)).encode("utf-8")
    except _SlowPath:
        out: list[str] = []
        _write(value, out)
        return "".join(out).encode("utf-8")


def canonical_bytes_slow(value: Any) -> bytes:
    """Reference recursive writer; the fast path must match it byte for byte."""
    out: list[str] = []
    _write(value, out)
    return "".join(out).encode("utf-8")


def _write(value: Any, out: list[str]) -> None:
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, str):
        _write_string(value, out)
    elif isinstance(value, (int, float)):
        out.append(format_number(value))
    elif isinstance(value, datetime):
        _write_string(format_rfc3339(value), out)
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _write(item, out)
        out.append("]")
    elif isinstance(value, dict):
        out.append("{")
        first = True
        for key in sorted(value.keys()):
            if not isinstance(key, str):
                raise CanonicalizationError("object keys must be strings")
            if not first:
                out.append(",")
            first = False
            _write_string(key, out)
            out.append(":")
            _write(value[key], out)
        out.append("}")
    else:
        raise CanonicalizationError(
            f"type {type(value).__name__} has no canonical JSON form"
        )
