"""Canonical JSON encoding shared by signing, hashing, storage, and the wire.

Everything that crosses a trust boundary is encoded exactly one way: UTF-8
JSON with lexicographically sorted keys, no insignificant whitespace, floats
in shortest round-trip form, and timestamps as RFC 3339 UTC with millisecond
precision. Equal values therefore always produce identical bytes, which is
what makes detached signatures and block hashes stable.
"""

from __future__ import annotations

import json
import math
import re
from datetime import datetime, timezone


class CanonicalError(ValueError):
    """Value cannot be represented canonically (NaN, bad timestamp, ...)."""


_RFC3339_MS = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})\.(\d{3})Z$"
)

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def dumps(obj) -> bytes:
    """Encode `obj` as canonical JSON bytes."""
    _reject_non_finite(obj)
    text = json.dumps(
        obj,
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def loads(data: bytes):
    """Parse JSON bytes; raises CanonicalError on anything unparseable."""
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CanonicalError(f"not valid JSON: {exc}") from exc


def _reject_non_finite(obj) -> None:
    if isinstance(obj, float) and not math.isfinite(obj):
        raise CanonicalError("non-finite float has no canonical form")
    if isinstance(obj, dict):
        for key, value in obj.items():
            if not isinstance(key, str):
                raise CanonicalError("canonical objects use string keys only")
            _reject_non_finite(value)
    elif isinstance(obj, (list, tuple)):
        for value in obj:
            _reject_non_finite(value)


def format_millis(ms: int) -> str:
    """Epoch milliseconds (UTC) -> RFC 3339 string with exactly 3 decimals."""
    if not isinstance(ms, int) or isinstance(ms, bool):
        raise CanonicalError(f"timestamp must be integer milliseconds, got {ms!r}")
    if ms < 0:
        raise CanonicalError("timestamps before the epoch are not supported")
    seconds, rem = divmod(ms, 1000)
    dt = datetime.fromtimestamp(seconds, tz=timezone.utc)
    return f"{dt.strftime('%Y-%m-%dT%H:%M:%S')}.{rem:03d}Z"


def parse_millis(text: str) -> int:
    """Strict inverse of format_millis."""
    if not isinstance(text, str):
        raise CanonicalError(f"timestamp must be a string, got {type(text).__name__}")
    match = _RFC3339_MS.match(text)
    if match is None:
        raise CanonicalError(f"timestamp not in canonical RFC 3339 form: {text!r}")
    year, month, day, hour, minute, second, millis = (int(g) for g in match.groups())
    try:
        dt = datetime(year, month, day, hour, minute, second, tzinfo=timezone.utc)
    except ValueError as exc:
        raise CanonicalError(f"invalid calendar timestamp: {text!r}") from exc
    return int((dt - _EPOCH).total_seconds()) * 1000 + millis
