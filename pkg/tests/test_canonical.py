import math

import pytest
from hypothesis import given, strategies as st

from ambox import canonical


def test_sorted_keys_and_compact():
    assert canonical.dumps({"b": 1, "a": 2}) == b'{"a":2,"b":1}'


def test_float_shortest_roundtrip():
    # 23.50 and 23.5 are the same float and must share canonical bytes.
    assert canonical.dumps(23.50) == canonical.dumps(23.5) == b"23.5"


def test_non_finite_rejected():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(canonical.CanonicalError):
            canonical.dumps({"v": bad})


def test_non_string_keys_rejected():
    with pytest.raises(canonical.CanonicalError):
        canonical.dumps({1: "x"})


def test_loads_rejects_garbage():
    with pytest.raises(canonical.CanonicalError):
        canonical.loads(b"{not json")
    with pytest.raises(canonical.CanonicalError):
        canonical.loads(b"\xff\xfe")


def test_timestamp_format_parse_roundtrip():
    assert canonical.format_millis(0) == "1970-01-01T00:00:00.000Z"
    assert canonical.format_millis(1_704_067_200_123) == "2024-01-01T00:00:00.123Z"
    assert canonical.parse_millis("2024-01-01T00:00:00.123Z") == 1_704_067_200_123


@pytest.mark.parametrize(
    "text",
    [
        "2024-01-01T00:00:00Z",          # missing millis
        "2024-01-01T00:00:00.1234Z",     # too many digits
        "2024-01-01 00:00:00.000Z",      # wrong separator
        "2024-13-01T00:00:00.000Z",      # bad month
        "2024-01-01T00:00:00.000+00:00", # offset form not canonical
        "not a time",
    ],
)
def test_timestamp_parse_strict(text):
    with pytest.raises(canonical.CanonicalError):
        canonical.parse_millis(text)


@given(st.integers(min_value=0, max_value=4_102_444_800_000))
def test_timestamp_roundtrip_property(ms):
    assert canonical.parse_millis(canonical.format_millis(ms)) == ms


@given(
    st.recursive(
        st.one_of(
            st.none(),
            st.booleans(),
            st.integers(min_value=-(10**12), max_value=10**12),
            st.floats(allow_nan=False, allow_infinity=False, width=64),
            st.text(max_size=20),
        ),
        lambda children: st.one_of(
            st.lists(children, max_size=4),
            st.dictionaries(st.text(max_size=8), children, max_size=4),
        ),
        max_leaves=20,
    )
)
def test_dumps_loads_roundtrip(obj):
    assert canonical.loads(canonical.dumps(obj)) == obj
