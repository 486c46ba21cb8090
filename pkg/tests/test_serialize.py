import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from drive_cbm import serialize


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=False, allow_infinity=False)),
                       max_size=4))
def test_round_trip_bit_exact(tensors):
    manifest, back = serialize.decode(serialize.encode({"a": [1, "x"]}, tensors))
    assert manifest == {"a": [1, "x"]}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_encoding_is_canonical():
    a = serialize.encode({"b": 1, "a": 2}, {"w": np.arange(3.0)})
    b = serialize.encode({"a": 2, "b": 1}, {"w": np.arange(3.0)})
    assert a == b


def test_errors_carry_offsets():
    blob = serialize.encode({}, {"w": np.ones(4)})
    with pytest.raises(serialize.FormatError) as info:
        serialize.decode(b"NOPE" + blob[4:])
    assert info.value.offset == 0
    with pytest.raises(serialize.FormatError):
        serialize.decode(blob[:10])
    with pytest.raises(serialize.FormatError) as info:
        serialize.decode(blob[:-1])
    assert info.value.offset == len(blob) - 1
    bad = serialize.encode({}, {}).replace(b'"tensors":[]', b'"tensors":[7]')
    bad = bad[:4] + serialize._LEN.pack(len(bad) - 12) + bad[12:]
    with pytest.raises(serialize.FormatError, match="malformed"):
        serialize.decode(bad)


def test_atomic_write(tmp_path):
    path = tmp_path / "sub" / "f.drvt"
    serialize.write(path, {"k": 1}, {"x": np.zeros(2)})
    assert serialize.read(path)[0] == {"k": 1}
    assert not list(path.parent.glob("*.tmp"))
