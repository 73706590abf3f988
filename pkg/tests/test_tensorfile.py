import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from seqnav.errors import BadMagic, TruncatedPayload, UnsupportedVersion
from seqnav.tensorfile import dumps, loads, read_records, read_tensors, write_records, write_tensors

DTYPES = st.sampled_from([np.float32, np.float64, np.uint8])


def same_bits(a, b):
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@st.composite
def tensor_sets(draw):
    names = draw(st.lists(st.text(min_size=1, max_size=12), min_size=0, max_size=4, unique=True))
    out = {}
    for n in names:
        dt = draw(DTYPES)
        shape = draw(hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4))
        out[n] = draw(hnp.arrays(dt, shape))
    return out


@settings(max_examples=200)
@given(tensor_sets())
def test_round_trip_bit_identical(tensors):
    back = loads(dumps(tensors))
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert same_bits(back[name], arr)


def test_nan_payload_bits_survive(tmp_path):
    quiet = np.frombuffer(struct.pack("<Q", 0x7FF8_0000_DEAD_BEEF), dtype="<f8")
    data = {"nan": np.concatenate([quiet, [math.inf, -0.0]])}
    path = tmp_path / "t.sqnv"
    write_tensors(path, data)
    assert same_bits(read_tensors(path)["nan"], data["nan"])


def test_file_bytes_are_deterministic(tmp_path):
    data = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2, 3], dtype=np.uint8)}
    write_tensors(tmp_path / "1.sqnv", data)
    write_tensors(tmp_path / "2.sqnv", data)
    assert (tmp_path / "1.sqnv").read_bytes() == (tmp_path / "2.sqnv").read_bytes()


def test_header_layout():
    raw = dumps({"x": np.zeros((2, 1), dtype=np.float64)})
    assert raw[:4] == b"SQNV"
    assert struct.unpack("<HI", raw[4:10]) == (1, 1)
    assert struct.unpack("<H", raw[10:12]) == (1,)
    assert raw[12:13] == b"x"
    assert struct.unpack("<BB2Q", raw[13:31]) == (1, 2, 2, 1)
    assert len(raw) == 31 + 16


def test_big_endian_input_is_stored_little_endian():
    a = np.arange(3, dtype=">f8")
    back = loads(dumps({"a": a}))["a"]
    assert np.array_equal(back, a) and back.dtype == np.dtype("float64")


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        dumps({"a": np.arange(3, dtype=np.int32)})


def test_bad_magic():
    raw = bytearray(dumps({"a": np.zeros(2)}))
    raw[0:4] = b"NOPE"
    with pytest.raises(BadMagic):
        loads(bytes(raw))


def test_unsupported_version():
    with pytest.raises(UnsupportedVersion):
        loads(dumps({"a": np.zeros(2)}, version=9))


@pytest.mark.parametrize("cut", [1, 5, 8, 20])
def test_truncated_payload(cut):
    raw = dumps({"alpha": np.arange(4, dtype=np.float64)})
    with pytest.raises(TruncatedPayload):
        loads(raw[:-cut])


def test_duplicate_names_rejected():
    one = dumps({"a": np.zeros(1)})
    entry = one[10:]
    raw = one[:4] + struct.pack("<HI", 1, 2) + entry + entry
    with pytest.raises(ValueError):
        loads(raw)


FIELDS = [("t", "f"), ("n", "i"), ("label", "s")]


@settings(max_examples=100)
@given(st.lists(st.tuples(
    st.floats(allow_nan=False),
    st.integers(-2**62, 2**62),
    st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\0"), max_size=8),
), max_size=10))
def test_records_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rec") / "r.txt"
    data = [{"t": t, "n": n, "label": s} for t, n, s in rows]
    write_records(path, FIELDS, data)
    fields, back = read_records(path)
    assert fields == FIELDS
    assert back == data


def test_records_keep_non_finite(tmp_path):
    path = tmp_path / "r.txt"
    write_records(path, [("v", "f")], [{"v": math.inf}, {"v": math.nan}, {"v": -0.0}])
    _, back = read_records(path)
    assert back[0]["v"] == math.inf and math.isnan(back[1]["v"]) and math.copysign(1, back[2]["v"]) < 0


def test_records_truncated_row(tmp_path):
    path = tmp_path / "r.txt"
    write_records(path, FIELDS, [{"t": 1.0, "n": 2, "label": "x"}])
    text = path.read_text().rstrip("\n")
    path.write_text(text.rsplit(",", 1)[0] + "\n")
    with pytest.raises(TruncatedPayload):
        read_records(path)


def test_records_missing_header(tmp_path):
    path = tmp_path / "r.txt"
    path.write_text("")
    with pytest.raises(TruncatedPayload):
        read_records(path)


def test_records_reject_nul(tmp_path):
    with pytest.raises(ValueError):
        write_records(tmp_path / "r.txt", [("s", "s")], [{"s": "a\0b"}])


def test_records_bad_type(tmp_path):
    with pytest.raises(ValueError):
        write_records(tmp_path / "r.txt", [("a", "q")], [])


def test_records_keep_carriage_returns(tmp_path):
    rows = [{"s": "\r"}, {"s": "a\r\nb"}, {"s": "plain"}]
    write_records(tmp_path / "r.txt", [("s", "s")], rows)
    assert read_records(tmp_path / "r.txt")[1] == rows
